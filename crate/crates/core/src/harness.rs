//! Experiment configuration, execution, metrics, sweeps and export.
//!
//! A config is a flat TOML document:
//!
//! ```toml
//! name = "ring5"
//! topology = "ring"          # ring | line | complete | path to an edge list
//! nodes = 5
//! algorithm = "aet"          # aet | threshold
//! schedule = "linear:10,1,0"
//! eta0 = 0.01
//! beta = 0.01
//! d = 1                      # or "inf"
//! iters = 5000               # per node; or iters_total = 60000
//! seed = 7
//!
//! [objective]
//! kind = "blobs"
//! separation = 10.0
//!
//! [delay]
//! stragglers = [[2, 5.0]]
//! ```

use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::baselines::{ThresholdNode, DEFAULT_THRESHOLD_COEFF};
use crate::node::{uniform_probabilities, Assignment, Node, Plan, ProtocolError};
use crate::objectives::{
    load_idx, synthetic_blobs, synthetic_cloud, Dataset, Objective, ObjectiveError, Partition, PartitionKind,
};
use crate::schedules::{SampleSchedule, ScheduleError, StepSchedule, DEFAULT_BETA, DEFAULT_ETA0};
use crate::seeding::{derive_seed, tag};
use crate::simnet::{DelayModel, Engine, SimError, SimStats};
use crate::topology::{Topology, TopologyError};
use crate::trace::Trace;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}`: {reason}")]
    Field { field: &'static str, reason: String },
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn field(field: &'static str, reason: impl fmt::Display) -> ConfigError {
    ConfigError::Field {
        field,
        reason: reason.to_string(),
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv export: {0}")]
    Csv(#[from] csv::Error),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Round bound `d`; `None` is unbounded. Written as an integer or `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundBound(pub Option<u64>);

impl FromStr for RoundBound {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "none" | "unbounded" => Ok(RoundBound(None)),
            other => other
                .parse()
                .map(|d| RoundBound(Some(d)))
                .map_err(|_| format!("expected a non-negative integer or `inf`, got `{other}`")),
        }
    }
}

impl fmt::Display for RoundBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(d) => write!(f, "{d}"),
            None => f.write_str("inf"),
        }
    }
}

impl Serialize for RoundBound {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Some(d) => s.serialize_u64(d),
            None => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for RoundBound {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(RoundBound(Some(v))),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Aet,
    Threshold,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Aet => "aet",
            Algorithm::Threshold => "threshold",
        })
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aet" => Ok(Algorithm::Aet),
            "threshold" => Ok(Algorithm::Threshold),
            other => Err(format!("unknown algorithm `{other}` (aet | threshold)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsSpec {
    pub m: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub l2: f64,
    /// Held-out set size; defaults to `m`.
    pub eval_m: Option<usize>,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        BlobsSpec {
            m: 2000,
            dim: 2,
            classes: 2,
            separation: 10.0,
            l2: 0.0,
            eval_m: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticSpec {
    pub m: usize,
    pub dim: usize,
    pub spread: f64,
}

impl Default for QuadraticSpec {
    fn default() -> Self {
        QuadraticSpec {
            m: 1000,
            dim: 2,
            spread: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub l2: f64,
}

/// Rows of `label,f0,f1,...`. With an empty label column the task is the
/// mean quadratic, otherwise logistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    pub path: PathBuf,
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    Blobs(BlobsSpec),
    Quadratic(QuadraticSpec),
    Idx(IdxSpec),
    Csv(CsvSpec),
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec::Blobs(BlobsSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// `ring`, `line`, `complete` or a path to an edge-list file.
    pub topology: String,
    pub nodes: usize,
    pub objective: ObjectiveSpec,
    pub algorithm: Algorithm,
    /// Threshold baseline trigger coefficient.
    pub threshold_coeff: f64,
    pub schedule: String,
    pub eta0: f64,
    pub beta: f64,
    pub d: RoundBound,
    /// Iterations per node.
    pub iters: Option<u64>,
    /// Total iterations, split as `ceil(iters_total / nodes)` per node.
    pub iters_total: Option<u64>,
    pub delay: DelayModel,
    pub seed: u64,
    /// Evaluate every this many rounds (and always after the last).
    pub eval_every: u64,
    pub probabilities: Option<Vec<f64>>,
    pub partition: PartitionKind,
    /// Off only for fault injection.
    pub enforce_sync: bool,
    /// Run a one-node reference at matched total iterations for speedup.
    pub speedup_reference: bool,
    pub record_trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            topology: "ring".into(),
            nodes: 5,
            objective: ObjectiveSpec::default(),
            algorithm: Algorithm::Aet,
            threshold_coeff: DEFAULT_THRESHOLD_COEFF,
            schedule: "linear:10,1,0".into(),
            eta0: DEFAULT_ETA0,
            beta: DEFAULT_BETA,
            d: RoundBound(Some(1)),
            iters: None,
            iters_total: None,
            delay: DelayModel::default(),
            seed: 0,
            eval_every: 1,
            probabilities: None,
            partition: PartitionKind::Iid,
            enforce_sync: true,
            speedup_reference: true,
            record_trace: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sample_schedule(&self) -> Result<SampleSchedule, ConfigError> {
        let sched: SampleSchedule = self.schedule.parse().map_err(|e| field("schedule", e))?;
        sched.validate().map_err(|e| field("schedule", e))?;
        Ok(sched)
    }

    pub fn step_schedule(&self) -> Result<StepSchedule, ConfigError> {
        let step = StepSchedule::Diminishing {
            eta0: self.eta0,
            beta: self.beta,
        };
        step.validate().map_err(|e| {
            if self.eta0.is_finite() && self.eta0 > 0.0 {
                field("beta", e)
            } else {
                field("eta0", e)
            }
        })?;
        Ok(step)
    }

    /// Per-node iteration budget `K`.
    pub fn iters_per_node(&self) -> Result<u64, ConfigError> {
        match (self.iters, self.iters_total) {
            (Some(k), None) => Ok(k),
            (None, Some(total)) => Ok(total.div_ceil(self.nodes.max(1) as u64)),
            (Some(_), Some(_)) => Err(field("iters", "set only one of `iters` and `iters_total`")),
            (None, None) => Err(field("iters", "one of `iters` or `iters_total` is required")),
        }
    }

    /// Total iterations the speedup reference runs.
    fn iters_matched_total(&self) -> Result<u64, ConfigError> {
        Ok(match self.iters_total {
            Some(total) => total,
            None => self.iters_per_node()? * self.nodes as u64,
        })
    }

    pub fn build_topology(&self) -> Result<Topology, ConfigError> {
        let n = self.nodes;
        match self.topology.as_str() {
            "ring" => Ok(Topology::ring(n)),
            "line" => Ok(Topology::line(n)),
            "complete" => Ok(Topology::complete(n)),
            path => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| field("topology", format!("{path}: {e}")))?;
                Topology::parse_edge_list(&text, Some(n)).map_err(|e| field("topology", e))
            }
        }
    }

    /// Checks every field without loading data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() || self.name.contains([',', '\n', '"']) {
            return Err(field("name", "must be non-empty without commas, quotes or newlines"));
        }
        if self.nodes == 0 {
            return Err(field("nodes", "must be at least 1"));
        }
        self.sample_schedule()?;
        self.step_schedule()?;
        self.iters_per_node()?;
        if self.eval_every == 0 {
            return Err(field("eval_every", "must be at least 1"));
        }
        if self.algorithm == Algorithm::Threshold && !(self.threshold_coeff > 0.0 && self.threshold_coeff <= 1.0) {
            return Err(field("threshold_coeff", "must lie in (0, 1]"));
        }
        if let Some(p) = &self.probabilities {
            if p.len() != self.nodes {
                return Err(field("probabilities", format!("{} entries for {} nodes", p.len(), self.nodes)));
            }
            let sum: f64 = p.iter().sum();
            if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-12 {
                return Err(field("probabilities", "must be non-negative and sum to 1"));
            }
        }
        self.delay.validate(self.nodes).map_err(|e| field("delay", e))?;
        match &self.objective {
            ObjectiveSpec::Blobs(b) => {
                if b.classes < 2 || b.dim == 0 || b.m < b.classes.max(self.nodes) {
                    return Err(field("objective", "blobs need classes >= 2, dim >= 1 and m >= max(classes, nodes)"));
                }
                if !(b.separation >= 0.0 && b.separation.is_finite()) || !(b.l2 >= 0.0) {
                    return Err(field("objective", "separation and l2 must be finite and non-negative"));
                }
                if b.eval_m == Some(0) {
                    return Err(field("objective", "eval_m must be positive"));
                }
            }
            ObjectiveSpec::Quadratic(q) => {
                if q.dim == 0 || q.m < self.nodes || !(q.spread >= 0.0 && q.spread.is_finite()) {
                    return Err(field("objective", "quadratic needs dim >= 1, m >= nodes and finite spread >= 0"));
                }
            }
            ObjectiveSpec::Idx(s) => {
                if s.test_images.is_some() != s.test_labels.is_some() {
                    return Err(field("objective", "give both test_images and test_labels or neither"));
                }
                if !(s.l2 >= 0.0) {
                    return Err(field("objective", "l2 must be non-negative"));
                }
            }
            ObjectiveSpec::Csv(s) => {
                if !(s.l2 >= 0.0) {
                    return Err(field("objective", "l2 must be non-negative"));
                }
            }
        }
        self.build_topology()?;
        Ok(())
    }
}

/// Training set, held-out set and the loss they are scored with.
#[derive(Debug, Clone)]
pub struct Task {
    pub objective: Objective,
    pub train: Arc<Dataset>,
    pub eval: Arc<Dataset>,
}

fn logistic_for(ds: &Dataset, l2: f64) -> Objective {
    Objective::Logistic {
        classes: ds.classes(),
        features: ds.dim(),
        l2,
    }
}

impl Task {
    /// Synthetic sets are drawn from `seed`; the held-out set uses an
    /// independent stream of the same distribution.
    pub fn build(spec: &ObjectiveSpec, seed: u64) -> Result<Task, ObjectiveError> {
        let train_seed = derive_seed(seed, tag::DATA, 0);
        let eval_seed = derive_seed(seed, tag::EVAL, 0);
        let (objective, train, eval) = match spec {
            ObjectiveSpec::Blobs(b) => {
                let train = synthetic_blobs(train_seed, b.m, b.dim, b.classes, b.separation)?;
                let eval = synthetic_blobs(eval_seed, b.eval_m.unwrap_or(b.m), b.dim, b.classes, b.separation)?;
                (logistic_for(&train, b.l2), train, eval)
            }
            ObjectiveSpec::Quadratic(q) => {
                let train = synthetic_cloud(train_seed, q.m, q.dim, q.spread)?;
                let eval = synthetic_cloud(eval_seed, q.m, q.dim, q.spread)?;
                (Objective::MeanQuadratic { dim: q.dim }, train, eval)
            }
            ObjectiveSpec::Idx(s) => {
                let train = load_idx(&s.images, &s.labels)?;
                let eval = match (&s.test_images, &s.test_labels) {
                    (Some(i), Some(l)) => load_idx(i, l)?,
                    _ => train.clone(),
                };
                let classes = train.classes().max(eval.classes());
                let objective = Objective::Logistic {
                    classes,
                    features: train.dim(),
                    l2: s.l2,
                };
                (objective, train, eval)
            }
            ObjectiveSpec::Csv(s) => {
                let train = Dataset::read_csv(&s.path)?;
                let eval = match &s.test_path {
                    Some(p) => Dataset::read_csv(p)?,
                    None => train.clone(),
                };
                let objective = if train.labels().is_some() {
                    Objective::Logistic {
                        classes: train.classes().max(eval.classes()),
                        features: train.dim(),
                        l2: s.l2,
                    }
                } else {
                    Objective::MeanQuadratic { dim: train.dim() }
                };
                (objective, train, eval)
            }
        };
        let zero = vec![0.0; objective.model_dim()];
        objective.validate(&zero, &train)?;
        objective.validate(&zero, &eval)?;
        Ok(Task {
            objective,
            train: Arc::new(train),
            eval: Arc::new(eval),
        })
    }

    fn accuracy(&self, w: &[f64]) -> Result<Option<f64>, ObjectiveError> {
        match self.objective {
            Objective::MeanQuadratic { .. } => Ok(None),
            Objective::Logistic { .. } => self.objective.accuracy(w, &self.eval).map(Some),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeMetrics {
    pub node: usize,
    /// Communication rounds (AET) or broadcasts (threshold).
    pub rounds: u64,
    pub iterations: u64,
    pub train_loss: f64,
    /// Loss on the held-out set.
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub finish_ms: f64,
    pub wait_ms: f64,
}

/// One evaluation of one node's model.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub node: usize,
    pub round: u64,
    pub iter: u64,
    pub time_ms: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub experiment: String,
    pub algorithm: Algorithm,
    pub iters_per_node: u64,
    pub nodes: Vec<NodeMetrics>,
    pub curve: Vec<CurvePoint>,
    pub models: Vec<Vec<f64>>,
    pub messages_sent: u64,
    pub messages_delivered: u64,
    pub duration_ms: f64,
    /// One-node duration over this duration at matched total iterations.
    pub speedup: Option<f64>,
    /// Nodes in different components cannot agree; convergence claims do
    /// not apply.
    pub disconnected: bool,
}

impl Metrics {
    /// Node with the best held-out accuracy, or lowest held-out loss when
    /// there is no accuracy. Ties go to the lower id.
    pub fn best_node(&self) -> Option<&NodeMetrics> {
        self.nodes.iter().reduce(|best, n| {
            let better = match (n.accuracy, best.accuracy) {
                (Some(a), Some(b)) if a != b => a > b,
                _ => n.loss < best.loss,
            };
            if better {
                n
            } else {
                best
            }
        })
    }

    pub fn max_rounds(&self) -> u64 {
        self.nodes.iter().map(|n| n.rounds).max().unwrap_or(0)
    }

    pub fn min_rounds(&self) -> u64 {
        self.nodes.iter().map(|n| n.rounds).min().unwrap_or(0)
    }

    pub fn agreement_linf(&self) -> f64 {
        max_pairwise_linf(&self.models)
    }
}

/// Largest `max_k |a_k - b_k|` over all model pairs.
pub fn max_pairwise_linf(models: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in models.iter().enumerate() {
        for b in &models[i + 1..] {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

/// A finished run with its raw artifacts.
#[derive(Debug)]
pub struct Run {
    pub metrics: Metrics,
    pub trace: Option<Trace>,
    /// The slot assignment of an AET run.
    pub assignment: Option<Assignment>,
    pub stats: SimStats,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Metrics, HarnessError> {
    execute(cfg).map(|r| r.metrics)
}

/// Runs `cfg` and returns the metrics along with the trace (when
/// `record_trace` is set) and the slot assignment.
pub fn execute(cfg: &ExperimentConfig) -> Result<Run, HarnessError> {
    cfg.validate()?;
    let task = Task::build(&cfg.objective, cfg.seed)?;
    let mut run = execute_on(cfg, &task)?;
    run.metrics.speedup = if cfg.nodes == 1 {
        Some(1.0)
    } else if cfg.speedup_reference {
        let reference = reference_config(cfg)?;
        let base = execute_on(&reference, &task)?;
        Some(base.metrics.duration_ms / run.metrics.duration_ms)
    } else {
        None
    };
    Ok(run)
}

/// One node, same total work, no stragglers.
fn reference_config(cfg: &ExperimentConfig) -> Result<ExperimentConfig, ConfigError> {
    let mut reference = cfg.clone();
    reference.name = format!("{}-reference", cfg.name);
    reference.nodes = 1;
    reference.topology = "ring".into();
    reference.iters = Some(cfg.iters_matched_total()?);
    reference.iters_total = None;
    reference.delay.stragglers.clear();
    reference.delay.roaming_straggler = None;
    reference.probabilities = None;
    reference.record_trace = false;
    reference.speedup_reference = false;
    Ok(reference)
}

fn execute_on(cfg: &ExperimentConfig, task: &Task) -> Result<Run, HarnessError> {
    let topology = cfg.build_topology()?;
    let n = cfg.nodes;
    let k = cfg.iters_per_node()?;
    let partition = Partition::build(cfg.partition, cfg.seed, n, &task.train)?;
    let init = vec![0.0; task.objective.model_dim()];
    let neighbors = |c: usize| topology.neighbors(c).map(<[usize]>::to_vec);
    let mut curve = Vec::new();
    let mut eval_error = None;

    let (outcome_stats, trace, models, rounds, iterations, assignment): (SimStats, _, Vec<Vec<f64>>, Vec<u64>, Vec<u64>, _) = match cfg.algorithm {
        Algorithm::Aet => {
            let sched = cfg.sample_schedule()?;
            let rounds_needed = sched.required_rounds(k)?;
            // The schedule is per node; the shared assignment spreads n times
            // as many slots over the nodes.
            let sizes: Vec<u64> = sched.sizes(rounds_needed)?.into_iter().map(|s| s * n as u64).collect();
            let p = cfg.probabilities.clone().unwrap_or_else(|| uniform_probabilities(n));
            let assignment = Assignment::from_sizes(n, &sizes, &p, cfg.seed)?;
            let plan = Arc::new(Plan::new(assignment.clone(), &cfg.step_schedule()?, cfg.d.0)?);
            let mut agents = Vec::with_capacity(n);
            for c in 0..n {
                let mut node = Node::new(
                    c,
                    &neighbors(c)?,
                    init.clone(),
                    task.objective,
                    task.train.clone(),
                    partition.shard(c).to_vec(),
                    plan.clone(),
                    cfg.seed,
                )?;
                if !cfg.enforce_sync {
                    node.disable_sync_check();
                }
                agents.push(node);
            }
            let engine = Engine::new(agents, topology.clone(), &cfg.delay, cfg.seed)?.record_trace(cfg.record_trace);
            let every = cfg.eval_every;
            let outcome = engine.run_with(|view| {
                if eval_error.is_some() || ((view.round + 1) % every != 0 && view.round + 1 != rounds_needed) {
                    return;
                }
                let point = task.objective.loss(view.model, &task.eval).and_then(|loss| {
                    Ok(CurvePoint {
                        node: view.node,
                        round: view.round + 1,
                        iter: view.iterations,
                        time_ms: view.time,
                        loss,
                        accuracy: task.accuracy(view.model)?,
                    })
                });
                match point {
                    Ok(p) => curve.push(p),
                    Err(e) => eval_error = Some(e),
                }
            })?;
            for node in &outcome.agents {
                if node.round() != rounds_needed {
                    return Err(HarnessError::Invariant(format!(
                        "node {} finished {} rounds, schedule requires {rounds_needed}",
                        node.id(),
                        node.round()
                    )));
                }
            }
            let models = outcome.agents.iter().map(|a| a.model().to_vec()).collect();
            let iterations = outcome.agents.iter().map(Node::iterations).collect();
            (outcome.stats, outcome.trace, models, vec![rounds_needed; n], iterations, Some(assignment))
        }
        Algorithm::Threshold => {
            let mut agents = Vec::with_capacity(n);
            for c in 0..n {
                agents.push(ThresholdNode::new(
                    c,
                    &neighbors(c)?,
                    init.clone(),
                    task.objective,
                    task.train.clone(),
                    partition.shard(c).to_vec(),
                    k,
                    cfg.eta0,
                    cfg.threshold_coeff,
                    cfg.seed,
                )?);
            }
            let engine = Engine::new(agents, topology.clone(), &cfg.delay, cfg.seed)?.record_trace(cfg.record_trace);
            let outcome = engine.run()?;
            for (c, a) in outcome.agents.iter().enumerate() {
                curve.push(CurvePoint {
                    node: c,
                    round: a.broadcasts(),
                    iter: a.iteration(),
                    time_ms: outcome.stats.finish_ms[c],
                    loss: task.objective.loss(a.model(), &task.eval)?,
                    accuracy: task.accuracy(a.model())?,
                });
            }
            let models = outcome.agents.iter().map(|a| a.model().to_vec()).collect();
            let rounds = outcome.agents.iter().map(ThresholdNode::broadcasts).collect();
            let iterations = outcome.agents.iter().map(|a| a.iteration()).collect();
            (outcome.stats, outcome.trace, models, rounds, iterations, None)
        }
    };
    if let Some(e) = eval_error {
        return Err(e.into());
    }

    let mut nodes = Vec::with_capacity(n);
    for c in 0..n {
        let w = &models[c];
        nodes.push(NodeMetrics {
            node: c,
            rounds: rounds[c],
            iterations: iterations[c],
            train_loss: task.objective.loss(w, &task.train)?,
            loss: task.objective.loss(w, &task.eval)?,
            accuracy: task.accuracy(w)?,
            finish_ms: outcome_stats.finish_ms[c],
            wait_ms: outcome_stats.wait_ms[c],
        });
    }
    let metrics = Metrics {
        experiment: cfg.name.clone(),
        algorithm: cfg.algorithm,
        iters_per_node: k,
        nodes,
        curve,
        models,
        messages_sent: outcome_stats.messages_sent,
        messages_delivered: outcome_stats.messages_delivered,
        duration_ms: outcome_stats.duration_ms,
        speedup: None,
        disconnected: !topology.is_connected(),
    };
    Ok(Run {
        metrics,
        trace,
        assignment,
        stats: outcome_stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Nodes,
    D,
    Iters,
    ConstantS,
    ThresholdCoeff,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "n" | "nodes" => Ok(SweepAxis::Nodes),
            "d" => Ok(SweepAxis::D),
            "k" | "K" | "iters" => Ok(SweepAxis::Iters),
            "constant-s" | "s" => Ok(SweepAxis::ConstantS),
            "threshold-coeff" | "coeff" => Ok(SweepAxis::ThresholdCoeff),
            other => Err(format!(
                "unknown sweep axis `{other}` (n | d | K | constant-s | threshold-coeff)"
            )),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Nodes => "n",
            SweepAxis::D => "d",
            SweepAxis::Iters => "K",
            SweepAxis::ConstantS => "constant-s",
            SweepAxis::ThresholdCoeff => "threshold-coeff",
        })
    }
}

/// `cfg` with one axis set to `value`. Integer axes reject fractional
/// values; `d` accepts infinity.
pub fn sweep_point(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig, ConfigError> {
    let mut point = cfg.clone();
    let count = |name: &'static str| -> Result<u64, ConfigError> {
        if value.is_finite() && value >= 0.0 && value.fract() == 0.0 {
            Ok(value as u64)
        } else {
            Err(field(name, format!("sweep value {value} is not a non-negative integer")))
        }
    };
    match axis {
        SweepAxis::Nodes => point.nodes = count("nodes")? as usize,
        SweepAxis::D => {
            point.d = if value == f64::INFINITY {
                RoundBound(None)
            } else {
                RoundBound(Some(count("d")?))
            }
        }
        SweepAxis::Iters => {
            if cfg.iters_total.is_some() {
                point.iters_total = Some(count("iters_total")?);
            } else {
                point.iters = Some(count("iters")?);
            }
        }
        SweepAxis::ConstantS => point.schedule = format!("const:{}", count("schedule")?),
        SweepAxis::ThresholdCoeff => {
            point.algorithm = Algorithm::Threshold;
            point.threshold_coeff = value;
        }
    }
    let label = if value == f64::INFINITY { "inf".to_string() } else { value.to_string() };
    point.name = format!("{}-{axis}={label}", cfg.name);
    point.validate()?;
    Ok(point)
}

/// One run per value, all on the base seed.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<Metrics>, HarnessError> {
    values
        .iter()
        .map(|&v| run_experiment(&sweep_point(cfg, axis, v)?))
        .collect()
}

pub const CSV_COLUMNS: [&str; 10] = [
    "experiment",
    "node",
    "round",
    "iter",
    "loss",
    "accuracy",
    "rounds_total",
    "messages",
    "duration_ms",
    "speedup",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per curve point.
pub fn write_csv<W: Write>(metrics: &[Metrics], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for m in metrics {
        for p in &m.curve {
            w.write_record([
                m.experiment.clone(),
                p.node.to_string(),
                p.round.to_string(),
                p.iter.to_string(),
                p.loss.to_string(),
                opt(p.accuracy),
                m.nodes[p.node].rounds.to_string(),
                m.messages_sent.to_string(),
                m.duration_ms.to_string(),
                opt(m.speedup),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(metrics: &[Metrics], path: &Path) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path).map_err(|source| HarnessError::Io {
        path: path.to_owned(),
        source,
    })?;
    write_csv(metrics, std::io::BufWriter::new(file))?;
    Ok(())
}

/// A named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Held-out loss against iterations, one series per node.
pub fn loss_series(metrics: &Metrics) -> Vec<Series> {
    (0..metrics.nodes.len())
        .map(|c| Series {
            label: format!("{} node {c}", metrics.experiment),
            points: metrics
                .curve
                .iter()
                .filter(|p| p.node == c)
                .map(|p| (p.iter as f64, p.loss))
                .collect(),
        })
        .collect()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line chart with shared linear axes.
pub fn render_svg(series: &[Series], title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let finite = series
        .iter()
        .flat_map(|s| &s.points)
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        svg,
        r#"<path d="M{PAD} {PAD}V{b}H{r}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    )
    .unwrap();
    for (text, x, y, anchor) in [
        (format!("{x0:.4}"), PAD, H - PAD + 16.0, "start"),
        (format!("{x1:.4}"), W - PAD, H - PAD + 16.0, "end"),
        (format!("{y0:.4}"), PAD - 4.0, H - PAD, "end"),
        (format!("{y1:.4}"), PAD - 4.0, PAD + 4.0, "end"),
    ] {
        writeln!(
            svg,
            r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-family="sans-serif" font-size="10">{text}</text>"#
        )
        .unwrap();
    }
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut points = String::new();
        for &(x, y) in s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            if !points.is_empty() {
                points.push(' ');
            }
            write!(points, "{:.2},{:.2}", sx(x), sy(y)).unwrap();
        }
        writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"><title>{}</title></polyline>"#,
            escape(&s.label)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn export_svg_lines(series: &[Series], title: &str, path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, render_svg(series, title)).map_err(|source| HarnessError::Io {
        path: path.to_owned(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            nodes: 3,
            iters: Some(300),
            objective: ObjectiveSpec::Quadratic(QuadraticSpec {
                m: 60,
                ..QuadraticSpec::default()
            }),
            speedup_reference: false,
            seed: 3,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = small();
        cfg.d = RoundBound(None);
        cfg.delay.stragglers = vec![(1, 5.0)];
        let text = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn parses_documented_example() {
        let text = r#"
            name = "ring5"
            topology = "ring"
            nodes = 5
            algorithm = "aet"
            schedule = "linear:10,1,0"
            d = "inf"
            iters_total = 60000
            seed = 7

            [objective]
            kind = "blobs"
            separation = 4.0

            [delay]
            stragglers = [[2, 5.0]]
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.d, RoundBound(None));
        assert_eq!(cfg.iters_per_node().unwrap(), 12000);
        assert_eq!(cfg.delay.stragglers, vec![(2, 5.0)]);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("nodez = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("[objective]\nkind = \"blobs\"\nsep = 1.0").is_err());
    }

    #[test]
    fn field_level_errors() {
        let check = |cfg: ExperimentConfig, name: &str| match cfg.validate() {
            Err(ConfigError::Field { field, .. }) => assert_eq!(field, name),
            other => panic!("expected `{name}` error, got {other:?}"),
        };
        check(ExperimentConfig { iters: None, ..small() }, "iters");
        check(ExperimentConfig { iters_total: Some(10), ..small() }, "iters");
        check(ExperimentConfig { schedule: "linear:0,1,0".into(), ..small() }, "schedule");
        check(ExperimentConfig { eta0: -1.0, ..small() }, "eta0");
        check(ExperimentConfig { nodes: 0, ..small() }, "nodes");
        check(ExperimentConfig { probabilities: Some(vec![0.5, 0.5]), ..small() }, "probabilities");
        check(ExperimentConfig { topology: "/no/such/file".into(), ..small() }, "topology");
        let mut bad_delay = small();
        bad_delay.delay.stragglers = vec![(9, 2.0)];
        check(bad_delay, "delay");
    }

    #[test]
    fn iters_total_split_rounds_up() {
        let cfg = ExperimentConfig {
            nodes: 7,
            iters: None,
            iters_total: Some(60000),
            ..small()
        };
        assert_eq!(cfg.iters_per_node().unwrap(), 8572);
    }

    #[test]
    fn run_reports_required_rounds() {
        let m = run_experiment(&small()).unwrap();
        // 10 + 20 + ... + 70 = 280 < 300 <= 360
        assert!(m.nodes.iter().all(|n| n.rounds == 8));
        assert_eq!(m.messages_sent, 3 * 8 * 2);
        assert_eq!(m.messages_delivered, m.messages_sent);
        assert!(m.speedup.is_none());
        assert!(!m.disconnected);
        assert_eq!(m.curve.len(), 3 * 8);
    }

    #[test]
    fn single_node_speedup_is_one() {
        let cfg = ExperimentConfig {
            nodes: 1,
            speedup_reference: true,
            ..small()
        };
        assert_eq!(run_experiment(&cfg).unwrap().speedup, Some(1.0));
    }

    #[test]
    fn eval_cadence() {
        let cfg = ExperimentConfig { eval_every: 3, ..small() };
        let m = run_experiment(&cfg).unwrap();
        let rounds: Vec<u64> = m.curve.iter().filter(|p| p.node == 0).map(|p| p.round).collect();
        assert_eq!(rounds, vec![3, 6, 8]);
    }

    #[test]
    fn threshold_run() {
        let cfg = ExperimentConfig {
            algorithm: Algorithm::Threshold,
            ..small()
        };
        let m = run_experiment(&cfg).unwrap();
        assert!(m.nodes.iter().all(|n| n.iterations == 300));
        let total: u64 = m.nodes.iter().map(|n| n.rounds).sum();
        assert_eq!(m.messages_sent, 2 * total);
    }

    #[test]
    fn sweep_points() {
        let cfg = small();
        let p = sweep_point(&cfg, SweepAxis::ConstantS, 700.0).unwrap();
        assert_eq!(p.schedule, "const:700");
        assert_eq!(p.name, "experiment-constant-s=700");
        assert_eq!(sweep_point(&cfg, SweepAxis::D, f64::INFINITY).unwrap().d, RoundBound(None));
        assert!(sweep_point(&cfg, SweepAxis::Nodes, 2.5).is_err());
        let c = sweep_point(&cfg, SweepAxis::ThresholdCoeff, 0.4).unwrap();
        assert_eq!(c.algorithm, Algorithm::Threshold);
        let ms = sweep(&cfg, SweepAxis::Iters, &[100.0, 300.0]).unwrap();
        assert_eq!(ms[0].max_rounds(), 4);
        assert_eq!(ms[1].max_rounds(), 8);
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut out = Vec::new();
        write_csv(&[], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "experiment,node,round,iter,loss,accuracy,rounds_total,messages,duration_ms,speedup\n"
        );
    }

    #[test]
    fn linf_and_best_node() {
        assert_eq!(max_pairwise_linf(&[vec![0.0, 1.0], vec![0.5, 1.0], vec![0.0, -1.0]]), 2.0);
        assert_eq!(max_pairwise_linf(&[vec![1.0]]), 0.0);
        let m = run_experiment(&small()).unwrap();
        let best = m.best_node().unwrap();
        assert!(m.nodes.iter().all(|n| n.loss >= best.loss));
    }

    #[test]
    fn svg_is_deterministic() {
        let m = run_experiment(&small()).unwrap();
        let a = render_svg(&loss_series(&m), "loss <quad>");
        let b = render_svg(&loss_series(&run_experiment(&small()).unwrap()), "loss <quad>");
        assert_eq!(a, b);
        assert_eq!(a.matches("<polyline").count(), 3);
        assert!(a.contains("loss &lt;quad&gt;"));
        assert!(render_svg(&[], "empty").ends_with("</svg>\n"));
    }
}
