//! `aetsgd` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime
//! failure (I/O, unreadable data or trace, simulation error), 3 the trace
//! violates the requested delay bound.

use std::fmt;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aetsgd_core::consistency::{verify_iteration_delay, verify_round_delay, DelayBound, RhoMap};
use aetsgd_core::harness::{
    self, Algorithm, BlobsSpec, ConfigError, CsvSpec, ExperimentConfig, HarnessError, IdxSpec, Metrics,
    ObjectiveSpec, QuadraticSpec, RoundBound, Series, SweepAxis,
};
use aetsgd_core::objectives::{self, PartitionKind};
use aetsgd_core::{Assignment, Latency, Trace};
use clap::{Args, Parser, Subcommand, ValueEnum};

const SCHEDULE_HELP: &str = "Sample-size schedule: linear:a,p,b (s_i = a*(i+1)^p + b) | const:s | thetalog:scale";

#[derive(Debug, Parser)]
#[command(name = "aetsgd", version, about = "Simulate asynchronous event-triggered SGD on peer-to-peer topologies")]
#[command(after_help = "Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime failure, 3 delay-bound violations found")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and report its metrics.
    Run(RunArgs),
    /// Run one experiment per value of a swept parameter.
    Sweep(SweepArgs),
    /// Run the event-triggered algorithm and the threshold baseline on the same setup.
    Compare(CompareArgs),
    /// Check a recorded trace against a delay bound.
    ValidateTrace(ValidateArgs),
    /// Write a synthetic dataset as CSV (`label,f0,f1,...`).
    GenData(GenDataArgs),
    /// Summarize IDX image and label files.
    InspectIdx(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveKind {
    Blobs,
    Quadratic,
    Idx,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PartitionArg {
    Shared,
    Iid,
    LabelSkew,
}

impl From<PartitionArg> for PartitionKind {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Shared => PartitionKind::Shared,
            PartitionArg::Iid => PartitionKind::Iid,
            PartitionArg::LabelSkew => PartitionKind::LabelSkew,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Aet,
    Threshold,
}

/// Experiment settings shared by `run`, `sweep` and `compare`. Flags
/// override values from `--config`.
#[derive(Debug, Args)]
struct ExperimentArgs {
    /// TOML experiment file; flags given on the command line take precedence
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed (required)
    #[arg(long)]
    seed: u64,
    /// Experiment name used in outputs [default: experiment]
    #[arg(long)]
    name: Option<String>,
    /// ring | line | complete | path to an edge list of `u v` lines [default: ring]
    #[arg(long)]
    topology: Option<String>,
    /// Number of compute nodes [default: 5]
    #[arg(long)]
    nodes: Option<usize>,
    /// Objective family [default: blobs]
    #[arg(long, value_enum)]
    objective: Option<ObjectiveKind>,
    /// Training data: CSV file (csv) or IDX images (idx)
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// IDX label file for --data (idx)
    #[arg(long, value_name = "PATH")]
    labels: Option<PathBuf>,
    /// Held-out data: CSV file (csv) or IDX images (idx)
    #[arg(long, value_name = "PATH")]
    test_data: Option<PathBuf>,
    /// IDX label file for --test-data (idx)
    #[arg(long, value_name = "PATH")]
    test_labels: Option<PathBuf>,
    /// Synthetic sample count [default: 2000 blobs, 1000 quadratic]
    #[arg(long)]
    m: Option<usize>,
    /// Synthetic feature dimension [default: 2]
    #[arg(long)]
    dim: Option<usize>,
    /// Blob classes [default: 2]
    #[arg(long)]
    classes: Option<usize>,
    /// Blob center radius [default: 10]
    #[arg(long, allow_negative_numbers = true)]
    separation: Option<f64>,
    /// Quadratic cloud standard deviation [default: 0.01]
    #[arg(long, allow_negative_numbers = true)]
    spread: Option<f64>,
    /// L2 penalty for logistic objectives [default: 0]
    #[arg(long, allow_negative_numbers = true)]
    l2: Option<f64>,
    #[arg(long, help = format!("{SCHEDULE_HELP} [default: linear:10,1,0]"))]
    schedule: Option<String>,
    /// Initial step size eta0 in eta_t = eta0 / (1 + beta*sqrt(t)) [default: 0.01]
    #[arg(long, allow_negative_numbers = true)]
    eta0: Option<f64>,
    /// Step decay beta [default: 0.01]
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// Asynchronous round bound: an integer or `inf` [default: 1]
    #[arg(long)]
    d: Option<RoundBound>,
    /// Iterations per node K
    #[arg(long)]
    iters: Option<u64>,
    /// Total iterations, split evenly across nodes (instead of --iters)
    #[arg(long)]
    iters_total: Option<u64>,
    /// Algorithm [default: aet]
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmArg>,
    /// Threshold baseline trigger coefficient [default: 0.2]
    #[arg(long, allow_negative_numbers = true)]
    threshold_coeff: Option<f64>,
    /// Data split across nodes [default: iid]
    #[arg(long, value_enum)]
    partition: Option<PartitionArg>,
    /// Evaluate every this many rounds [default: 1]
    #[arg(long)]
    eval_every: Option<u64>,
    /// Compute latency per iteration in ms, uniform on LO,HI [default: 0.1,1]
    #[arg(long, value_name = "LO,HI")]
    compute: Option<LatencyArg>,
    /// Network latency per message in ms, uniform on LO,HI [default: 0.1,1.5]
    #[arg(long, value_name = "LO,HI")]
    network: Option<LatencyArg>,
    /// Slow one node's compute by a factor; repeatable
    #[arg(long, value_name = "NODE:FACTOR")]
    straggler: Vec<StragglerArg>,
    /// Slow a randomly chosen node per round by this factor
    #[arg(long, value_name = "FACTOR")]
    roaming_straggler: Option<f64>,
    /// Skip the one-node reference run used for the speedup column
    #[arg(long)]
    no_speedup: bool,
}

#[derive(Debug, Clone, Copy)]
struct LatencyArg(Latency);

impl std::str::FromStr for LatencyArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
        Ok(LatencyArg(Latency::new(parse(lo)?, parse(hi)?)))
    }
}

#[derive(Debug, Clone, Copy)]
struct StragglerArg(usize, f64);

impl std::str::FromStr for StragglerArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (node, factor) = s.split_once(':').ok_or("expected NODE:FACTOR")?;
        let node = node.trim().parse().map_err(|e| format!("node `{node}`: {e}"))?;
        let factor = factor.trim().parse().map_err(|e| format!("factor `{factor}`: {e}"))?;
        Ok(StragglerArg(node, factor))
    }
}

#[derive(Debug, Args)]
struct Outputs {
    /// Write per-evaluation metrics as CSV
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Write held-out loss curves as an SVG line chart
    #[arg(long, value_name = "PATH")]
    svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[command(flatten)]
    outputs: Outputs,
    /// Record the event trace and write it here
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Write the slot assignment (one line of slot owners per round); needs --trace
    #[arg(long, value_name = "PATH", requires = "trace")]
    assignment: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[command(flatten)]
    outputs: Outputs,
    /// Swept parameter: n | d | K | constant-s | threshold-coeff
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated values; `inf` is allowed for d
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[command(flatten)]
    outputs: Outputs,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Trace file written by `run --trace`
    #[arg(long, value_name = "PATH")]
    trace: PathBuf,
    /// Round bound to check: an integer or `inf`
    #[arg(long, default_value = "1")]
    d: RoundBound,
    /// Write round-bound violations as CSV
    #[arg(long, value_name = "PATH")]
    violations: Option<PathBuf>,
    /// Slot assignment written by `run --assignment`; enables --iteration-bound
    #[arg(long, value_name = "PATH")]
    assignment: Option<PathBuf>,
    /// Iteration staleness bound: tau | const:X | rounds:D | inf
    #[arg(long, requires = "assignment")]
    iteration_bound: Option<BoundArg>,
}

#[derive(Debug, Clone, Copy)]
struct BoundArg(DelayBound);

impl std::str::FromStr for BoundArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bound = match s.split_once(':') {
            None if s == "tau" => DelayBound::Tau,
            None if s == "inf" => DelayBound::Unbounded,
            Some(("const", x)) => DelayBound::Constant(x.parse().map_err(|e| format!("`{x}`: {e}"))?),
            Some(("rounds", d)) => DelayBound::Rounds(d.parse().map_err(|e| format!("`{d}`: {e}"))?),
            _ => return Err(format!("expected tau | const:X | rounds:D | inf, got `{s}`")),
        };
        Ok(BoundArg(bound))
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DataKind {
    Blobs,
    Quadratic,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Dataset family
    #[arg(long, value_enum, default_value = "blobs")]
    kind: DataKind,
    /// Sample count
    #[arg(long, default_value_t = 2000)]
    m: usize,
    /// Feature dimension
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Blob classes
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Blob center radius
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    /// Quadratic cloud standard deviation
    #[arg(long, default_value_t = 0.01)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// IDX image file
    #[arg(long, value_name = "PATH")]
    images: PathBuf,
    /// IDX label file
    #[arg(long, value_name = "PATH")]
    labels: Option<PathBuf>,
}

enum Failure {
    Invalid(String),
    Runtime(String),
    Violations(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Violations(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (Failure::Invalid(m) | Failure::Runtime(m) | Failure::Violations(m)) = self;
        // Diagnostics stay on one line.
        f.write_str(&m.replace('\n', " "))
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => c.into(),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Prints a line to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn io_err(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(a) => cmd_compare(a),
        Command::ValidateTrace(a) => cmd_validate(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::InspectIdx(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn build_config(a: &ExperimentArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(v) = &a.name {
        cfg.name = v.clone();
    }
    if let Some(v) = &a.topology {
        cfg.topology = v.clone();
    }
    if let Some(v) = a.nodes {
        cfg.nodes = v;
    }
    if let Some(v) = &a.schedule {
        cfg.schedule = v.clone();
    }
    if let Some(v) = a.eta0 {
        cfg.eta0 = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.d {
        cfg.d = v;
    }
    if a.iters.is_some() || a.iters_total.is_some() {
        cfg.iters = a.iters;
        cfg.iters_total = a.iters_total;
    }
    if let Some(v) = a.algorithm {
        cfg.algorithm = match v {
            AlgorithmArg::Aet => Algorithm::Aet,
            AlgorithmArg::Threshold => Algorithm::Threshold,
        };
    }
    if let Some(v) = a.threshold_coeff {
        cfg.threshold_coeff = v;
    }
    if let Some(v) = a.partition {
        cfg.partition = v.into();
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = a.compute {
        cfg.delay.compute = v.0;
    }
    if let Some(v) = a.network {
        cfg.delay.network = v.0;
    }
    if !a.straggler.is_empty() {
        cfg.delay.stragglers = a.straggler.iter().map(|s| (s.0, s.1)).collect();
    }
    if let Some(v) = a.roaming_straggler {
        cfg.delay.roaming_straggler = Some(v);
    }
    if a.no_speedup {
        cfg.speedup_reference = false;
    }
    cfg.objective = objective_spec(a, cfg.objective)?;
    cfg.validate()?;
    Ok(cfg)
}

fn objective_spec(a: &ExperimentArgs, current: ObjectiveSpec) -> Result<ObjectiveSpec, Failure> {
    let mut spec = match (a.objective, current) {
        (None, cur) => cur,
        (Some(ObjectiveKind::Blobs), cur @ ObjectiveSpec::Blobs(_)) => cur,
        (Some(ObjectiveKind::Quadratic), cur @ ObjectiveSpec::Quadratic(_)) => cur,
        (Some(ObjectiveKind::Idx), cur @ ObjectiveSpec::Idx(_)) => cur,
        (Some(ObjectiveKind::Csv), cur @ ObjectiveSpec::Csv(_)) => cur,
        (Some(ObjectiveKind::Blobs), _) => ObjectiveSpec::Blobs(BlobsSpec::default()),
        (Some(ObjectiveKind::Quadratic), _) => ObjectiveSpec::Quadratic(QuadraticSpec::default()),
        (Some(ObjectiveKind::Idx), _) => {
            let (Some(images), Some(labels)) = (&a.data, &a.labels) else {
                return Err(Failure::Invalid("--objective idx needs --data and --labels".into()));
            };
            ObjectiveSpec::Idx(IdxSpec {
                images: images.clone(),
                labels: labels.clone(),
                test_images: None,
                test_labels: None,
                l2: 0.0,
            })
        }
        (Some(ObjectiveKind::Csv), _) => {
            let Some(path) = &a.data else {
                return Err(Failure::Invalid("--objective csv needs --data".into()));
            };
            ObjectiveSpec::Csv(CsvSpec {
                path: path.clone(),
                test_path: None,
                l2: 0.0,
            })
        }
    };
    let unused = |flag: &str, kind: &str| Failure::Invalid(format!("{flag} does not apply to the {kind} objective"));
    match &mut spec {
        ObjectiveSpec::Blobs(b) => {
            if a.data.is_some() || a.labels.is_some() || a.test_data.is_some() || a.test_labels.is_some() {
                return Err(unused("data paths", "blobs"));
            }
            if a.spread.is_some() {
                return Err(unused("--spread", "blobs"));
            }
            set(&mut b.m, a.m);
            set(&mut b.dim, a.dim);
            set(&mut b.classes, a.classes);
            set(&mut b.separation, a.separation);
            set(&mut b.l2, a.l2);
        }
        ObjectiveSpec::Quadratic(q) => {
            if a.data.is_some() || a.labels.is_some() || a.test_data.is_some() || a.test_labels.is_some() {
                return Err(unused("data paths", "quadratic"));
            }
            if a.classes.is_some() || a.separation.is_some() || a.l2.is_some() {
                return Err(unused("--classes, --separation and --l2", "quadratic"));
            }
            set(&mut q.m, a.m);
            set(&mut q.dim, a.dim);
            set(&mut q.spread, a.spread);
        }
        ObjectiveSpec::Idx(s) => {
            if a.m.is_some() || a.dim.is_some() || a.classes.is_some() || a.separation.is_some() || a.spread.is_some() {
                return Err(unused("synthetic data flags", "idx"));
            }
            if let Some(p) = &a.data {
                s.images = p.clone();
            }
            if let Some(p) = &a.labels {
                s.labels = p.clone();
            }
            if a.test_data.is_some() {
                s.test_images = a.test_data.clone();
            }
            if a.test_labels.is_some() {
                s.test_labels = a.test_labels.clone();
            }
            set(&mut s.l2, a.l2);
        }
        ObjectiveSpec::Csv(s) => {
            if a.m.is_some() || a.dim.is_some() || a.classes.is_some() || a.separation.is_some() || a.spread.is_some() {
                return Err(unused("synthetic data flags", "csv"));
            }
            if a.labels.is_some() || a.test_labels.is_some() {
                return Err(unused("label files", "csv"));
            }
            if let Some(p) = &a.data {
                s.path = p.clone();
            }
            if a.test_data.is_some() {
                s.test_path = a.test_data.clone();
            }
            set(&mut s.l2, a.l2);
        }
    }
    Ok(spec)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn warn_disconnected(cfg: &ExperimentConfig) -> Result<(), Failure> {
    if !cfg.build_topology()?.is_connected() {
        eprintln!("warning: topology `{}` is disconnected; nodes in different components cannot agree", cfg.topology);
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

fn summary(m: &Metrics) -> String {
    let best = m.best_node();
    format!(
        "{} [{}] nodes={} K={} rounds={}..{} duration_ms={:.1} messages={} best_node={} loss={} accuracy={} speedup={} agreement_linf={:.3e}",
        m.experiment,
        m.algorithm,
        m.nodes.len(),
        m.iters_per_node,
        m.min_rounds(),
        m.max_rounds(),
        m.duration_ms,
        m.messages_sent,
        best.map_or_else(|| "-".into(), |b| b.node.to_string()),
        fmt_opt(best.map(|b| b.loss), 6),
        fmt_opt(best.and_then(|b| b.accuracy), 4),
        fmt_opt(m.speedup, 3),
        m.agreement_linf(),
    )
}

fn write_outputs(metrics: &[Metrics], series: Vec<Series>, title: &str, outputs: &Outputs) -> Result<(), Failure> {
    if let Some(path) = &outputs.out {
        harness::export_csv(metrics, path)?;
    }
    if let Some(path) = &outputs.svg {
        harness::export_svg_lines(&series, title, path)?;
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let mut cfg = build_config(&a.exp)?;
    warn_disconnected(&cfg)?;
    cfg.record_trace = a.trace.is_some();
    let run = harness::execute(&cfg)?;
    say!("{}", summary(&run.metrics));
    for n in &run.metrics.nodes {
        say!(
            "  node {} rounds={} iters={} loss={:.6} accuracy={} finish_ms={:.1} wait_ms={:.1}",
            n.node,
            n.rounds,
            n.iterations,
            n.loss,
            fmt_opt(n.accuracy, 4),
            n.finish_ms,
            n.wait_ms
        );
    }
    if let (Some(path), Some(trace)) = (&a.trace, &run.trace) {
        let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        trace.write_to(std::io::BufWriter::new(file)).map_err(|e| io_err(path, e))?;
    }
    if let Some(path) = &a.assignment {
        let Some(asg) = &run.assignment else {
            return Err(Failure::Invalid("--assignment applies only to the aet algorithm".into()));
        };
        fs::write(path, assignment_text(asg)).map_err(|e| io_err(path, e))?;
    }
    write_outputs(
        std::slice::from_ref(&run.metrics),
        harness::loss_series(&run.metrics),
        &cfg.name,
        &a.outputs,
    )
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let cfg = build_config(&a.exp)?;
    warn_disconnected(&cfg)?;
    let mut table = Vec::with_capacity(a.values.len());
    for &v in &a.values {
        let point = harness::sweep_point(&cfg, a.axis, v)?;
        let m = harness::run_experiment(&point)?;
        say!("{}", summary(&m));
        table.push(m);
    }
    let series = table
        .iter()
        .filter_map(|m| {
            let best = m.best_node()?.node;
            harness::loss_series(m).into_iter().nth(best)
        })
        .collect();
    write_outputs(&table, series, &format!("{} sweep over {}", cfg.name, a.axis), &a.outputs)
}

fn cmd_compare(a: CompareArgs) -> Result<(), Failure> {
    let cfg = build_config(&a.exp)?;
    warn_disconnected(&cfg)?;
    let mut table = Vec::new();
    for algorithm in [Algorithm::Aet, Algorithm::Threshold] {
        let mut point = cfg.clone();
        point.algorithm = algorithm;
        point.name = format!("{}-{algorithm}", cfg.name);
        let m = harness::run_experiment(&point)?;
        say!("{}", summary(&m));
        table.push(m);
    }
    let (aet, thr) = (&table[0], &table[1]);
    say!(
        "messages aet/threshold = {}/{} ({:.3}x)",
        aet.messages_sent,
        thr.messages_sent,
        thr.messages_sent as f64 / aet.messages_sent.max(1) as f64
    );
    let series = table.iter().flat_map(harness::loss_series).collect();
    write_outputs(&table, series, &format!("{} aet vs threshold", cfg.name), &a.outputs)
}

fn assignment_text(asg: &Assignment) -> String {
    let mut out = format!("# nodes {}\n", asg.node_count());
    for i in 0..asg.rounds() {
        let owners: Vec<String> = asg.slots(i).iter().map(u32::to_string).collect();
        out.push_str(&owners.join(" "));
        out.push('\n');
    }
    out
}

fn parse_assignment(text: &str) -> Result<Assignment, String> {
    let mut lines = text.lines();
    let n = lines
        .next()
        .and_then(|l| l.strip_prefix("# nodes "))
        .and_then(|v| v.trim().parse::<usize>().ok())
        .ok_or("missing `# nodes N` header")?;
    let slots = lines
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|v| v.parse::<u32>().map_err(|e| format!("line {}: `{v}`: {e}", i + 2)))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Assignment::from_slots(n, slots).map_err(|e| e.to_string())
}

fn cmd_validate(a: ValidateArgs) -> Result<(), Failure> {
    let file = fs::File::open(&a.trace).map_err(|e| io_err(&a.trace, e))?;
    let trace = Trace::read_from(BufReader::new(file)).map_err(|e| io_err(&a.trace, e))?;
    let report = verify_round_delay(&trace, a.d.0).map_err(|e| io_err(&a.trace, e))?;
    say!(
        "round bound d={}: {} applied updates checked, {} violations",
        a.d,
        report.checked,
        report.violations.len()
    );
    if let Some(path) = &a.violations {
        let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        report.write_violations(&mut file).map_err(|e| io_err(path, e))?;
        file.flush().map_err(|e| io_err(path, e))?;
    }
    let mut failures = Vec::new();
    if let Some(v) = report.violations.first() {
        failures.push(format!(
            "{} round-bound violations, first: node {} round {} step {} at t={} lagged neighbor {} by {} rounds",
            report.violations.len(),
            v.node,
            v.round,
            v.h,
            v.time,
            v.neighbor,
            v.lag
        ));
    }
    if let (Some(path), Some(BoundArg(bound))) = (&a.assignment, a.iteration_bound) {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let asg = parse_assignment(&text).map_err(|e| io_err(path, e))?;
        let rho = RhoMap::new(asg);
        let report = verify_iteration_delay(&trace, &rho, bound).map_err(|e| io_err(&a.trace, e))?;
        say!(
            "iteration bound {bound:?}: {} steps checked, {} violations, {} indirect inclusions",
            report.checked,
            report.violations.len(),
            report.indirect
        );
        if let Some(v) = report.violations.first() {
            failures.push(format!(
                "{} iteration-bound violations, first: node {} iteration {} missing round {} of neighbor {}",
                report.violations.len(),
                v.node,
                v.t,
                v.missing_round,
                v.neighbor
            ));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violations(failures.join("; ")))
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let ds = match a.kind {
        DataKind::Blobs => objectives::synthetic_blobs(a.seed, a.m, a.dim, a.classes, a.separation),
        DataKind::Quadratic => objectives::synthetic_cloud(a.seed, a.m, a.dim, a.spread),
    }
    .map_err(|e| Failure::Invalid(e.to_string()))?;
    ds.write_csv(&a.out).map_err(|e| io_err(&a.out, e))?;
    say!("wrote {} samples of dimension {} to {}", ds.len(), ds.dim(), a.out.display());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<(), Failure> {
    let bytes = fs::read(&a.images).map_err(|e| io_err(&a.images, e))?;
    let images = objectives::parse_idx_images(&bytes).map_err(|e| io_err(&a.images, e))?;
    let (lo, hi) = images
        .pixels
        .iter()
        .fold((u8::MAX, u8::MIN), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    let mean = images.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / images.pixels.len().max(1) as f64;
    say!("images: {} of {}x{}", images.count, images.rows, images.cols);
    if !images.pixels.is_empty() {
        say!("pixels: min {lo} max {hi} mean {mean:.3}");
    }
    if let Some(path) = &a.labels {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        let labels = objectives::parse_idx_labels(&bytes).map_err(|e| io_err(path, e))?;
        let mut hist = [0usize; 256];
        for &l in &labels {
            hist[l as usize] += 1;
        }
        let counts: Vec<String> = hist
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(l, c)| format!("{l}:{c}"))
            .collect();
        say!("labels: {} ({})", labels.len(), counts.join(" "));
        objectives::idx_dataset(&images, &labels).map_err(|e| Failure::Invalid(e.to_string()))?;
    }
    Ok(())
}
