//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use aetsgd_core::baselines::serial_sgd_sizes;
use aetsgd_core::consistency::{verify_round_delay, RhoMap};
use aetsgd_core::harness::{
    execute, export_csv, run_experiment, sweep, Algorithm, BlobsSpec, ExperimentConfig, ObjectiveSpec, QuadraticSpec,
    RoundBound, SweepAxis, Task,
};
use aetsgd_core::node::{uniform_probabilities, Assignment};
use aetsgd_core::objectives::{synthetic_blobs, Dataset, Objective, PartitionKind};
use aetsgd_core::seeding::stream;
use aetsgd_core::{SampleSchedule, Trace};
use rand::Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Failure = String;

fn err<E: std::fmt::Display>(e: E) -> Failure {
    e.to_string()
}

/// Round-delay reports for every traced run, checked together by
/// criterion 7. Traces are verified as they arrive and then dropped.
struct Suite {
    checked: Vec<(String, Result<usize, String>)>,
}

impl Suite {
    fn keep(&mut self, label: impl Into<String>, d: RoundBound, trace: Option<Trace>) {
        if let Some(t) = trace {
            let result = verify_round_delay(&t, d.0)
                .map(|r| r.violations.len())
                .map_err(|e| e.to_string());
            self.checked.push((label.into(), result));
        }
    }
}

fn blobs_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: "blobs".into(),
        nodes: 5,
        objective: ObjectiveSpec::Blobs(BlobsSpec::default()),
        schedule: "linear:10,1,0".into(),
        d: RoundBound(Some(1)),
        iters: Some(5000),
        seed,
        speedup_reference: false,
        record_trace: true,
        ..ExperimentConfig::default()
    }
}

fn quadratic_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: "quadratic".into(),
        objective: ObjectiveSpec::Quadratic(QuadraticSpec {
            m: 1000,
            dim: 2,
            spread: 0.01,
        }),
        iters: Some(20000),
        eval_every: 1000,
        ..blobs_config(seed)
    }
}

fn c1_round_count(_: &mut Suite) -> Result<Outcome, Failure> {
    let sched = SampleSchedule::Linear { a: 10.0, p: 1.0, b: 0 };
    let t = sched.required_rounds(60_000).map_err(err)?;
    let cfg = ExperimentConfig {
        iters: Some(60_000),
        eval_every: 1_000_000,
        record_trace: false,
        ..quadratic_config(7)
    };
    let m = run_experiment(&cfg).map_err(err)?;
    let rounds: BTreeSet<u64> = m.nodes.iter().map(|n| n.rounds).collect();
    Ok(outcome(
        t == 110 && rounds == BTreeSet::from([110]),
        format!("required_rounds = {t}, simulated per-node rounds = {rounds:?}"),
    ))
}

fn c2_constant_rounds(_: &mut Suite) -> Result<Outcome, Failure> {
    let sizes = [10u64, 50, 100, 200, 500, 700, 1000];
    let expected = [6000u64, 1200, 600, 300, 120, 86, 60];
    let base = ExperimentConfig {
        iters: Some(60_000),
        nodes: 2,
        eval_every: 1_000_000,
        record_trace: false,
        ..quadratic_config(7)
    };
    let values: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let table = sweep(&base, SweepAxis::ConstantS, &values).map_err(err)?;
    let got: Vec<u64> = table.iter().map(|m| m.max_rounds()).collect();
    let uniform = table.iter().all(|m| m.min_rounds() == m.max_rounds());
    Ok(outcome(
        got == expected && uniform,
        format!("rounds = {got:?}, expected {expected:?}"),
    ))
}

fn c3_accuracy(suite: &mut Suite) -> Result<Outcome, Failure> {
    let cfg = blobs_config(11);
    let run = execute(&cfg).map_err(err)?;
    suite.keep("blobs accuracy", cfg.d, run.trace);
    let task = Task::build(&cfg.objective, cfg.seed).map_err(err)?;
    let sched: SampleSchedule = cfg.schedule.parse().map_err(err)?;
    let n = cfg.nodes as u64;
    let k = cfg.iters.unwrap();
    let sizes: Vec<u64> = sched
        .sizes(sched.required_rounds(k).map_err(err)?)
        .map_err(err)?
        .into_iter()
        .map(|s| s * n)
        .collect();
    let steps = cfg.step_schedule().map_err(err)?;
    let serial = serial_sgd_sizes(&task.objective, &task.train, n * k, &sizes, &steps, cfg.seed).map_err(err)?;
    let serial_acc = task.objective.accuracy(&serial.model, &task.eval).map_err(err)?;
    let accs: Vec<f64> = run.metrics.nodes.iter().map(|n| n.accuracy.unwrap()).collect();
    let pass = accs.iter().all(|&a| a >= 0.95 && (a - serial_acc).abs() <= 0.02);
    Ok(outcome(
        pass,
        format!(
            "node accuracies {:?}, serial reference {serial_acc:.4}",
            accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>()
        ),
    ))
}

/// Small constant steps over the whole dataset. With the default
/// diminishing steps the ring's disagreement modes are amplified faster
/// than the gradients damp them; that run is reported alongside.
fn agreement_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: "agreement".into(),
        objective: ObjectiveSpec::Quadratic(QuadraticSpec {
            m: 1000,
            dim: 2,
            spread: 0.1,
        }),
        partition: PartitionKind::Shared,
        eta0: 1e-6,
        beta: 0.0,
        iters: Some(2_000_000),
        eval_every: 1_000_000,
        ..blobs_config(seed)
    }
}

fn c4_agreement(suite: &mut Suite) -> Result<Outcome, Failure> {
    let cfg = agreement_config(13);
    let run = execute(&cfg).map_err(err)?;
    suite.keep("quadratic agreement", cfg.d, run.trace);
    let task = Task::build(&cfg.objective, cfg.seed).map_err(err)?;
    let optimum = task.objective.loss(&task.train.mean(), &task.train).map_err(err)?;
    let linf = run.metrics.agreement_linf();
    let worst = run
        .metrics
        .nodes
        .iter()
        .map(|n| n.train_loss / optimum - 1.0)
        .fold(0.0, f64::max);
    let default_steps = run_experiment(&ExperimentConfig {
        iters: Some(20000),
        record_trace: false,
        ..quadratic_config(13)
    })
    .map_err(err)?;
    Ok(outcome(
        linf <= 1e-3 && worst <= 0.01 && !run.metrics.disconnected,
        format!(
            "eta 1e-6 constant, K=2e6: max pairwise l-inf {linf:.3e}, worst loss excess {:.4}% over optimum {optimum:.4e}; \
             default steps, K=2e4 (informational): l-inf {:.3e}",
            100.0 * worst,
            default_steps.agreement_linf()
        ),
    ))
}

fn comm_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: "comm".into(),
        objective: ObjectiveSpec::Blobs(BlobsSpec {
            separation: 2.0,
            eval_m: Some(500),
            ..BlobsSpec::default()
        }),
        eval_every: 1_000_000,
        record_trace: false,
        ..blobs_config(seed)
    }
}

fn c5_communication(_: &mut Suite) -> Result<Outcome, Failure> {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let aet = run_experiment(&comm_config(seed)).map_err(err)?;
        let thr = run_experiment(&ExperimentConfig {
            algorithm: Algorithm::Threshold,
            ..comm_config(seed)
        })
        .map_err(err)?;
        let ok = aet.max_rounds() * 10 <= thr.min_rounds();
        pass &= ok;
        parts.push(format!("seed {seed}: {} vs {}", aet.max_rounds(), thr.min_rounds()));
    }
    Ok(outcome(pass, format!("AET rounds vs fewest threshold broadcasts: {}", parts.join(", "))))
}

fn c6_threshold_monotone(_: &mut Suite) -> Result<Outcome, Failure> {
    let coeffs = [1.0, 0.8, 0.6, 0.4, 0.2];
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let table = sweep(&comm_config(seed), SweepAxis::ThresholdCoeff, &coeffs).map_err(err)?;
        let counts: Vec<u64> = table.iter().map(|m| m.nodes.iter().map(|n| n.rounds).sum()).collect();
        pass &= counts.windows(2).all(|w| w[0] <= w[1]);
        parts.push(format!("seed {seed}: {counts:?}"));
    }
    Ok(outcome(pass, format!("total broadcasts for coeff {coeffs:?}: {}", parts.join("; "))))
}

fn straggler_config(seed: u64, d: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: format!("straggler-d{d}"),
        d: RoundBound(Some(d)),
        iters: Some(20000),
        ..quadratic_config(seed)
    };
    cfg.delay.roaming_straggler = Some(5.0);
    cfg
}

fn c8_straggler(suite: &mut Suite) -> Result<Outcome, Failure> {
    let ds = [0u64, 1, 2, 5, 7];
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let mut durations = Vec::new();
        for &d in &ds {
            let cfg = straggler_config(seed, d);
            let run = execute(&cfg).map_err(err)?;
            durations.push(run.metrics.duration_ms);
            suite.keep(format!("straggler seed {seed} d={d}"), cfg.d, run.trace);
        }
        let speedup = durations[0] / durations[ds.len() - 1];
        let trend = durations.windows(2).all(|w| w[1] <= 1.05 * w[0]);
        pass &= speedup >= 1.5 && trend;
        parts.push(format!(
            "seed {seed}: [{}] ratio {speedup:.2}",
            durations.iter().map(|d| format!("{d:.0}")).collect::<Vec<_>>().join(", ")
        ));
    }
    // Same check with the slowdown pinned to node 0 for the whole run.
    let mut pinned = Vec::new();
    for d in [0, 7] {
        let mut cfg = straggler_config(SEEDS[0], d);
        cfg.delay.roaming_straggler = None;
        cfg.delay.stragglers = vec![(0, 5.0)];
        cfg.record_trace = false;
        pinned.push(run_experiment(&cfg).map_err(err)?.duration_ms);
    }
    Ok(outcome(
        pass,
        format!(
            "roaming x5 durations (ms) for d={ds:?}: {}; pinned x5 on node 0 (informational): d0/d7 = {:.2}",
            parts.join("; "),
            pinned[0] / pinned[1]
        ),
    ))
}

fn c9_node_scaling(_: &mut Suite) -> Result<Outcome, Failure> {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let cfg = ExperimentConfig {
            iters: None,
            iters_total: Some(60_000),
            eval_every: 1_000_000,
            record_trace: false,
            ..blobs_config(seed)
        };
        let table = sweep(&cfg, SweepAxis::Nodes, &[1.0, 5.0]).map_err(err)?;
        let (one, five) = (table[0].duration_ms, table[1].duration_ms);
        pass &= five < one;
        parts.push(format!("seed {seed}: {one:.0} -> {five:.0}"));
    }
    Ok(outcome(pass, format!("duration (ms) n=1 -> n=5 at 60000 total iterations: {}", parts.join(", "))))
}

fn c10_rho(_: &mut Suite) -> Result<Outcome, Failure> {
    let schedules = [
        SampleSchedule::Linear { a: 1.0, p: 1.0, b: 0 },
        SampleSchedule::Constant { s: 3 },
        SampleSchedule::Linear { a: 2.0, p: 1.0, b: 1 },
    ];
    let mut checked = 0u64;
    let mut failures = 0u64;
    for n in 1..=4usize {
        let mut skewed = vec![0.0; n];
        skewed[0] = 1.0;
        for p in [uniform_probabilities(n), skewed] {
            for sched in &schedules {
                for rounds in 0..=6u64 {
                    for seed in 0..10u64 {
                        let a = Assignment::setup(n, sched, &p, seed, rounds).map_err(err)?;
                        let map = RhoMap::new(a.clone());
                        let mut image = BTreeSet::new();
                        for i in 0..rounds {
                            for c in 0..n {
                                for h in 1..=a.count(i, c) {
                                    let t = map.rho(c, i, h).map_err(err)?;
                                    checked += 1;
                                    if !image.insert(t) || map.rho_inverse(t).map_err(err)? != (c, i, h) {
                                        failures += 1;
                                    }
                                }
                            }
                        }
                        if image != (0..a.total()).collect::<BTreeSet<u64>>() {
                            failures += 1;
                        }
                        if map.rho_inverse(a.total()).is_ok() {
                            failures += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(outcome(failures == 0, format!("{checked} triples round-tripped, {failures} failures")))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

/// Central differences of the per-sample loss.
fn fd_grad(obj: &Objective, w: &[f64], row: &Dataset) -> Result<Vec<f64>, Failure> {
    let h = 1e-6;
    let mut g = vec![0.0; w.len()];
    let mut probe = w.to_vec();
    for k in 0..w.len() {
        probe[k] = w[k] + h;
        let up = obj.loss(&probe, row).map_err(err)?;
        probe[k] = w[k] - h;
        let down = obj.loss(&probe, row).map_err(err)?;
        probe[k] = w[k];
        g[k] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

fn c11_gradients(_: &mut Suite) -> Result<Outcome, Failure> {
    let blobs = synthetic_blobs(5, 200, 3, 4, 2.0).map_err(err)?;
    let objectives = [
        (Objective::MeanQuadratic { dim: 3 }, "quadratic"),
        (
            Objective::Logistic {
                classes: 4,
                features: 3,
                l2: 0.0,
            },
            "logistic",
        ),
        (
            Objective::Logistic {
                classes: 4,
                features: 3,
                l2: 0.1,
            },
            "logistic+l2",
        ),
    ];
    let mut rng = stream(99, 0, 0);
    let mut pass = true;
    let mut parts = Vec::new();
    for (obj, name) in objectives {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let w: Vec<f64> = (0..obj.model_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let idx = rng.random_range(0..blobs.len());
            let row = blobs.select(&[idx]);
            let analytic = obj.grad(&w, &blobs, idx).map_err(err)?;
            worst = worst.max(rel_err(&analytic, &fd_grad(&obj, &w, &row)?));
        }
        pass &= worst < 1e-5;
        parts.push(format!("{name} {worst:.2e}"));
    }
    Ok(outcome(pass, format!("worst relative error over 100 points: {}", parts.join(", "))))
}

fn c12_determinism(_: &mut Suite) -> Result<Outcome, Failure> {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut cfg = blobs_config(21);
    cfg.iters = Some(1500);
    cfg.delay.stragglers = vec![(3, 2.0)];
    let mut files = Vec::new();
    for rep in 0..2 {
        let run = execute(&cfg).map_err(err)?;
        let trace_path = dir.path().join(format!("trace{rep}.log"));
        let csv_path = dir.path().join(format!("metrics{rep}.csv"));
        let mut f = std::fs::File::create(&trace_path).map_err(err)?;
        run.trace.expect("trace recorded").write_to(&mut f).map_err(err)?;
        export_csv(&[run.metrics], &csv_path).map_err(err)?;
        files.push((
            std::fs::read(&trace_path).map_err(err)?,
            std::fs::read(&csv_path).map_err(err)?,
        ));
    }
    let same_trace = files[0].0 == files[1].0;
    let same_csv = files[0].1 == files[1].1;
    Ok(outcome(
        same_trace && same_csv && !files[0].0.is_empty(),
        format!(
            "trace {} bytes identical: {same_trace}; csv {} bytes identical: {same_csv}",
            files[0].0.len(),
            files[0].1.len()
        ),
    ))
}

fn c13_setup_expectation(_: &mut Suite) -> Result<Outcome, Failure> {
    let n = 5;
    let p = uniform_probabilities(n);
    let mut counts = vec![Vec::with_capacity(1000); n];
    for seed in 0..1000u64 {
        let a = Assignment::from_sizes(n, &[1000], &p, seed).map_err(err)?;
        for (c, v) in counts.iter_mut().enumerate() {
            v.push(a.count(0, c) as f64);
        }
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for v in &counts {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        let se = (var / v.len() as f64).sqrt();
        pass &= (mean - 200.0).abs() <= 3.0 * se;
        parts.push(format!("{mean:.2}+-{se:.2}"));
    }
    Ok(outcome(pass, format!("mean s_(i,c) per node (+- 1 s.e.): {}", parts.join(", "))))
}

fn c7_asynchrony(suite: &mut Suite) -> Result<Outcome, Failure> {
    let mut clean = 0;
    let mut dirty = Vec::new();
    for (label, result) in &suite.checked {
        match result {
            Ok(0) => clean += 1,
            Ok(v) => dirty.push(format!("{label} ({v} violations)")),
            Err(e) => dirty.push(format!("{label} (malformed: {e})")),
        }
    }
    let mut cfg = blobs_config(17);
    cfg.iters = Some(2000);
    cfg.enforce_sync = false;
    cfg.delay.stragglers = vec![(0, 5.0)];
    let mutant = execute(&cfg).map_err(err)?;
    let caught = verify_round_delay(mutant.trace.as_ref().expect("trace recorded"), cfg.d.0)
        .map_err(err)?
        .violations
        .len();
    let pass = dirty.is_empty() && clean > 0 && caught >= 1;
    Ok(outcome(
        pass,
        format!(
            "{clean} suite traces clean{}; mutation (no checkpoint, x5 straggler, d=1): {caught} violations",
            if dirty.is_empty() { String::new() } else { format!(", dirty: {}", dirty.join(", ")) }
        ),
    ))
}

type Criterion = fn(&mut Suite) -> Result<Outcome, Failure>;

fn main() -> ExitCode {
    // Criterion 7 runs last so it sees the traces of every other run.
    let criteria: [(u32, &str, Criterion, Option<Duration>); 13] = [
        (1, "round count, linear schedule", c1_round_count, Some(Duration::from_secs(1))),
        (2, "round counts, constant schedules", c2_constant_rounds, None),
        (3, "logistic accuracy vs serial", c3_accuracy, Some(Duration::from_secs(30))),
        (4, "node agreement", c4_agreement, Some(Duration::from_secs(10))),
        (5, "communication reduction", c5_communication, Some(Duration::from_secs(120))),
        (6, "threshold monotonicity", c6_threshold_monotone, None),
        (8, "straggler speedup trend", c8_straggler, None),
        (9, "node scaling trend", c9_node_scaling, None),
        (10, "rho bijection", c10_rho, Some(Duration::from_secs(5))),
        (11, "gradient oracle", c11_gradients, None),
        (12, "determinism", c12_determinism, None),
        (13, "setup expectation", c13_setup_expectation, None),
        (7, "asynchrony invariant", c7_asynchrony, None),
    ];
    let mut suite = Suite { checked: Vec::new() };
    let mut results = Vec::new();
    for (id, name, run, limit) in criteria {
        let start = Instant::now();
        let result = run(&mut suite);
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let limit_note = match limit {
            Some(l) if !in_time => format!(" (over the {:.0?} limit)", l),
            _ => String::new(),
        };
        results.push((id, pass && in_time, format!("{name}: {detail} [{elapsed:.2?}]{limit_note}")));
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, ok, line) in &results {
        println!("criterion {id:>2} {}: {line}", if *ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
