use aetsgd_core::consistency::{verify_iteration_delay, verify_round_delay, DelayBound, RhoMap};
use aetsgd_core::harness::{execute, ExperimentConfig, ObjectiveSpec, QuadraticSpec, Run, RoundBound};
use aetsgd_core::node::uniform_probabilities;
use aetsgd_core::{Assignment, SampleSchedule, Trace};
use proptest::prelude::*;

fn traced(seed: u64, n: usize, d: Option<u64>) -> ExperimentConfig {
    ExperimentConfig {
        nodes: n,
        objective: ObjectiveSpec::Quadratic(QuadraticSpec {
            m: 120,
            dim: 2,
            spread: 1.0,
        }),
        d: RoundBound(d),
        iters: Some(400),
        seed,
        eval_every: 100,
        speedup_reference: false,
        record_trace: true,
        ..ExperimentConfig::default()
    }
}

fn parts(run: Run) -> (Trace, RhoMap) {
    (run.trace.unwrap(), RhoMap::new(run.assignment.unwrap()))
}

#[test]
fn runs_respect_their_round_bound() {
    for d in [0, 1, 2, 4] {
        for seed in 0..4 {
            let run = execute(&traced(seed, 5, Some(d))).unwrap();
            let report = verify_round_delay(run.trace.as_ref().unwrap(), Some(d)).unwrap();
            assert!(report.ok(), "d={d} seed={seed}: {:?}", report.violations.first());
            assert!(report.checked > 0);
        }
    }
}

#[test]
fn unbounded_runs_are_vacuously_fine() {
    let run = execute(&traced(1, 5, None)).unwrap();
    assert!(verify_round_delay(run.trace.as_ref().unwrap(), None).unwrap().ok());
}

#[test]
fn disabled_checkpoint_is_caught() {
    let mut cfg = traced(2, 5, Some(1));
    cfg.enforce_sync = false;
    cfg.delay.stragglers = vec![(0, 5.0)];
    let run = execute(&cfg).unwrap();
    let report = verify_round_delay(run.trace.as_ref().unwrap(), Some(1)).unwrap();
    assert!(!report.violations.is_empty());
    let mut text = Vec::new();
    report.write_violations(&mut text).unwrap();
    assert_eq!(String::from_utf8(text).unwrap().lines().count(), report.violations.len() + 1);
}

#[test]
fn serial_run_has_no_staleness() {
    let (trace, rho) = parts(execute(&traced(3, 1, Some(0))).unwrap());
    let report = verify_iteration_delay(&trace, &rho, DelayBound::Constant(0.0)).unwrap();
    assert!(report.ok());
    assert_eq!(report.checked as u64, rho.total());
}

#[test]
fn ring3_meets_its_induced_iteration_bound() {
    for seed in 0..5 {
        let (trace, rho) = parts(execute(&traced(seed, 3, Some(1))).unwrap());
        let report = verify_iteration_delay(&trace, &rho, DelayBound::Rounds(1)).unwrap();
        assert!(report.ok(), "seed {seed}: {:?}", report.violations.first());
        // In a 3-ring every node neighbors every other.
        assert_eq!(report.indirect, 0);
    }
}

#[test]
fn concurrent_runs_are_stale_at_zero_tolerance() {
    let (trace, rho) = parts(execute(&traced(4, 5, Some(1))).unwrap());
    let report = verify_iteration_delay(&trace, &rho, DelayBound::Constant(0.0)).unwrap();
    assert!(!report.ok());
    assert!(report.indirect > 0);
    assert!(verify_iteration_delay(&trace, &rho, DelayBound::Unbounded).unwrap().ok());
}

#[test]
fn trace_file_round_trip_keeps_verdict() {
    let run = execute(&traced(5, 4, Some(1))).unwrap();
    let trace = run.trace.unwrap();
    let back = Trace::read_from(trace.to_text().as_bytes()).unwrap();
    assert_eq!(back, trace);
    assert!(verify_round_delay(&back, Some(1)).unwrap().ok());
}

proptest! {
    #[test]
    fn rho_is_a_bijection(n in 1usize..6, rounds in 0u64..8, a in 1u32..4, seed in 0u64..1000) {
        let sched = SampleSchedule::Linear { a: f64::from(a), p: 1.0, b: 0 };
        let asg = Assignment::setup(n, &sched, &uniform_probabilities(n), seed, rounds).unwrap();
        let map = RhoMap::new(asg.clone());
        for t in 0..asg.total() {
            let (c, i, h) = map.rho_inverse(t).unwrap();
            prop_assert_eq!(map.rho(c, i, h).unwrap(), t);
        }
        prop_assert!(map.rho_inverse(asg.total()).is_err());
    }

    #[test]
    fn tau_window_is_monotone(t in 3u64..1_000_000) {
        let w = |t: u64| t as f64 - aetsgd_core::tau(t);
        prop_assert!(w(t + 1) >= w(t));
    }
}
