//! Global timeline mapping and post-hoc delay verification of traces.
//!
//! `rho(c, i, h)` places the `h`-th step of node `c` in round `i` on a single
//! iteration timeline: the prefix sum of earlier round sizes plus the slot
//! index of the `h`-th slot owned by `c` in round `i`.

use std::io::Write;

use thiserror::Error;

use crate::node::Assignment;
use crate::schedules::tau;
use crate::trace::{Trace, TraceKind};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConsistencyError {
    #[error("h={h} out of range 1..={count} for node {node} in round {round}")]
    HOutOfRange { node: usize, round: u64, h: u64, count: u64 },
    #[error("round {round} outside the {rounds} materialized rounds")]
    RoundOutOfRange { round: u64, rounds: u64 },
    #[error("node {node} outside 0..{n}")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("global iteration {t} outside 0..{total}")]
    IterationOutOfRange { t: u64, total: u64 },
    #[error("malformed trace at record {index}: {reason}")]
    Malformed { index: usize, reason: String },
}

/// Forward and inverse tables of `rho` for one assignment.
#[derive(Debug, Clone)]
pub struct RhoMap {
    assignment: Assignment,
    /// Per round, per node: slot indices owned by the node, ascending.
    occurrences: Vec<Vec<Vec<u32>>>,
    /// Per round, per slot: 1-based rank of the slot among its owner's.
    ranks: Vec<Vec<u32>>,
}

impl RhoMap {
    pub fn new(assignment: Assignment) -> Self {
        let n = assignment.node_count();
        let mut occurrences = Vec::with_capacity(assignment.rounds() as usize);
        let mut ranks = Vec::with_capacity(assignment.rounds() as usize);
        for i in 0..assignment.rounds() {
            let mut occ = vec![Vec::new(); n];
            let mut rank = Vec::with_capacity(assignment.round_size(i) as usize);
            for (t, &owner) in assignment.slots(i).iter().enumerate() {
                let list = &mut occ[owner as usize];
                list.push(t as u32);
                rank.push(list.len() as u32);
            }
            occurrences.push(occ);
            ranks.push(rank);
        }
        RhoMap {
            assignment,
            occurrences,
            ranks,
        }
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    /// Total materialized iterations, `sum_i s_i`.
    pub fn total(&self) -> u64 {
        self.assignment.total()
    }

    pub fn rho(&self, c: usize, i: u64, h: u64) -> Result<u64, ConsistencyError> {
        let n = self.assignment.node_count();
        if c >= n {
            return Err(ConsistencyError::NodeOutOfRange { node: c, n });
        }
        if i >= self.assignment.rounds() {
            return Err(ConsistencyError::RoundOutOfRange {
                round: i,
                rounds: self.assignment.rounds(),
            });
        }
        let occ = &self.occurrences[i as usize][c];
        if h == 0 || h > occ.len() as u64 {
            return Err(ConsistencyError::HOutOfRange {
                node: c,
                round: i,
                h,
                count: occ.len() as u64,
            });
        }
        Ok(self.assignment.round_start(i) + occ[(h - 1) as usize] as u64)
    }

    pub fn rho_inverse(&self, t: u64) -> Result<(usize, u64, u64), ConsistencyError> {
        let total = self.total();
        if t >= total {
            return Err(ConsistencyError::IterationOutOfRange { t, total });
        }
        // Largest round whose start is <= t; empty rounds share a start with
        // their successor, so take the last such round that is non-empty.
        let rounds = self.assignment.rounds();
        let (mut lo, mut hi) = (0u64, rounds);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.assignment.round_start(mid) <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let i = lo;
        let offset = t - self.assignment.round_start(i);
        let c = self.assignment.owner(i, offset);
        let h = self.ranks[i as usize][offset as usize] as u64;
        Ok((c, i, h))
    }

    /// Global index of node `c`'s first step in each round it works in, as
    /// `(round, index)` pairs in ascending order.
    fn first_steps(&self, c: usize) -> Vec<(u64, u64)> {
        (0..self.assignment.rounds())
            .filter_map(|i| {
                self.occurrences[i as usize][c]
                    .first()
                    .map(|&slot| (i, self.assignment.round_start(i) + slot as u64))
            })
            .collect()
    }
}

/// One breach of the round-level bound.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundViolation {
    pub time: f64,
    pub node: usize,
    pub round: u64,
    pub h: u64,
    pub neighbor: usize,
    /// `round - rounds received from neighbor`
    pub lag: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundDelayReport {
    pub checked: usize,
    pub violations: Vec<RoundViolation>,
}

impl RoundDelayReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// `time,node,round,h,neighbor,lag` per violation.
    pub fn write_violations<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "time,node,round,h,neighbor,lag")?;
        for v in &self.violations {
            writeln!(out, "{},{},{},{},{},{}", v.time, v.node, v.round, v.h, v.neighbor, v.lag)?;
        }
        Ok(())
    }
}

fn malformed(index: usize, reason: String) -> ConsistencyError {
    ConsistencyError::Malformed { index, reason }
}

/// Tracks per-node round progress and checks record ordering.
struct Progress {
    /// Per node: (open round, last h seen in it).
    open: Vec<(u64, u64)>,
}

impl Progress {
    fn new(n: usize) -> Self {
        Progress { open: vec![(0, 0); n] }
    }

    fn check_node(&self, index: usize, node: usize) -> Result<(), ConsistencyError> {
        if node >= self.open.len() {
            return Err(malformed(index, format!("node {node} outside 0..{}", self.open.len())));
        }
        Ok(())
    }

    fn grad(&mut self, index: usize, node: usize, round: u64, h: u64) -> Result<(), ConsistencyError> {
        let (open, last) = self.open[node];
        if round != open || h != last + 1 {
            return Err(malformed(
                index,
                format!("node {node} step ({round}, {h}) does not follow ({open}, {last})"),
            ));
        }
        self.open[node].1 = h;
        Ok(())
    }

    fn round_end(&mut self, index: usize, node: usize, round: u64) -> Result<(), ConsistencyError> {
        let (open, _) = self.open[node];
        if round != open {
            return Err(malformed(
                index,
                format!("node {node} closed round {round} while round {open} is open"),
            ));
        }
        self.open[node] = (open + 1, 0);
        Ok(())
    }
}

/// Checks that every local step of node `c` in round `i` happened while
/// `i - (rounds received from e) <= d` held for every neighbor `e`. Received
/// rounds are counted from `apply` records, as the node itself counts them.
/// `d = None` is the unbounded case.
pub fn verify_round_delay(trace: &Trace, d: Option<u64>) -> Result<RoundDelayReport, ConsistencyError> {
    let topo = trace.topology();
    let n = topo.node_count();
    let mut progress = Progress::new(n);
    let mut received = vec![vec![0u64; n]; n];
    let mut report = RoundDelayReport::default();
    for (index, r) in trace.records().iter().enumerate() {
        progress.check_node(index, r.node)?;
        match r.kind {
            TraceKind::GradComputed { round, h } => {
                progress.grad(index, r.node, round, h)?;
                report.checked += 1;
                let Some(d) = d else { continue };
                for &e in topo.neighbors(r.node).expect("checked node") {
                    let lag = round.saturating_sub(received[r.node][e]);
                    if lag > d {
                        report.violations.push(RoundViolation {
                            time: r.time,
                            node: r.node,
                            round,
                            h,
                            neighbor: e,
                            lag,
                        });
                    }
                }
            }
            TraceKind::UpdateApplied { sender, .. } => {
                if !topo.neighbors(r.node).expect("checked node").contains(&sender) {
                    return Err(malformed(
                        index,
                        format!("node {} applied an update from non-neighbor {sender}", r.node),
                    ));
                }
                received[r.node][sender] += 1;
            }
            TraceKind::RoundEnd { round } => progress.round_end(index, r.node, round)?,
            TraceKind::WaitEnter { .. } | TraceKind::WaitExit { .. } => {}
            TraceKind::Broadcast { .. } => {
                return Err(malformed(index, "broadcast records belong to threshold runs".into()));
            }
        }
    }
    Ok(report)
}

/// Staleness allowed at global iteration `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DelayBound {
    /// `sqrt(t / ln t)`
    Tau,
    Constant(f64),
    /// Everything from rounds older than `i - d` must be in, where `i` is the
    /// round containing `t`.
    Rounds(u64),
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationViolation {
    pub time: f64,
    pub node: usize,
    pub round: u64,
    pub h: u64,
    /// Global index of the offending computation.
    pub t: u64,
    pub neighbor: usize,
    /// Earliest neighbor round that was required but not yet applied.
    pub missing_round: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationDelayReport {
    pub checked: usize,
    pub violations: Vec<IterationViolation>,
    /// Steps for which some non-neighbor had computations inside the
    /// window. Those reach the node only through intermediaries, so they
    /// are reported but not checked.
    pub indirect: usize,
}

impl IterationDelayReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Maps every step to its global index `t` and checks that all neighbor
/// computations with index `<= t - bound(t)` had been applied at the
/// computing node beforehand. Own computations are applied in order and
/// need no check.
pub fn verify_iteration_delay(
    trace: &Trace,
    rho: &RhoMap,
    bound: DelayBound,
) -> Result<IterationDelayReport, ConsistencyError> {
    let topo = trace.topology();
    let n = topo.node_count();
    if rho.assignment().node_count() != n {
        return Err(malformed(
            0,
            format!("assignment covers {} nodes, trace {n}", rho.assignment().node_count()),
        ));
    }
    let firsts: Vec<Vec<(u64, u64)>> = (0..n).map(|c| rho.first_steps(c)).collect();
    let mut progress = Progress::new(n);
    // received[c][e]: which rounds of e have been applied at c, plus the
    // length of the contiguous prefix.
    let mut received: Vec<Vec<(Vec<bool>, u64)>> =
        vec![vec![(vec![false; rho.assignment().rounds() as usize], 0); n]; n];
    let mut report = IterationDelayReport::default();

    for (index, r) in trace.records().iter().enumerate() {
        progress.check_node(index, r.node)?;
        match r.kind {
            TraceKind::GradComputed { round, h } => {
                progress.grad(index, r.node, round, h)?;
                let t = rho.rho(r.node, round, h).map_err(|e| malformed(index, e.to_string()))?;
                report.checked += 1;
                // Computations with index <= window are required; None means
                // nothing is.
                let window: Option<u64> = match bound {
                    DelayBound::Unbounded => None,
                    DelayBound::Tau => {
                        let w = (t as f64 - tau(t)).floor();
                        (w >= 0.0).then_some(w as u64)
                    }
                    DelayBound::Constant(x) => {
                        let w = (t as f64 - x).floor();
                        (w >= 0.0).then_some(w as u64)
                    }
                    DelayBound::Rounds(d) => round
                        .checked_sub(d)
                        .map(|keep| rho.assignment().round_start(keep))
                        .and_then(|start| start.checked_sub(1)),
                };
                let Some(window) = window else { continue };
                let neighbors = topo.neighbors(r.node).expect("checked node");
                let mut indirect = false;
                for (e, first) in firsts.iter().enumerate() {
                    if e == r.node {
                        continue;
                    }
                    // Rounds of e with a computation inside the window form
                    // a prefix of e's working rounds.
                    let needed = first.partition_point(|&(_, idx)| idx <= window);
                    if needed == 0 {
                        continue;
                    }
                    if !neighbors.contains(&e) {
                        indirect = true;
                        continue;
                    }
                    let (applied, _) = &received[r.node][e];
                    if let Some(&(missing, _)) = first[..needed].iter().find(|&&(i, _)| !applied[i as usize]) {
                        report.violations.push(IterationViolation {
                            time: r.time,
                            node: r.node,
                            round,
                            h,
                            t,
                            neighbor: e,
                            missing_round: missing,
                        });
                    }
                }
                if indirect {
                    report.indirect += 1;
                }
            }
            TraceKind::UpdateApplied { sender, round } => {
                if sender >= n || round >= rho.assignment().rounds() {
                    return Err(malformed(index, format!("apply of round {round} from {sender}")));
                }
                let (applied, prefix) = &mut received[r.node][sender];
                applied[round as usize] = true;
                while (*prefix as usize) < applied.len() && applied[*prefix as usize] {
                    *prefix += 1;
                }
            }
            TraceKind::RoundEnd { round } => {
                let (open, last) = progress.open[r.node];
                if open >= rho.assignment().rounds() {
                    return Err(malformed(index, format!("node {} closed unknown round {round}", r.node)));
                }
                let quota = rho.assignment().count(open, r.node);
                if round == open && last != quota {
                    return Err(malformed(
                        index,
                        format!("node {} closed round {round} after {last} of {quota} steps", r.node),
                    ));
                }
                progress.round_end(index, r.node, round)?;
            }
            TraceKind::WaitEnter { .. } | TraceKind::WaitExit { .. } => {}
            TraceKind::Broadcast { .. } => {
                return Err(malformed(index, "broadcast records belong to threshold runs".into()));
            }
        }
    }
    Ok(report)
}
