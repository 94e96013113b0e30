//! Compute-node state machine: slot assignment, local SGD rounds,
//! gradient-sum broadcasts, remote update application and the delay
//! checkpoint.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::objectives::{sample_index, Dataset, Objective, ObjectiveError};
use crate::schedules::{SampleSchedule, ScheduleError, StepSchedule};
use crate::seeding::{self, tag};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
    #[error("node {node} received a message from non-neighbor {sender}")]
    NotNeighbor { node: usize, sender: usize },
    #[error("node {node} received round {round} but only {rounds} rounds exist")]
    UnknownRound { node: usize, round: u64, rounds: u64 },
    #[error("payload has {actual} entries, model has {expected}")]
    PayloadDimension { expected: usize, actual: usize },
    #[error("node {node} stepped while the delay checkpoint says wait (lag {lag})")]
    StepWhileWaiting { node: usize, lag: u64 },
    #[error("node {node} stepped past its quota of {quota} in round {round}")]
    RoundExhausted { node: usize, round: u64, quota: u64 },
    #[error("node {node} ended round {round} after {h} of {quota} steps")]
    PrematureRoundEnd { node: usize, round: u64, h: u64, quota: u64 },
    #[error("node {node} has already finished all {rounds} rounds")]
    Finished { node: usize, rounds: u64 },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Slot ownership `a(i, t)` for every round, with per-node counts
/// `s_{i,c}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    n: usize,
    slots: Vec<Vec<u32>>,
    counts: Vec<Vec<u64>>,
    prefix: Vec<u64>,
}

fn check_probabilities(n: usize, p: &[f64]) -> Result<(), ProtocolError> {
    if p.len() != n {
        return Err(ProtocolError::InvalidProbabilities(format!(
            "{} entries for {n} nodes",
            p.len()
        )));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(ProtocolError::InvalidProbabilities(
            "entries must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(ProtocolError::InvalidProbabilities(format!("sums to {sum}, not 1")));
    }
    Ok(())
}

pub fn uniform_probabilities(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

impl Assignment {
    /// Assigns each of the `sched` slots of rounds `0..rounds` to node `c`
    /// with probability `p[c]`.
    pub fn setup(
        n: usize,
        sched: &SampleSchedule,
        p: &[f64],
        seed: u64,
        rounds: u64,
    ) -> Result<Self, ProtocolError> {
        Assignment::from_sizes(n, &sched.sizes(rounds)?, p, seed)
    }

    /// Same as [`Assignment::setup`] with explicit round sizes.
    pub fn from_sizes(n: usize, sizes: &[u64], p: &[f64], seed: u64) -> Result<Self, ProtocolError> {
        if n == 0 {
            return Err(ProtocolError::InvalidAssignment("no nodes".into()));
        }
        check_probabilities(n, p)?;
        let dist = WeightedIndex::new(p)
            .map_err(|e| ProtocolError::InvalidProbabilities(e.to_string()))?;
        let mut rng = seeding::stream(seed, tag::ASSIGN, 0);
        let slots = sizes
            .iter()
            .map(|&s| {
                (0..s)
                    .map(|_| if n == 1 { 0 } else { dist.sample(&mut rng) as u32 })
                    .collect()
            })
            .collect();
        Assignment::from_slots(n, slots)
    }

    /// Builds an assignment from explicit slot owners, one list per round.
    pub fn from_slots(n: usize, slots: Vec<Vec<u32>>) -> Result<Self, ProtocolError> {
        let mut counts = Vec::with_capacity(slots.len());
        let mut prefix = Vec::with_capacity(slots.len() + 1);
        prefix.push(0u64);
        for round in &slots {
            let mut c = vec![0u64; n];
            for &owner in round {
                let owner = owner as usize;
                if owner >= n {
                    return Err(ProtocolError::InvalidAssignment(format!(
                        "slot owner {owner} outside 0..{n}"
                    )));
                }
                c[owner] += 1;
            }
            counts.push(c);
            prefix.push(prefix.last().unwrap() + round.len() as u64);
        }
        Ok(Assignment {
            n,
            slots,
            counts,
            prefix,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn rounds(&self) -> u64 {
        self.slots.len() as u64
    }

    /// Global size `s_i` of round `i`.
    pub fn round_size(&self, i: u64) -> u64 {
        self.slots[i as usize].len() as u64
    }

    /// Owner `a(i, t)` of slot `t` in round `i`.
    pub fn owner(&self, i: u64, t: u64) -> usize {
        self.slots[i as usize][t as usize] as usize
    }

    pub fn slots(&self, i: u64) -> &[u32] {
        &self.slots[i as usize]
    }

    /// `s_{i,c}`
    pub fn count(&self, i: u64, c: usize) -> u64 {
        self.counts[i as usize][c]
    }

    /// `sum_{l<i} s_l`
    pub fn round_start(&self, i: u64) -> u64 {
        self.prefix[i as usize]
    }

    /// Total slots over all rounds.
    pub fn total(&self) -> u64 {
        *self.prefix.last().unwrap()
    }

    /// Steps node `c` performs over the whole run.
    pub fn node_total(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

/// Shared, immutable protocol parameters for one run.
#[derive(Debug, Clone)]
pub struct Plan {
    assignment: Assignment,
    round_steps: Vec<f64>,
    bound: Option<u64>,
}

impl Plan {
    /// `bound` is the asynchronous round bound `d`; `None` disables the
    /// checkpoint. The step size of round `i` is the step schedule evaluated
    /// at the global iteration count where round `i` starts.
    pub fn new(assignment: Assignment, steps: &StepSchedule, bound: Option<u64>) -> Result<Self, ProtocolError> {
        steps.validate()?;
        let round_steps = (0..assignment.rounds())
            .map(|i| steps.step_size(assignment.round_start(i)))
            .collect();
        Ok(Plan {
            assignment,
            round_steps,
            bound,
        })
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    pub fn rounds(&self) -> u64 {
        self.assignment.rounds()
    }

    /// Step size used for round `i`, locally and when applying a remote
    /// gradient sum from round `i`.
    pub fn round_step(&self, i: u64) -> f64 {
        self.round_steps[i as usize]
    }

    pub fn bound(&self) -> Option<u64> {
        self.bound
    }
}

/// Broadcast tuple: sender, payload, sender's round.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: usize,
    pub round: u64,
    pub payload: Arc<[f64]>,
}

/// A message together with every recipient.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub to: Vec<usize>,
    pub message: Message,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncDecision {
    Proceed,
    Wait { lag: u64 },
}

/// What a local step did; `h` is 1-based within the round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepInfo {
    pub round: u64,
    pub h: u64,
    pub sample: usize,
}

#[derive(Debug, Clone)]
pub struct Node {
    id: usize,
    model: Vec<f64>,
    round: u64,
    h: u64,
    acc: Vec<f64>,
    history: BTreeMap<usize, u64>,
    rng: ChaCha8Rng,
    shard: Vec<usize>,
    plan: Arc<Plan>,
    objective: Objective,
    data: Arc<Dataset>,
    grad: Vec<f64>,
    sync_enabled: bool,
    iterations: u64,
}

impl Node {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        neighbors: &[usize],
        initial: Vec<f64>,
        objective: Objective,
        data: Arc<Dataset>,
        shard: Vec<usize>,
        plan: Arc<Plan>,
        seed: u64,
    ) -> Result<Self, ProtocolError> {
        objective.validate(&initial, &data)?;
        if id >= plan.assignment.node_count() {
            return Err(ProtocolError::InvalidAssignment(format!(
                "node {id} not covered by a {}-node assignment",
                plan.assignment.node_count()
            )));
        }
        if shard.is_empty() || shard.iter().any(|&i| i >= data.len()) {
            return Err(ProtocolError::InvalidAssignment(format!(
                "node {id} has an empty or out-of-range data shard"
            )));
        }
        let dim = initial.len();
        Ok(Node {
            id,
            model: initial,
            round: 0,
            h: 0,
            acc: vec![0.0; dim],
            history: neighbors.iter().map(|&e| (e, 0)).collect(),
            rng: seeding::stream(seed, tag::SAMPLING, id as u64),
            shard,
            plan,
            objective,
            data,
            grad: vec![0.0; dim],
            sync_enabled: true,
            iterations: 0,
        })
    }

    /// Fault injection: skip the delay checkpoint entirely.
    pub fn disable_sync_check(&mut self) {
        self.sync_enabled = false;
    }

    pub fn sync_enabled(&self) -> bool {
        self.sync_enabled
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn model(&self) -> &[f64] {
        &self.model
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn h(&self) -> u64 {
        self.h
    }

    pub fn accumulator(&self) -> &[f64] {
        &self.acc
    }

    pub fn history(&self) -> &BTreeMap<usize, u64> {
        &self.history
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.plan.rounds()
    }

    /// `s_{i,c}` for the current round, zero once finished.
    pub fn quota(&self) -> u64 {
        if self.is_finished() {
            0
        } else {
            self.plan.assignment.count(self.round, self.id)
        }
    }

    pub fn round_complete(&self) -> bool {
        !self.is_finished() && self.h == self.quota()
    }

    pub fn on_receive(&mut self, msg: &Message) -> Result<(), ProtocolError> {
        let Some(seen) = self.history.get_mut(&msg.sender) else {
            return Err(ProtocolError::NotNeighbor {
                node: self.id,
                sender: msg.sender,
            });
        };
        if msg.round >= self.plan.rounds() {
            return Err(ProtocolError::UnknownRound {
                node: self.id,
                round: msg.round,
                rounds: self.plan.rounds(),
            });
        }
        if msg.payload.len() != self.model.len() {
            return Err(ProtocolError::PayloadDimension {
                expected: self.model.len(),
                actual: msg.payload.len(),
            });
        }
        let eta = self.plan.round_step(msg.round);
        for (w, u) in self.model.iter_mut().zip(msg.payload.iter()) {
            *w -= eta * u;
        }
        *seen += 1;
        Ok(())
    }

    /// `max_e (i - H_e)` over neighbors, zero without neighbors.
    pub fn lag(&self) -> u64 {
        self.history
            .values()
            .map(|&seen| self.round.saturating_sub(seen))
            .max()
            .unwrap_or(0)
    }

    pub fn check_sync(&self) -> SyncDecision {
        let lag = self.lag();
        match self.plan.bound {
            Some(d) if lag > d => SyncDecision::Wait { lag },
            _ => SyncDecision::Proceed,
        }
    }

    pub fn local_step(&mut self) -> Result<StepInfo, ProtocolError> {
        if self.is_finished() {
            return Err(ProtocolError::Finished {
                node: self.id,
                rounds: self.plan.rounds(),
            });
        }
        let quota = self.quota();
        if self.h >= quota {
            return Err(ProtocolError::RoundExhausted {
                node: self.id,
                round: self.round,
                quota,
            });
        }
        if self.sync_enabled {
            if let SyncDecision::Wait { lag } = self.check_sync() {
                return Err(ProtocolError::StepWhileWaiting { node: self.id, lag });
            }
        }
        let sample = sample_index(&mut self.rng, &self.shard);
        self.objective
            .grad_into_unchecked(&self.model, &self.data, sample, &mut self.grad);
        let eta = self.plan.round_step(self.round);
        for ((w, u), g) in self.model.iter_mut().zip(self.acc.iter_mut()).zip(&self.grad) {
            *w -= eta * g;
            *u += g;
        }
        self.h += 1;
        self.iterations += 1;
        Ok(StepInfo {
            round: self.round,
            h: self.h,
            sample,
        })
    }

    /// Emits `(c, U_i, i)` to every neighbor and opens the next round.
    pub fn end_of_round(&mut self) -> Result<Broadcast, ProtocolError> {
        if self.is_finished() {
            return Err(ProtocolError::Finished {
                node: self.id,
                rounds: self.plan.rounds(),
            });
        }
        let quota = self.quota();
        if self.h != quota {
            return Err(ProtocolError::PrematureRoundEnd {
                node: self.id,
                round: self.round,
                h: self.h,
                quota,
            });
        }
        let payload: Arc<[f64]> = Arc::from(std::mem::replace(&mut self.acc, vec![0.0; self.model.len()]));
        let message = Message {
            sender: self.id,
            round: self.round,
            payload,
        };
        self.round += 1;
        self.h = 0;
        Ok(Broadcast {
            to: self.history.keys().copied().collect(),
            message,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::synthetic_cloud;

    fn quad_data() -> Arc<Dataset> {
        Arc::new(Dataset::new(vec![3.0, 5.0, 1.0, -1.0], 2, None, 0).unwrap())
    }

    fn plan_for(n: usize, sizes: &[u64], steps: StepSchedule, bound: Option<u64>) -> Arc<Plan> {
        let a = Assignment::from_sizes(n, sizes, &uniform_probabilities(n), 1).unwrap();
        Arc::new(Plan::new(a, &steps, bound).unwrap())
    }

    fn const_step(eta: f64) -> StepSchedule {
        StepSchedule::Diminishing { eta0: eta, beta: 0.0 }
    }

    fn node(id: usize, neighbors: &[usize], plan: Arc<Plan>) -> Node {
        let data = quad_data();
        Node::new(
            id,
            neighbors,
            vec![1.0, 1.0],
            Objective::MeanQuadratic { dim: 2 },
            data,
            vec![0, 1],
            plan,
            3,
        )
        .unwrap()
    }

    #[test]
    fn setup_single_node_takes_everything() {
        let sched = SampleSchedule::Linear { a: 10.0, p: 1.0, b: 0 };
        let a = Assignment::setup(1, &sched, &[1.0], 5, 4).unwrap();
        for i in 0..4 {
            assert_eq!(a.count(i, 0), sched.sample_size(i).unwrap());
        }
        assert_eq!(a.round_start(2), 30);
    }

    #[test]
    fn setup_degenerate_distribution() {
        let a = Assignment::from_sizes(3, &[5, 9], &[1.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(a.count(1, 0), 9);
        assert_eq!(a.count(1, 1) + a.count(1, 2), 0);
    }

    #[test]
    fn setup_counts_sum_to_round_size() {
        let a = Assignment::from_sizes(4, &[13, 1, 0, 57], &uniform_probabilities(4), 8).unwrap();
        for i in 0..4 {
            let sum: u64 = (0..4).map(|c| a.count(i, c)).sum();
            assert_eq!(sum, a.round_size(i));
            for c in 0..4 {
                let direct = a.slots(i).iter().filter(|&&o| o as usize == c).count() as u64;
                assert_eq!(a.count(i, c), direct);
            }
        }
        assert_eq!(a, Assignment::from_sizes(4, &[13, 1, 0, 57], &uniform_probabilities(4), 8).unwrap());
    }

    #[test]
    fn setup_rejects_bad_probabilities() {
        for p in [vec![0.5, 0.4], vec![0.5], vec![1.5, -0.5], vec![f64::NAN, 1.0]] {
            assert!(matches!(
                Assignment::from_sizes(2, &[3], &p, 0),
                Err(ProtocolError::InvalidProbabilities(_))
            ));
        }
    }

    #[test]
    fn receive_applies_round_step() {
        let plan = plan_for(2, &[4, 4], const_step(0.5), Some(1));
        let mut n0 = node(0, &[1], plan);
        let msg = Message {
            sender: 1,
            round: 0,
            payload: Arc::from(vec![2.0, 4.0]),
        };
        n0.on_receive(&msg).unwrap();
        assert_eq!(n0.model(), &[0.0, -1.0]);
        n0.on_receive(&msg).unwrap();
        assert_eq!(n0.history()[&1], 2);
    }

    #[test]
    fn receive_zero_payload_only_counts() {
        let plan = plan_for(2, &[4], const_step(0.5), Some(1));
        let mut n0 = node(0, &[1], plan);
        let msg = Message {
            sender: 1,
            round: 0,
            payload: Arc::from(vec![0.0, 0.0]),
        };
        n0.on_receive(&msg).unwrap();
        assert_eq!(n0.model(), &[1.0, 1.0]);
        assert_eq!(n0.history()[&1], 1);
    }

    #[test]
    fn receive_protocol_errors() {
        let plan = plan_for(3, &[4], const_step(0.5), Some(1));
        let mut n0 = node(0, &[1], plan);
        let mut msg = Message {
            sender: 2,
            round: 0,
            payload: Arc::from(vec![0.0, 0.0]),
        };
        assert!(matches!(n0.on_receive(&msg), Err(ProtocolError::NotNeighbor { sender: 2, .. })));
        msg.sender = 1;
        msg.round = 1;
        assert!(matches!(n0.on_receive(&msg), Err(ProtocolError::UnknownRound { .. })));
        msg.round = 0;
        msg.payload = Arc::from(vec![0.0]);
        assert!(matches!(n0.on_receive(&msg), Err(ProtocolError::PayloadDimension { .. })));
    }

    fn at_round(round: u64, history: &[(usize, u64)], d: u64) -> Node {
        let neighbors: Vec<usize> = history.iter().map(|&(e, _)| e).collect();
        let plan = plan_for(3, &[1; 8], const_step(0.1), Some(d));
        let mut n = node(0, &neighbors, plan);
        n.round = round;
        for &(e, seen) in history {
            n.history.insert(e, seen);
        }
        n
    }

    #[test]
    fn sync_checkpoint() {
        assert_eq!(at_round(3, &[(1, 3), (2, 3)], 1).check_sync(), SyncDecision::Proceed);
        assert_eq!(at_round(3, &[(1, 1)], 1).check_sync(), SyncDecision::Wait { lag: 2 });
        assert_eq!(at_round(3, &[(1, 2)], 1).check_sync(), SyncDecision::Proceed);
        assert_eq!(at_round(5, &[], 0).check_sync(), SyncDecision::Proceed);
        let mut unbounded = at_round(7, &[(1, 0)], 0);
        unbounded.plan = plan_for(3, &[1; 8], const_step(0.1), None);
        assert_eq!(unbounded.check_sync(), SyncDecision::Proceed);
    }

    #[test]
    fn step_refused_while_waiting() {
        let mut n = at_round(3, &[(1, 1)], 1);
        n.plan = plan_for(1, &[4; 8], const_step(0.1), Some(1));
        n.history.insert(1, 1);
        assert!(matches!(n.local_step(), Err(ProtocolError::StepWhileWaiting { lag: 2, .. })));
        n.disable_sync_check();
        n.local_step().unwrap();
    }

    #[test]
    fn round_lifecycle() {
        let plan = plan_for(1, &[3, 2], const_step(0.1), Some(0));
        let data = quad_data();
        let obj = Objective::MeanQuadratic { dim: 2 };
        let mut n = node(0, &[1, 2], plan);
        let mut grads = vec![0.0; 2];
        assert!(matches!(n.end_of_round(), Err(ProtocolError::PrematureRoundEnd { .. })));
        for h in 1..=3 {
            let before = n.model().to_vec();
            let info = n.local_step().unwrap();
            assert_eq!((info.round, info.h), (0, h));
            let g = obj.grad(&before, &data, info.sample).unwrap();
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        assert!(matches!(n.local_step(), Err(ProtocolError::RoundExhausted { .. })));
        assert_eq!(n.accumulator(), grads.as_slice());
        let out = n.end_of_round().unwrap();
        assert_eq!(out.to, vec![1, 2]);
        assert_eq!(out.message.round, 0);
        assert_eq!(&*out.message.payload, grads.as_slice());
        assert_eq!((n.round(), n.h()), (1, 0));
        assert!(n.accumulator().iter().all(|&u| u == 0.0));
        // Round 1 is gated on both neighbors having delivered round 0.
        assert_eq!(n.check_sync(), SyncDecision::Wait { lag: 1 });
    }

    #[test]
    fn zero_step_still_accumulates() {
        let plan = plan_for(1, &[5], const_step(1e-300), None);
        let mut n = node(0, &[], plan);
        // Remove the step entirely.
        let mut p = (*n.plan).clone();
        p.round_steps = vec![0.0];
        n.plan = Arc::new(p);
        for _ in 0..5 {
            n.local_step().unwrap();
        }
        assert_eq!(n.model(), &[1.0, 1.0]);
        assert!(n.accumulator().iter().any(|&u| u != 0.0));
        n.end_of_round().unwrap();
        assert!(n.is_finished());
        assert!(matches!(n.local_step(), Err(ProtocolError::Finished { .. })));
    }

    #[test]
    fn single_node_converges_to_mean() {
        let data = Arc::new(synthetic_cloud(4, 200, 3, 0.02).unwrap());
        let mean = data.mean();
        let sched = SampleSchedule::Constant { s: 1000 };
        let a = Assignment::setup(1, &sched, &[1.0], 0, 400).unwrap();
        let steps = StepSchedule::Diminishing { eta0: 0.1, beta: 1.0 };
        let plan = Arc::new(Plan::new(a, &steps, Some(1)).unwrap());
        let mut n = Node::new(
            0,
            &[],
            vec![0.0; 3],
            Objective::MeanQuadratic { dim: 3 },
            data.clone(),
            (0..200).collect(),
            plan,
            11,
        )
        .unwrap();
        while !n.is_finished() {
            while n.h() < n.quota() {
                n.local_step().unwrap();
            }
            n.end_of_round().unwrap();
        }
        let err = n.model().iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "distance to mean {err}");
    }
}
