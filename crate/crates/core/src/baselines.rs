//! Comparators: norm-threshold event-triggered SGD, constant-size local
//! SGD and single-node serial SGD.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::node::{Broadcast, Message, ProtocolError};
use crate::objectives::{sample_index, Dataset, Objective, ObjectiveError};
use crate::schedules::{SampleSchedule, ScheduleError, StepSchedule};
use crate::seeding::{self, tag};
use crate::simnet::{Agent, Poll};

/// Default trigger coefficient: threshold `alpha(t) * 0.2 * N_p`.
pub const DEFAULT_THRESHOLD_COEFF: f64 = 0.2;

/// Gossip node that mixes toward its neighbors' last broadcast models and
/// broadcasts its own model when it has drifted (in l1) more than
/// `alpha(t) * coeff * N_p` from what it last sent.
#[derive(Debug, Clone)]
pub struct ThresholdNode {
    id: usize,
    model: Vec<f64>,
    last_sent: Vec<f64>,
    peers: BTreeMap<usize, Vec<f64>>,
    t: u64,
    budget: u64,
    alpha: StepSchedule,
    beta: StepSchedule,
    coeff: f64,
    objective: Objective,
    data: Arc<Dataset>,
    shard: Vec<usize>,
    rng: ChaCha8Rng,
    grad: Vec<f64>,
    pending: bool,
    broadcasts: u64,
}

impl ThresholdNode {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        neighbors: &[usize],
        initial: Vec<f64>,
        objective: Objective,
        data: Arc<Dataset>,
        shard: Vec<usize>,
        budget: u64,
        eta0: f64,
        coeff: f64,
        seed: u64,
    ) -> Result<Self, ProtocolError> {
        objective.validate(&initial, &data)?;
        if !(coeff > 0.0 && coeff <= 1.0) {
            return Err(ProtocolError::InvalidAssignment(format!(
                "threshold coefficient must lie in (0, 1] (got {coeff})"
            )));
        }
        if shard.is_empty() || shard.iter().any(|&i| i >= data.len()) {
            return Err(ProtocolError::InvalidAssignment(format!(
                "node {id} has an empty or out-of-range data shard"
            )));
        }
        let alpha = StepSchedule::baseline_alpha(eta0);
        let beta = StepSchedule::baseline_beta(eta0);
        alpha.validate()?;
        let dim = initial.len();
        Ok(ThresholdNode {
            id,
            last_sent: initial.clone(),
            peers: neighbors.iter().map(|&j| (j, initial.clone())).collect(),
            model: initial,
            t: 0,
            budget,
            alpha,
            beta,
            coeff,
            objective,
            data,
            shard,
            rng: seeding::stream(seed, tag::SAMPLING, id as u64),
            grad: vec![0.0; dim],
            pending: false,
            broadcasts: 0,
        })
    }

    pub fn model(&self) -> &[f64] {
        &self.model
    }

    pub fn broadcasts(&self) -> u64 {
        self.broadcasts
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    /// `v0 = coeff * N_p`
    pub fn v0(&self) -> f64 {
        self.coeff * self.model.len() as f64
    }

    /// `w <- w - alpha(t) grad + beta(t) sum_j (w_j - w)`
    pub fn threshold_step(&mut self) {
        let sample = sample_index(&mut self.rng, &self.shard);
        self.objective
            .grad_into_unchecked(&self.model, &self.data, sample, &mut self.grad);
        self.apply_step();
    }

    fn apply_step(&mut self) {
        let a = self.alpha.step_size(self.t);
        let b = self.beta.step_size(self.t);
        for k in 0..self.model.len() {
            let w = self.model[k];
            let pull: f64 = self.peers.values().map(|p| p[k] - w).sum();
            self.model[k] = w - a * self.grad[k] + b * pull;
        }
        self.t += 1;
    }

    pub fn drift(&self) -> f64 {
        self.model
            .iter()
            .zip(&self.last_sent)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn should_broadcast(&self) -> bool {
        self.drift() > self.alpha.step_size(self.t) * self.v0()
    }

    /// Sends the full model to every neighbor and resets the reference.
    pub fn broadcast(&mut self) -> Broadcast {
        self.last_sent.copy_from_slice(&self.model);
        let message = Message {
            sender: self.id,
            round: self.broadcasts,
            payload: Arc::from(self.model.clone()),
        };
        self.broadcasts += 1;
        Broadcast {
            to: self.peers.keys().copied().collect(),
            message,
        }
    }

    pub fn on_receive(&mut self, msg: &Message) -> Result<(), ProtocolError> {
        let len = self.model.len();
        let Some(peer) = self.peers.get_mut(&msg.sender) else {
            return Err(ProtocolError::NotNeighbor {
                node: self.id,
                sender: msg.sender,
            });
        };
        if msg.payload.len() != len {
            return Err(ProtocolError::PayloadDimension {
                expected: len,
                actual: msg.payload.len(),
            });
        }
        peer.copy_from_slice(&msg.payload);
        Ok(())
    }
}

impl Agent for ThresholdNode {
    fn poll(&mut self, outbox: &mut Vec<Broadcast>) -> Result<Poll, ProtocolError> {
        if self.pending {
            self.pending = false;
            let t = self.t;
            let b = self.broadcast();
            let index = b.message.round;
            outbox.push(b);
            return Ok(Poll::Broadcast { index, t });
        }
        if self.t >= self.budget {
            return Ok(Poll::Done);
        }
        self.threshold_step();
        self.pending = self.should_broadcast();
        Ok(Poll::Step {
            round: self.broadcasts,
            h: self.t,
        })
    }

    fn receive(&mut self, msg: &Message) -> Result<(), ProtocolError> {
        self.on_receive(msg)
    }

    fn model(&self) -> &[f64] {
        &self.model
    }

    fn iterations(&self) -> u64 {
        self.t
    }

    fn progress(&self) -> (u64, u64) {
        (self.broadcasts, self.t)
    }
}

/// Constant-size local SGD is the AET node driven by a constant schedule.
pub fn constant_local_schedule(s: u64) -> Result<SampleSchedule, ScheduleError> {
    let sched = SampleSchedule::Constant { s };
    sched.validate()?;
    Ok(sched)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerialRun {
    pub model: Vec<f64>,
    /// `(iterations done, training loss)` at every round boundary and at
    /// the end.
    pub curve: Vec<(u64, f64)>,
}

/// Single-node SGD for exactly `k` iterations. The step size is held
/// constant within each round of `rounds` and evaluated at the round's
/// starting iteration, which is what a one-node AET run does. Samples are
/// drawn uniformly from the whole dataset using the node-0 sampling stream.
pub fn serial_sgd(
    objective: &Objective,
    data: &Dataset,
    k: u64,
    rounds: &SampleSchedule,
    steps: &StepSchedule,
    seed: u64,
) -> Result<SerialRun, SerialError> {
    rounds.validate()?;
    let sizes = rounds.sizes(rounds.required_rounds(k)?)?;
    serial_sgd_sizes(objective, data, k, &sizes, steps, seed)
}

/// [`serial_sgd`] with explicit round sizes. Rounds past the end of
/// `sizes` reuse its last entry.
pub fn serial_sgd_sizes(
    objective: &Objective,
    data: &Dataset,
    k: u64,
    sizes: &[u64],
    steps: &StepSchedule,
    seed: u64,
) -> Result<SerialRun, SerialError> {
    steps.validate()?;
    if k > 0 && (sizes.is_empty() || sizes.contains(&0)) {
        return Err(ScheduleError::InvalidSample("round sizes must be positive".into()).into());
    }
    let mut model = vec![0.0; objective.model_dim()];
    objective.validate(&model, data)?;
    let mut rng = seeding::stream(seed, tag::SAMPLING, 0);
    let all: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; model.len()];
    let mut curve = vec![(0, objective.loss(&model, data)?)];
    let mut done = 0u64;
    let mut round = 0usize;
    while done < k {
        let eta = steps.step_size(done);
        let size = sizes[round.min(sizes.len() - 1)].min(k - done);
        for _ in 0..size {
            let idx = sample_index(&mut rng, &all);
            objective.grad_into_unchecked(&model, data, idx, &mut grad);
            model.iter_mut().zip(&grad).for_each(|(w, g)| *w -= eta * g);
        }
        done += size;
        round += 1;
        curve.push((done, objective.loss(&model, data)?));
    }
    Ok(SerialRun { model, curve })
}

#[derive(Debug, thiserror::Error)]
pub enum SerialError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}
