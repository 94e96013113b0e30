//! Asynchronous event-triggered SGD over peer-to-peer topologies, driven by
//! a deterministic discrete-event simulator.
//!
//! Each compute node runs rounds of local SGD whose lengths grow with the
//! round index, broadcasts the sum of its round's gradients to its
//! neighbors, and applies neighbors' sums as they arrive. A node may run at
//! most `d` rounds ahead of its slowest neighbor.

pub mod baselines;
pub mod consistency;
pub mod harness;
pub mod node;
pub mod objectives;
pub mod schedules;
pub mod seeding;
pub mod simnet;
pub mod topology;
pub mod trace;

pub use node::{Assignment, Message, Node, Plan, ProtocolError, SyncDecision};
pub use objectives::{Dataset, Objective, ObjectiveError};
pub use schedules::{tau, SampleSchedule, ScheduleError, StepSchedule};
pub use simnet::{DelayModel, Engine, Latency, SimError};
pub use topology::{Topology, TopologyError};
pub use trace::{Trace, TraceKind, TraceRecord};
