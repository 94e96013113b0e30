//! Ordered event records of a simulated run and their line format.
//!
//! ```text
//! # aetsgd-trace v1
//! # nodes 3
//! # edges 0-1 0-2 1-2
//! time,node,event,round,h,detail
//! 0.734,0,grad,0,1,
//! 1.92,1,apply,0,0,from=0
//! ```
//!
//! Events: `grad` (a local gradient step; `h` is 1-based), `apply` (a
//! neighbor's round-`round` gradient sum was applied; `detail` is
//! `from=<sender>`), `round_end`, `wait_enter`, `wait_exit` and
//! `broadcast` (threshold baseline). Times are virtual milliseconds
//! written in shortest round-trip form.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::topology::{Topology, TopologyError};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("trace is missing the `{0}` header")]
    MissingHeader(&'static str),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    GradComputed { round: u64, h: u64 },
    UpdateApplied { sender: usize, round: u64 },
    RoundEnd { round: u64 },
    WaitEnter { round: u64, h: u64 },
    WaitExit { round: u64, h: u64 },
    Broadcast { index: u64, t: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub time: f64,
    pub node: usize,
    pub kind: TraceKind,
}

/// Records in processing order plus the topology they ran on.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    topology: Topology,
    records: Vec<TraceRecord>,
}

pub const TRACE_COLUMNS: &str = "time,node,event,round,h,detail";
const MAGIC: &str = "# aetsgd-trace v1";

impl Trace {
    pub fn new(topology: Topology) -> Self {
        Trace {
            topology,
            records: Vec::new(),
        }
    }

    pub fn from_records(topology: Topology, records: Vec<TraceRecord>) -> Self {
        Trace { topology, records }
    }

    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut buf = String::with_capacity(64 * self.records.len() + 128);
        writeln!(buf, "{MAGIC}").unwrap();
        writeln!(buf, "# nodes {}", self.topology.node_count()).unwrap();
        buf.push_str("# edges");
        for (u, v) in self.topology.edges() {
            write!(buf, " {u}-{v}").unwrap();
        }
        buf.push('\n');
        writeln!(buf, "{TRACE_COLUMNS}").unwrap();
        for r in &self.records {
            let (event, round, h, detail) = match r.kind {
                TraceKind::GradComputed { round, h } => ("grad", round, h, String::new()),
                TraceKind::UpdateApplied { sender, round } => {
                    ("apply", round, 0, format!("from={sender}"))
                }
                TraceKind::RoundEnd { round } => ("round_end", round, 0, String::new()),
                TraceKind::WaitEnter { round, h } => ("wait_enter", round, h, String::new()),
                TraceKind::WaitExit { round, h } => ("wait_exit", round, h, String::new()),
                TraceKind::Broadcast { index, t } => ("broadcast", index, t, String::new()),
            };
            writeln!(buf, "{},{},{event},{round},{h},{detail}", r.time, r.node).unwrap();
        }
        out.write_all(buf.as_bytes())
    }

    pub fn to_text(&self) -> String {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to memory");
        String::from_utf8(v).expect("trace text is ascii")
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Trace, TraceError> {
        let mut nodes = None;
        let mut edges = None;
        let mut saw_magic = false;
        let mut saw_columns = false;
        let mut records = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = lineno + 1;
            let bad = |reason: String| TraceError::Malformed { line: lineno, reason };
            let line = line.trim_end();
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if line == MAGIC {
                    saw_magic = true;
                } else if let Some(n) = rest.strip_prefix("nodes") {
                    nodes = Some(n.trim().parse::<usize>().map_err(|_| bad("bad node count".into()))?);
                } else if let Some(list) = rest.strip_prefix("edges") {
                    let mut parsed = Vec::new();
                    for pair in list.split_whitespace() {
                        let (u, v) = pair
                            .split_once('-')
                            .ok_or_else(|| bad(format!("bad edge `{pair}`")))?;
                        let u = u.parse().map_err(|_| bad(format!("bad edge `{pair}`")))?;
                        let v = v.parse().map_err(|_| bad(format!("bad edge `{pair}`")))?;
                        parsed.push((u, v));
                    }
                    edges = Some(parsed);
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if !saw_columns {
                if line != TRACE_COLUMNS {
                    return Err(bad(format!("expected column header `{TRACE_COLUMNS}`")));
                }
                saw_columns = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(bad(format!("expected 6 fields, found {}", fields.len())));
            }
            let time: f64 = fields[0].parse().map_err(|_| bad("bad time".into()))?;
            let node: usize = fields[1].parse().map_err(|_| bad("bad node".into()))?;
            let round: u64 = fields[3].parse().map_err(|_| bad("bad round".into()))?;
            let h: u64 = fields[4].parse().map_err(|_| bad("bad h".into()))?;
            let kind = match fields[2] {
                "grad" => TraceKind::GradComputed { round, h },
                "apply" => {
                    let sender = fields[5]
                        .strip_prefix("from=")
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("apply needs detail `from=<id>`".into()))?;
                    TraceKind::UpdateApplied { sender, round }
                }
                "round_end" => TraceKind::RoundEnd { round },
                "wait_enter" => TraceKind::WaitEnter { round, h },
                "wait_exit" => TraceKind::WaitExit { round, h },
                "broadcast" => TraceKind::Broadcast { index: round, t: h },
                other => return Err(bad(format!("unknown event `{other}`"))),
            };
            records.push(TraceRecord { time, node, kind });
        }
        if !saw_magic {
            return Err(TraceError::MissingHeader("aetsgd-trace v1"));
        }
        let n = nodes.ok_or(TraceError::MissingHeader("nodes"))?;
        let edges = edges.ok_or(TraceError::MissingHeader("edges"))?;
        if !saw_columns {
            return Err(TraceError::MissingHeader(TRACE_COLUMNS));
        }
        let topology = Topology::from_edges(n, edges)?;
        Ok(Trace { topology, records })
    }
}
