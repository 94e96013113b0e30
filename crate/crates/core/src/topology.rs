//! Undirected peer graphs.

use std::collections::{BTreeSet, VecDeque};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("edge ({u}, {v}) references a node outside 0..{n}")]
    EdgeOutOfRange { u: usize, v: usize, n: usize },
    #[error("node id {id} out of range for {n} nodes")]
    NodeOutOfRange { id: usize, n: usize },
    #[error("edge list line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Symmetric adjacency over nodes `0..n` with no self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    adjacency: Vec<Vec<usize>>,
}

impl Topology {
    pub fn from_edges(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, TopologyError> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(TopologyError::EdgeOutOfRange { u, v, n });
            }
            if u == v {
                return Err(TopologyError::SelfLoop(u));
            }
            set.insert((u.min(v), u.max(v)));
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(u, v) in &set {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Topology { n, adjacency })
    }

    /// Node `i` linked to `(i ± 1) mod n`.
    pub fn ring(n: usize) -> Self {
        let edges = (0..n).filter_map(|i| {
            let j = (i + 1) % n;
            (i != j).then_some((i, j))
        });
        Topology::from_edges(n, edges).expect("ring edges are valid")
    }

    pub fn line(n: usize) -> Self {
        Topology::from_edges(n, (1..n).map(|i| (i - 1, i))).expect("line edges are valid")
    }

    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
        Topology::from_edges(n, edges).expect("complete edges are valid")
    }

    /// Parses one `u v` pair per line. Blank lines and `#` comments are
    /// skipped. The node count is `n` when given, else one past the largest id.
    pub fn parse_edge_list(text: &str, n: Option<usize>) -> Result<Self, TopologyError> {
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |reason: &str| TopologyError::Parse {
                line: lineno + 1,
                reason: reason.to_string(),
            };
            let mut fields = line.split_whitespace();
            let u = fields
                .next()
                .ok_or_else(|| perr("missing first id"))?
                .parse::<usize>()
                .map_err(|_| perr("first id is not a non-negative integer"))?;
            let v = fields
                .next()
                .ok_or_else(|| perr("missing second id"))?
                .parse::<usize>()
                .map_err(|_| perr("second id is not a non-negative integer"))?;
            if fields.next().is_some() {
                return Err(perr("expected exactly two ids"));
            }
            edges.push((u, v));
        }
        let n = n.unwrap_or_else(|| edges.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(0));
        Topology::from_edges(n, edges)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Sorted neighbor ids of `c`.
    pub fn neighbors(&self, c: usize) -> Result<&[usize], TopologyError> {
        self.adjacency
            .get(c)
            .map(Vec::as_slice)
            .ok_or(TopologyError::NodeOutOfRange { id: c, n: self.n })
    }

    pub fn degree(&self, c: usize) -> usize {
        self.adjacency.get(c).map_or(0, Vec::len)
    }

    /// Edges as `(u, v)` with `u < v`, in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, list)| list.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_connected(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.n
    }

    pub fn to_edge_list(&self) -> String {
        self.edges().iter().map(|(u, v)| format!("{u} {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ring_five() {
        let t = Topology::ring(5);
        assert_eq!(t.edges(), vec![(0, 1), (0, 4), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(t.neighbors(0).unwrap(), &[1, 4]);
        assert!(t.is_connected());
        assert!(matches!(t.neighbors(7), Err(TopologyError::NodeOutOfRange { id: 7, n: 5 })));
    }

    #[test]
    fn small_rings() {
        assert_eq!(Topology::ring(1).edge_count(), 0);
        assert_eq!(Topology::ring(2).edges(), vec![(0, 1)]);
        let r3 = Topology::ring(3);
        assert!((0..3).all(|c| r3.degree(c) == 2));
    }

    #[test]
    fn line_and_complete() {
        let l = Topology::line(3);
        assert_eq!(l.edges(), vec![(0, 1), (1, 2)]);
        assert_eq!(l.neighbors(1).unwrap(), &[0, 2]);
        assert_eq!(Topology::complete(4).edge_count(), 6);
        assert!(Topology::complete(2).is_connected());
    }

    #[test]
    fn malformed_edges() {
        assert_eq!(Topology::from_edges(3, [(0, 0)]), Err(TopologyError::SelfLoop(0)));
        assert!(matches!(
            Topology::from_edges(3, [(0, 3)]),
            Err(TopologyError::EdgeOutOfRange { .. })
        ));
        assert!(!Topology::from_edges(4, [(0, 1)]).unwrap().is_connected());
    }

    #[test]
    fn duplicate_edges_collapse() {
        let t = Topology::from_edges(3, [(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(t.edge_count(), 1);
    }

    #[test]
    fn edge_list_text() {
        let t = Topology::parse_edge_list("# ring\n0 1\n1 2\n\n2 0  # closing\n", None).unwrap();
        assert_eq!(t, Topology::ring(3));
        let padded = Topology::parse_edge_list("0 1\n", Some(4)).unwrap();
        assert_eq!(padded.node_count(), 4);
        assert!(matches!(
            Topology::parse_edge_list("0 1\n1 x\n", None),
            Err(TopologyError::Parse { line: 2, .. })
        ));
        assert!(Topology::parse_edge_list("0 1 2\n", None).is_err());
        assert!(Topology::parse_edge_list("1 1\n", None).is_err());
        let t = Topology::ring(6);
        assert_eq!(Topology::parse_edge_list(&t.to_edge_list(), Some(6)).unwrap(), t);
    }

    proptest! {
        #[test]
        fn neighbor_relation_is_symmetric(n in 1usize..12, raw in proptest::collection::vec((0usize..12, 0usize..12), 0..40)) {
            let edges: Vec<_> = raw.into_iter().filter(|&(u, v)| u < n && v < n && u != v).collect();
            let t = Topology::from_edges(n, edges).unwrap();
            for c in 0..n {
                let nb = t.neighbors(c).unwrap();
                prop_assert!(nb.windows(2).all(|w| w[0] < w[1]));
                for &j in nb {
                    prop_assert!(t.neighbors(j).unwrap().contains(&c));
                }
            }
        }

        #[test]
        fn rings_are_two_regular(n in 3usize..64) {
            let t = Topology::ring(n);
            prop_assert!(t.is_connected());
            prop_assert!((0..n).all(|c| t.degree(c) == 2));
        }
    }
}
