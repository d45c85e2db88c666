//! Undirected communication graphs.
//!
//! Nodes are 0-based internally; edge lists read from files or passed to
//! [`Graph::from_edge_list`] are 1-based. Every node carries a self-loop, so
//! `i ∈ N_i` always holds. The proper degree `d_i` counts neighbours other
//! than `i` itself.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("a graph needs at least one node")]
    Empty,
    #[error("node index {index} is outside 1..={n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("edge probability {0} is not in [0, 1]")]
    InvalidProbability(f64),
    #[error("graph is not connected")]
    Disconnected,
    #[error("malformed graph file at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    // sorted, includes the node itself
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from 1-based pairs. Self-pairs and duplicates are
    /// absorbed.
    pub fn from_edge_list(n: usize, pairs: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut sets: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
        for &(a, b) in pairs {
            for index in [a, b] {
                if index == 0 || index > n {
                    return Err(GraphError::IndexOutOfRange { index, n });
                }
            }
            sets[a - 1].insert(b - 1);
            sets[b - 1].insert(a - 1);
        }
        Ok(Self { neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect() })
    }

    pub fn complete(n: usize) -> Self {
        assert!(n > 0);
        Self { neighbors: (0..n).map(|_| (0..n).collect()).collect() }
    }

    pub fn path(n: usize) -> Self {
        let pairs: Vec<_> = (1..n).map(|i| (i, i + 1)).collect();
        Self::from_edge_list(n, &pairs).expect("valid path")
    }

    pub fn cycle(n: usize) -> Self {
        let mut pairs: Vec<_> = (1..n).map(|i| (i, i + 1)).collect();
        if n > 2 {
            pairs.push((n, 1));
        }
        Self::from_edge_list(n, &pairs).expect("valid cycle")
    }

    /// Erdős–Rényi graph: every pair `i < j`, visited in lexicographic order,
    /// is kept when its uniform draw falls below `p`.
    pub fn er_random(n: usize, p: f64, seed: u64) -> Result<Self, GraphError> {
        if !(0.0..=1.0).contains(&p) || p.is_nan() {
            return Err(GraphError::InvalidProbability(p));
        }
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for i in 1..=n {
            for j in (i + 1)..=n {
                let draw: f64 = rng.gen();
                if draw < p {
                    pairs.push((i, j));
                }
            }
        }
        Self::from_edge_list(n, &pairs)
    }

    /// Appends `new_count` nodes and the given 1-based attachment pairs, which
    /// may reference old or new nodes. Connectivity is left to the caller.
    pub fn add_agents(&self, new_count: usize, attach_pairs: &[(usize, usize)]) -> Result<Self, GraphError> {
        let n = self.len() + new_count;
        let mut pairs = self.edge_pairs();
        pairs.extend_from_slice(attach_pairs);
        Self::from_edge_list(n, &pairs)
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// `N_i`, including `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// `N_i` without `i`.
    pub fn proper_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors[i].iter().copied().filter(move |&j| j != i)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len() - 1
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Non-self edges as 1-based pairs `(i, j)` with `i < j`.
    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            out.extend(list.iter().filter(|&&j| j > i).map(|&j| (i + 1, j + 1)));
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(|l| l.len() - 1).sum::<usize>() / 2
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == self.len()
    }

    pub fn require_connected(&self) -> Result<(), GraphError> {
        if self.is_connected() {
            Ok(())
        } else {
            Err(GraphError::Disconnected)
        }
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pairs: Vec<_> = self.edge_pairs().into_iter().map(|(a, b)| (perm[a - 1] + 1, perm[b - 1] + 1)).collect();
        Self::from_edge_list(self.len(), &pairs).expect("permutation keeps indices in range")
    }

    /// Text format: first line `n`, then one `i j` pair per line (1-based).
    /// Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (line, header) = lines.next().ok_or(GraphError::Parse { line: 1, reason: "missing node count".into() })?;
        let n: usize = header
            .parse()
            .map_err(|_| GraphError::Parse { line, reason: format!("expected node count, got {header:?}") })?;
        let mut pairs = Vec::new();
        for (line, content) in lines {
            let fields: Vec<&str> = content.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(GraphError::Parse { line, reason: "expected two indices".into() });
            }
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| GraphError::Parse { line, reason: format!("bad index {s:?}") })
            };
            pairs.push((parse(fields[0])?, parse(fields[1])?));
        }
        Self::from_edge_list(n, &pairs)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.len());
        for (i, j) in self.edge_pairs() {
            writeln!(out, "{i} {j}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_neighbor_sets_include_self() {
        let g = Graph::from_edge_list(3, &[(1, 2), (2, 3)]).unwrap();
        assert_eq!(g.neighbors(1), &[0, 1, 2]);
        assert_eq!(g.degree(1), 2);
        assert_eq!(g.proper_neighbors(0).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn single_node() {
        let g = Graph::from_edge_list(1, &[]).unwrap();
        assert_eq!(g.neighbors(0), &[0]);
        assert!(g.is_connected());
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = Graph::from_edge_list(4, &[(1, 2), (2, 1)]).unwrap();
        assert_eq!(g.edge_count(), 1);
        let total_with_loops: usize = (0..4).map(|i| g.neighbors(i).len()).sum::<usize>();
        // 4 self-loops + 1 edge counted from both ends
        assert_eq!(total_with_loops, 4 + 2);
    }

    #[test]
    fn constructor_errors() {
        assert_eq!(Graph::from_edge_list(0, &[]), Err(GraphError::Empty));
        assert_eq!(Graph::from_edge_list(3, &[(1, 4)]), Err(GraphError::IndexOutOfRange { index: 4, n: 3 }));
        assert_eq!(Graph::from_edge_list(3, &[(0, 1)]), Err(GraphError::IndexOutOfRange { index: 0, n: 3 }));
        assert!(matches!(Graph::er_random(5, 1.5, 0), Err(GraphError::InvalidProbability(_))));
        assert!(matches!(Graph::er_random(5, -0.1, 0), Err(GraphError::InvalidProbability(_))));
    }

    #[test]
    fn connectivity() {
        assert!(Graph::path(3).is_connected());
        assert!(!Graph::from_edge_list(2, &[]).unwrap().is_connected());
        assert!(Graph::er_random(10, 1.0, 3).unwrap().is_connected());
    }

    #[test]
    fn er_extremes_and_determinism() {
        assert_eq!(Graph::er_random(10, 1.0, 42).unwrap().edge_count(), 45);
        let empty = Graph::er_random(10, 0.0, 42).unwrap();
        assert_eq!(empty.edge_count(), 0);
        assert!(!empty.is_connected());
        assert_eq!(Graph::er_random(10, 0.5, 7).unwrap(), Graph::er_random(10, 0.5, 7).unwrap());
    }

    #[test]
    fn adding_agents() {
        let g = Graph::cycle(6);
        let grown = g.add_agents(3, &[(7, 1), (8, 7), (8, 4), (9, 8)]).unwrap();
        assert_eq!(grown.len(), 9);
        assert!(grown.is_connected());
        assert!(grown.has_edge(8, 8));

        let isolated = g.add_agents(1, &[]).unwrap();
        assert_eq!(isolated.require_connected(), Err(GraphError::Disconnected));

        assert_eq!(g.add_agents(0, &[]).unwrap(), g);
        assert!(matches!(g.add_agents(1, &[(8, 1)]), Err(GraphError::IndexOutOfRange { .. })));
    }

    #[test]
    fn text_round_trip_and_errors() {
        let g = Graph::er_random(7, 0.5, 1).unwrap();
        assert_eq!(Graph::parse(&g.to_text()).unwrap(), g);
        let with_comments = "# header\n3\n1 2 # edge\n\n2 3\n";
        assert_eq!(Graph::parse(with_comments).unwrap(), Graph::path(3));
        assert!(matches!(Graph::parse("3\n1 2 3\n"), Err(GraphError::Parse { line: 2, .. })));
        assert!(matches!(Graph::parse("x\n"), Err(GraphError::Parse { line: 1, .. })));
        assert!(matches!(Graph::parse(""), Err(GraphError::Parse { .. })));
    }

    #[test]
    fn symmetry_and_self_loops_hold_for_random_graphs() {
        for seed in 0..20 {
            let g = Graph::er_random(9, 0.4, seed).unwrap();
            for i in 0..g.len() {
                assert!(g.has_edge(i, i));
                for &j in g.neighbors(i) {
                    assert!(g.has_edge(j, i));
                }
            }
        }
    }
}
