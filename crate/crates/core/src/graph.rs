//! Undirected communication topology with one-hop neighbour lists.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    adjacency: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("topology has no nodes")]
    Empty,
    #[error("node {node} lists out-of-range neighbour {neighbor}")]
    OutOfRange { node: usize, neighbor: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) has no reverse edge")]
    Asymmetric(usize, usize),
    #[error("node {node} lists neighbour {neighbor} twice")]
    Duplicate { node: usize, neighbor: usize },
    #[error("graph is disconnected: node {0} unreachable from node 0")]
    Disconnected(usize),
}

impl Topology {
    /// Builds a topology from raw adjacency lists without validating it.
    /// Lists are sorted.
    pub fn from_adjacency(mut adjacency: Vec<Vec<usize>>) -> Self {
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Topology { adjacency }
    }

    /// Undirected edges, each listed once.
    pub fn from_edges(nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); nodes];
        for &(a, b) in edges {
            if a >= nodes || b >= nodes {
                return Err(Violation::OutOfRange {
                    node: a.min(b),
                    neighbor: a.max(b),
                }
                .into());
            }
            adjacency[a].push(b);
            if a != b {
                adjacency[b].push(a);
            }
        }
        let t = Topology::from_adjacency(adjacency);
        t.validate()?;
        Ok(t)
    }

    /// A single isolated node.
    pub fn single() -> Self {
        Topology {
            adjacency: vec![Vec::new()],
        }
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.adjacency[j]
    }

    pub fn degree(&self, j: usize) -> usize {
        self.adjacency[j].len()
    }

    /// `Σ_j |N_j|`, i.e. twice the number of undirected edges.
    pub fn directed_edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    /// Undirected edges `(j, p)` with `j < p`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(j, ns)| ns.iter().filter(move |&&p| p > j).map(move |&p| (j, p)))
            .collect()
    }

    /// Relabels nodes: node `j` of the result is node `perm[j]` of `self`.
    pub fn relabel(&self, perm: &[usize]) -> Topology {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        Topology::from_adjacency(
            perm.iter()
                .map(|&old| self.adjacency[old].iter().map(|&p| inverse[p]).collect())
                .collect(),
        )
    }

    /// Checks range, self-loops, duplicates, symmetry and connectivity, and
    /// reports the first violation.
    pub fn validate(&self) -> std::result::Result<(), Violation> {
        let n = self.nodes();
        if n == 0 {
            return Err(Violation::Empty);
        }
        for (j, ns) in self.adjacency.iter().enumerate() {
            for (k, &p) in ns.iter().enumerate() {
                if p >= n {
                    return Err(Violation::OutOfRange { node: j, neighbor: p });
                }
                if p == j {
                    return Err(Violation::SelfLoop(j));
                }
                if k > 0 && ns[k - 1] == p {
                    return Err(Violation::Duplicate { node: j, neighbor: p });
                }
            }
        }
        for (j, ns) in self.adjacency.iter().enumerate() {
            for &p in ns {
                if self.adjacency[p].binary_search(&j).is_err() {
                    return Err(Violation::Asymmetric(j, p));
                }
            }
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(j) = queue.pop_front() {
            for &p in &self.adjacency[j] {
                if !seen[p] {
                    seen[p] = true;
                    queue.push_back(p);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(j) => Err(Violation::Disconnected(j)),
            None => Ok(()),
        }
    }
}

/// Ring of `nodes` nodes, each joined to the `degree/2` nearest nodes on
/// either side.
pub fn ring_lattice(nodes: usize, degree: usize) -> Result<Topology> {
    if degree == 0 || degree % 2 == 1 || degree >= nodes {
        return Err(Error::invalid(format!(
            "ring lattice needs an even degree in (0, {nodes}), got {degree}"
        )));
    }
    let half = degree / 2;
    let adjacency = (0..nodes)
        .map(|j| {
            let mut ns: Vec<usize> = (1..=half)
                .flat_map(|o| [(j + o) % nodes, (j + nodes - o) % nodes])
                .collect();
            ns.sort_unstable();
            ns.dedup();
            ns
        })
        .collect();
    let t = Topology { adjacency };
    t.validate()?;
    Ok(t)
}

/// Parses an edge list: one `j p` pair per line, 0-indexed, each undirected
/// edge listed once. Blank lines and `#` comments are skipped. The node count
/// is one more than the largest id unless given.
pub fn parse_edge_list(text: &str, nodes: Option<usize>) -> Result<Topology> {
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let ids: Vec<&str> = line.split_whitespace().collect();
        let parsed: Option<Vec<usize>> = ids.iter().map(|t| t.parse().ok()).collect();
        match parsed.as_deref() {
            Some(&[a, b]) => edges.push((a, b)),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected `j p`, found `{line}`"),
                })
            }
        }
    }
    let inferred = edges.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(1);
    Topology::from_edges(nodes.unwrap_or(inferred), &edges)
}

pub fn load_edge_list(path: impl AsRef<Path>, nodes: Option<usize>) -> Result<Topology> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edge_list(&text, nodes)
}
