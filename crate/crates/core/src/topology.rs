//! Communication graphs, gossip pair sampling and the expected transition
//! matrix of the pairwise-averaging realization.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{symmetric_eigen, SquareMatrix};

/// Number of small-world draws attempted before giving up on connectivity.
pub const SMALL_WORLD_RETRY_BUDGET: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GraphKind {
    /// Wrapping rows×cols grid; every agent has degree 4.
    Torus { rows: usize, cols: usize },
    /// Non-wrapping rows×cols grid.
    Grid { rows: usize, cols: usize },
    SmallWorld { mean_degree: usize, rewire_prob: f64 },
    Custom,
}

/// Undirected, irreflexive communication graph. Neighbor lists are sorted
/// ascending; that order fixes the detector slot ↔ neighbor correspondence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRecord", into = "GraphRecord")]
pub struct Graph {
    neighbors: Vec<Vec<usize>>,
    kind: GraphKind,
}

/// Serialized form: agent count, sorted edge list and construction kind.
/// Deserialization accepts disconnected graphs (edge cuts can produce them)
/// but not agents without neighbors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub kind: GraphKind,
}

impl From<Graph> for GraphRecord {
    fn from(g: Graph) -> Self {
        GraphRecord {
            n: g.n(),
            edges: g.edges(),
            kind: g.kind,
        }
    }
}

impl TryFrom<GraphRecord> for Graph {
    type Error = Error;

    fn try_from(r: GraphRecord) -> Result<Self> {
        let graph = Graph::build(r.n, &r.edges, r.kind)?;
        if let Some(i) = (0..r.n).find(|&i| graph.degree(i) == 0) {
            return Err(Error::IsolatedAgent(i));
        }
        Ok(graph)
    }
}

impl Graph {
    /// Builds a connected graph from an undirected edge list. Duplicate edges
    /// (in either orientation) are merged.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], kind: GraphKind) -> Result<Self> {
        let graph = Self::build(n, edges, kind)?;
        if !graph.is_connected() {
            return Err(Error::Disconnected);
        }
        Ok(graph)
    }

    fn build(n: usize, edges: &[(usize, usize)], kind: GraphKind) -> Result<Self> {
        if n < 2 {
            return Err(invalid("n", "a communication graph needs at least two agents"));
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in edges {
            for id in [i, j] {
                if id >= n {
                    return Err(Error::AgentOutOfRange { id, n });
                }
            }
            if i == j {
                return Err(invalid("edges", "self-loops are not allowed"));
            }
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { neighbors, kind })
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.n() && self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Edges with `i < j`, sorted lexicographically.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            out.extend(list.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Selection probability `P_ij = 1/|N_i|` for neighbors, 0 otherwise.
    pub fn selection_probability(&self, i: usize, j: usize) -> f64 {
        if self.has_edge(i, j) {
            1.0 / self.degree(i) as f64
        } else {
            0.0
        }
    }

    pub fn selection_matrix(&self) -> SquareMatrix {
        let n = self.n();
        let mut p = SquareMatrix::zeros(n);
        for i in 0..n {
            let w = 1.0 / self.degree(i) as f64;
            for &j in &self.neighbors[i] {
                p[(i, j)] = w;
            }
        }
        p
    }

    pub fn adjacency_matrix(&self) -> SquareMatrix {
        let mut a = SquareMatrix::zeros(self.n());
        for (i, j) in self.edges() {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        a
    }

    pub fn is_connected(&self) -> bool {
        self.connected_within(|_| true)
    }

    /// Connectivity of the subgraph induced by agents accepted by `keep`.
    /// An empty or single-agent subgraph counts as connected.
    pub fn connected_within(&self, keep: impl Fn(usize) -> bool) -> bool {
        let members: Vec<usize> = (0..self.n()).filter(|&i| keep(i)).collect();
        let Some(&start) = members.first() else {
            return true;
        };
        let mut seen = vec![false; self.n()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut reached = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if !seen[v] && keep(v) {
                    seen[v] = true;
                    reached += 1;
                    queue.push_back(v);
                }
            }
        }
        reached == members.len()
    }

    /// Hop distance from the nearest source; `usize::MAX` when unreachable.
    pub fn distances_from(&self, sources: &[usize]) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.n()];
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist[s] != 0 {
                dist[s] = 0;
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Removes edge (i, j) and renormalizes the selection probabilities of
    /// both endpoints. The result may be disconnected (isolating an attacker
    /// is the intended use); an endpoint left with no neighbors is rejected.
    pub fn remove_edge(&self, i: usize, j: usize) -> Result<Self> {
        if !self.has_edge(i, j) {
            return Err(Error::MissingEdge(i, j));
        }
        for end in [i, j] {
            if self.degree(end) == 1 {
                return Err(Error::IsolatedAgent(end));
            }
        }
        let mut neighbors = self.neighbors.clone();
        neighbors[i].retain(|&v| v != j);
        neighbors[j].retain(|&v| v != i);
        Ok(Self {
            neighbors,
            kind: GraphKind::Custom,
        })
    }

    /// Like [`Graph::remove_edge`], additionally reporting when the cut leaves
    /// the trustworthy subgraph disconnected.
    pub fn remove_edge_checked(
        &self,
        i: usize,
        j: usize,
        mask: &AttackerMask,
    ) -> Result<(Self, Option<TopologyWarning>)> {
        let graph = self.remove_edge(i, j)?;
        let warning = (!mask.trustworthy_connected(&graph))
            .then_some(TopologyWarning::TrustworthySubgraphDisconnected);
        Ok((graph, warning))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyWarning {
    TrustworthySubgraphDisconnected,
}

/// Manhattan network realized as a rows×cols torus (4-regular), ids row-major.
pub fn manhattan_grid(rows: usize, cols: usize) -> Result<Graph> {
    if rows < 3 || cols < 3 {
        return Err(invalid(
            "rows/cols",
            "torus wrap needs at least 3 rows and 3 columns",
        ));
    }
    let id = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::with_capacity(2 * rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            edges.push((id(r, c), id(r, (c + 1) % cols)));
            edges.push((id(r, c), id((r + 1) % rows, c)));
        }
    }
    Graph::from_edges(rows * cols, &edges, GraphKind::Torus { rows, cols })
}

/// Non-wrapping grid; corner agents have degree 2, border agents 3.
pub fn plain_grid(rows: usize, cols: usize) -> Result<Graph> {
    if rows * cols < 2 {
        return Err(invalid("rows/cols", "grid needs at least two agents"));
    }
    let id = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((id(r, c), id(r, c + 1)));
            }
            if r + 1 < rows {
                edges.push((id(r, c), id(r + 1, c)));
            }
        }
    }
    Graph::from_edges(rows * cols, &edges, GraphKind::Grid { rows, cols })
}

/// Watts–Strogatz small-world graph. Each clockwise lattice edge is rewired
/// with probability `rewire_prob` to a uniformly chosen non-neighbor. Draws
/// that come out disconnected are discarded and redrawn from the advancing
/// generator, up to [`SMALL_WORLD_RETRY_BUDGET`] attempts.
pub fn small_world<R: Rng + ?Sized>(
    n: usize,
    mean_degree: usize,
    rewire_prob: f64,
    rng: &mut R,
) -> Result<Graph> {
    if mean_degree == 0 || mean_degree % 2 != 0 {
        return Err(invalid("mean_degree", "must be even and positive"));
    }
    if mean_degree >= n {
        return Err(invalid("mean_degree", "must be smaller than n"));
    }
    if !(0.0..=1.0).contains(&rewire_prob) {
        return Err(invalid("rewire_prob", "must lie in [0, 1]"));
    }
    let kind = GraphKind::SmallWorld {
        mean_degree,
        rewire_prob,
    };
    let half = mean_degree / 2;
    for _ in 0..SMALL_WORLD_RETRY_BUDGET {
        let mut adj = vec![vec![false; n]; n];
        for u in 0..n {
            for j in 1..=half {
                let v = (u + j) % n;
                adj[u][v] = true;
                adj[v][u] = true;
            }
        }
        for j in 1..=half {
            for u in 0..n {
                let v = (u + j) % n;
                if !adj[u][v] || !rng.gen_bool(rewire_prob) {
                    continue;
                }
                let candidates: Vec<usize> = (0..n).filter(|&w| w != u && !adj[u][w]).collect();
                if candidates.is_empty() {
                    continue;
                }
                let w = candidates[rng.gen_range(0..candidates.len())];
                adj[u][v] = false;
                adj[v][u] = false;
                adj[u][w] = true;
                adj[w][u] = true;
            }
        }
        let mut edges = Vec::new();
        for u in 0..n {
            edges.extend(((u + 1)..n).filter(|&v| adj[u][v]).map(|v| (u, v)));
        }
        match Graph::from_edges(n, &edges, kind) {
            Ok(g) => return Ok(g),
            Err(Error::Disconnected) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::RetryBudgetExhausted {
        attempts: SMALL_WORLD_RETRY_BUDGET,
    })
}

/// Wakes a uniformly random agent and picks one of its neighbors with
/// probability `P_ij`.
pub fn sample_gossip_pair<R: Rng + ?Sized>(graph: &Graph, rng: &mut R) -> (usize, usize) {
    let i = rng.gen_range(0..graph.n());
    let nbrs = graph.neighbors(i);
    (i, nbrs[rng.gen_range(0..nbrs.len())])
}

/// `E[A] = I − Σ/(2n) + (P + Pᵀ)/(2n)` with `Σ_ii = Σ_j (P_ij + P_ji)`.
pub fn expected_transition_matrix(graph: &Graph) -> SquareMatrix {
    let n = graph.n();
    let p = graph.selection_matrix();
    let scale = 1.0 / (2.0 * n as f64);
    let mut a = SquareMatrix::identity(n);
    for i in 0..n {
        let sigma: f64 = (0..n).map(|j| p[(i, j)] + p[(j, i)]).sum();
        a[(i, i)] -= scale * sigma;
        for j in 0..n {
            a[(i, j)] += scale * (p[(i, j)] + p[(j, i)]);
        }
    }
    a
}

/// One realized gossip matrix: identity except the chosen pair averages.
pub fn pair_averaging_matrix(n: usize, i: usize, j: usize) -> SquareMatrix {
    let mut a = SquareMatrix::identity(n);
    a[(i, i)] = 0.5;
    a[(j, j)] = 0.5;
    a[(i, j)] = 0.5;
    a[(j, i)] = 0.5;
    a
}

/// Second-largest eigenvalue of the expected transition matrix; the decay
/// base of the attackers' disguising noise.
pub fn second_largest_eigenvalue(graph: &Graph) -> f64 {
    symmetric_eigen(&expected_transition_matrix(graph)).values[1]
}

/// Which agents are attackers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackerMask {
    flags: Vec<bool>,
}

impl AttackerMask {
    pub fn none(n: usize) -> Self {
        Self {
            flags: vec![false; n],
        }
    }

    pub fn from_ids(n: usize, ids: &[usize]) -> Result<Self> {
        let mut flags = vec![false; n];
        for &id in ids {
            if id >= n {
                return Err(Error::AgentOutOfRange { id, n });
            }
            flags[id] = true;
        }
        Ok(Self { flags })
    }

    pub fn n(&self) -> usize {
        self.flags.len()
    }

    pub fn is_attacker(&self, i: usize) -> bool {
        self.flags[i]
    }

    pub fn attackers(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.flags[i]).collect()
    }

    /// `m`: total attacker count.
    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// `c`: number of attackers among the neighbors of `i`.
    pub fn attacking_neighbors(&self, graph: &Graph, i: usize) -> usize {
        graph
            .neighbors(i)
            .iter()
            .filter(|&&j| self.flags[j])
            .count()
    }

    pub fn trustworthy_connected(&self, graph: &Graph) -> bool {
        graph.connected_within(|i| !self.flags[i])
    }
}
