//! Communication graph model and the base column-stochastic weights.
//!
//! Agents are indexed `0..n` in memory. The on-disk edge list uses 1-based
//! labels. Every node is its own in-neighbor; self-loops are implicit and are
//! never stored in the edge sets or written to the edge list.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Maximum number of seeds tried when sampling a strongly connected ER graph.
pub const MAX_GRAPH_ATTEMPTS: u64 = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("edge ({from}, {to}) has an endpoint outside 1..={n}")]
    EndpointOutOfRange { from: usize, to: usize, n: usize },
    #[error("graph must have at least one node")]
    Empty,
    #[error("algebraic connectivity needs a symmetric graph; edge ({from}, {to}) has no reverse")]
    NotSymmetric { from: usize, to: usize },
    #[error("no strongly connected Erdos-Renyi graph found after {attempts} attempts (n = {n}, p = {p})")]
    NotConnected { n: usize, p: f64, attempts: u64 },
    #[error("edge list parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Fixed directed communication graph.
///
/// An edge `(j, i)` means agent `j` can send to agent `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Digraph {
    n: usize,
    in_neighbors: Vec<Vec<usize>>,
    out_neighbors: Vec<Vec<usize>>,
}

impl Digraph {
    /// Builds a graph from 0-based `(from, to)` pairs. Self-loops and
    /// duplicates in `edges` are ignored.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        let mut in_neighbors = vec![Vec::new(); n];
        let mut out_neighbors = vec![Vec::new(); n];
        for (from, to) in edges {
            if from >= n || to >= n {
                return Err(TopologyError::EndpointOutOfRange { from: from + 1, to: to + 1, n });
            }
            if from != to {
                in_neighbors[to].push(from);
                out_neighbors[from].push(to);
            }
        }
        for list in in_neighbors.iter_mut().chain(out_neighbors.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { n, in_neighbors, out_neighbors })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// In-neighbors of `i`, excluding `i` itself.
    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    /// Out-neighbors of `j`, excluding `j` itself.
    pub fn out_neighbors(&self, j: usize) -> &[usize] {
        &self.out_neighbors[j]
    }

    /// Out-degree of `j` counting the self-loop.
    pub fn out_degree(&self, j: usize) -> usize {
        self.out_neighbors[j].len() + 1
    }

    /// Number of directed edges, self-loops excluded.
    pub fn edge_count(&self) -> usize {
        self.out_neighbors.iter().map(Vec::len).sum()
    }

    /// Directed edges `(from, to)` in sorted order, self-loops excluded.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.out_neighbors
            .iter()
            .enumerate()
            .flat_map(|(j, outs)| outs.iter().map(move |&i| (j, i)))
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        from == to || self.out_neighbors[from].binary_search(&to).is_ok()
    }

    pub fn is_symmetric(&self) -> bool {
        self.edges().all(|(j, i)| self.has_edge(i, j))
    }

    /// Serializes as `n` on the first line, then one 1-based `from to` pair
    /// per line in sorted order.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for (j, i) in self.edges() {
            let _ = writeln!(out, "{} {}", j + 1, i + 1);
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self, TopologyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (first, header) = lines.next().ok_or(TopologyError::Parse {
            line: 1,
            reason: "missing node count".into(),
        })?;
        let n: usize = header.parse().map_err(|_| TopologyError::Parse {
            line: first,
            reason: format!("invalid node count {header:?}"),
        })?;
        let mut edges = Vec::new();
        for (line, content) in lines {
            let parts: Vec<&str> = content.split_whitespace().collect();
            let parse = |s: &str| -> Result<usize, TopologyError> {
                s.parse::<usize>().map_err(|_| TopologyError::Parse {
                    line,
                    reason: format!("invalid node label {s:?}"),
                })
            };
            if parts.len() != 2 {
                return Err(TopologyError::Parse { line, reason: "expected two node labels".into() });
            }
            let (from, to) = (parse(parts[0])?, parse(parts[1])?);
            if from == 0 || to == 0 || from > n || to > n {
                return Err(TopologyError::EndpointOutOfRange { from, to, n });
            }
            edges.push((from - 1, to - 1));
        }
        Self::new(n, edges)
    }
}

/// Samples an undirected Erdos-Renyi graph and realizes it as a symmetric
/// digraph. Deterministic for a given `(n, p, seed)`.
pub fn generate_erdos_renyi(n: usize, p: f64, seed: u64) -> Digraph {
    assert!(n >= 1, "graph needs at least one node");
    assert!((0.0..=1.0).contains(&p), "edge probability {p} outside [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
                edges.push((j, i));
            }
        }
    }
    Digraph::new(n, edges).expect("sampled endpoints are in range")
}

/// Resamples ER graphs until one is strongly connected. Attempt `k` uses a
/// seed derived from `(seed, k)`; attempt 0 uses `seed` itself. Returns the
/// graph and the attempt index that produced it.
pub fn generate_connected_erdos_renyi(n: usize, p: f64, seed: u64) -> Result<(Digraph, u64), TopologyError> {
    for attempt in 0..MAX_GRAPH_ATTEMPTS {
        let g = generate_erdos_renyi(n, p, attempt_seed(seed, attempt));
        if is_strongly_connected(&g) {
            return Ok((g, attempt));
        }
    }
    Err(TopologyError::NotConnected { n, p, attempts: MAX_GRAPH_ATTEMPTS })
}

/// Scans edge probabilities `0.01, 0.02, ..., 1.0` and returns the first
/// strongly connected ER graph whose algebraic connectivity reaches `target`,
/// together with the probability used and the measured connectivity.
pub fn generate_erdos_renyi_with_connectivity(
    n: usize,
    target: f64,
    seed: u64,
) -> Result<(Digraph, f64, f64), TopologyError> {
    let mut last_err = TopologyError::NotConnected { n, p: 0.0, attempts: 0 };
    for percent in 1..=100u32 {
        let p = f64::from(percent) / 100.0;
        match generate_connected_erdos_renyi(n, p, seed) {
            Ok((g, _)) => {
                let connectivity = algebraic_connectivity(&g)?;
                if connectivity >= target || percent == 100 {
                    return Ok((g, p, connectivity));
                }
            }
            Err(e) => last_err = e,
        }
    }
    Err(last_err)
}

fn attempt_seed(seed: u64, attempt: u64) -> u64 {
    seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// True iff every node reaches every other node along directed edges.
pub fn is_strongly_connected(g: &Digraph) -> bool {
    reaches_all(g.n, |v| g.out_neighbors(v)) && reaches_all(g.n, |v| g.in_neighbors(v))
}

pub(crate) fn reaches_all<'a>(n: usize, next: impl Fn(usize) -> &'a [usize]) -> bool {
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = queue.pop_front() {
        for &w in next(v) {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                queue.push_back(w);
            }
        }
    }
    count == n
}

/// Second-smallest eigenvalue of the undirected Laplacian (self-loops ignored).
pub fn algebraic_connectivity(g: &Digraph) -> Result<f64, TopologyError> {
    if let Some((j, i)) = g.edges().find(|&(j, i)| !g.has_edge(i, j)) {
        return Err(TopologyError::NotSymmetric { from: j + 1, to: i + 1 });
    }
    let n = g.node_count();
    if n == 1 {
        return Ok(0.0);
    }
    let mut laplacian = DMatrix::<f64>::zeros(n, n);
    for (j, i) in g.edges() {
        laplacian[(i, j)] = -1.0;
    }
    for i in 0..n {
        laplacian[(i, i)] = g.in_neighbors(i).len() as f64;
    }
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(laplacian).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    // Round-off can push the zero eigenvalue of a disconnected graph slightly negative.
    Ok(eigenvalues[1].max(0.0))
}

/// Column-stochastic matrix matching a digraph.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    entries: DMatrix<f64>,
    min_positive_weight: f64,
}

impl WeightMatrix {
    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    /// Weight `a_ij` that agent `i` applies to what it receives from `j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Lower bound on every positive entry.
    pub fn min_positive_weight(&self) -> f64 {
        self.min_positive_weight
    }

    /// Largest deviation of a column sum from 1.
    pub fn column_sum_error(&self) -> f64 {
        self.entries
            .column_iter()
            .map(|c| (c.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Uniform out-degree weights: `a_ij = 1 / outdeg(j)` for `j -> i` and for
/// `i == j`, where the out-degree counts the self-loop.
pub fn build_column_stochastic(g: &Digraph) -> WeightMatrix {
    let n = g.node_count();
    let mut entries = DMatrix::<f64>::zeros(n, n);
    let mut min_positive_weight = 1.0_f64;
    for j in 0..n {
        let w = 1.0 / g.out_degree(j) as f64;
        min_positive_weight = min_positive_weight.min(w);
        entries[(j, j)] = w;
        for &i in g.out_neighbors(j) {
            entries[(i, j)] = w;
        }
    }
    WeightMatrix { entries, min_positive_weight }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn complete(n: usize) -> Digraph {
        Digraph::new(n, (0..n).flat_map(|i| (0..n).map(move |j| (i, j)))).unwrap()
    }

    #[test]
    fn er_single_node_has_only_self_loop() {
        let g = generate_erdos_renyi(1, 0.5, 99);
        assert_eq!(g.node_count(), 1);
        assert_eq!(g.edge_count(), 0);
        assert!(g.has_edge(0, 0));
    }

    #[test]
    fn er_with_p_one_is_complete() {
        let g = generate_erdos_renyi(3, 1.0, 5);
        assert_eq!(g.edge_count(), 6);
        assert_eq!(g, complete(3));
    }

    #[test]
    fn er_is_reproducible() {
        let a = generate_erdos_renyi(30, 0.2, 11);
        let b = generate_erdos_renyi(30, 0.2, 11);
        assert_eq!(a.to_edge_list(), b.to_edge_list());
        assert!(a.is_symmetric());
    }

    #[test]
    fn strong_connectivity_small_cases() {
        assert!(is_strongly_connected(&Digraph::new(1, []).unwrap()));
        assert!(is_strongly_connected(&Digraph::new(2, [(0, 1), (1, 0)]).unwrap()));
        assert!(!is_strongly_connected(&Digraph::new(2, [(0, 1)]).unwrap()));
    }

    #[test]
    fn connected_er_gives_up_after_bounded_attempts() {
        let err = generate_connected_erdos_renyi(5, 0.0, 1).unwrap_err();
        assert_eq!(err, TopologyError::NotConnected { n: 5, p: 0.0, attempts: MAX_GRAPH_ATTEMPTS });
    }

    #[test]
    fn algebraic_connectivity_known_values() {
        assert!((algebraic_connectivity(&complete(3)).unwrap() - 3.0).abs() < 1e-12);
        let path = Digraph::new(2, [(0, 1), (1, 0)]).unwrap();
        assert!((algebraic_connectivity(&path).unwrap() - 2.0).abs() < 1e-12);
        let disconnected = Digraph::new(2, []).unwrap();
        assert_eq!(algebraic_connectivity(&disconnected).unwrap(), 0.0);
    }

    #[test]
    fn algebraic_connectivity_rejects_directed_graph() {
        let g = Digraph::new(2, [(0, 1)]).unwrap();
        assert_eq!(algebraic_connectivity(&g), Err(TopologyError::NotSymmetric { from: 1, to: 2 }));
    }

    #[test]
    fn algebraic_connectivity_of_4_cycle() {
        // Laplacian eigenvalues of C4 are 2 - 2cos(2 pi k / 4) = {0, 2, 2, 4}.
        let g = Digraph::new(4, [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2), (3, 0), (0, 3)]).unwrap();
        assert!((algebraic_connectivity(&g).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn column_stochastic_examples() {
        let w = build_column_stochastic(&complete(3));
        assert!(w.entries().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
        let single = build_column_stochastic(&Digraph::new(1, []).unwrap());
        assert_eq!(single.get(0, 0), 1.0);
        let cycle = build_column_stochastic(&Digraph::new(2, [(0, 1), (1, 0)]).unwrap());
        assert!(cycle.entries().iter().all(|&a| a == 0.5));
        assert_eq!(cycle.min_positive_weight(), 0.5);
    }

    #[test]
    fn column_stochastic_pattern_matches_graph() {
        for seed in 0..20 {
            let (g, _) = generate_connected_erdos_renyi(12, 0.3, seed).unwrap();
            let w = build_column_stochastic(&g);
            assert!(w.column_sum_error() < 1e-12);
            for i in 0..12 {
                for j in 0..12 {
                    assert_eq!(w.get(i, j) > 0.0, g.has_edge(j, i), "pattern mismatch at ({i}, {j})");
                    if w.get(i, j) > 0.0 {
                        assert!(w.get(i, j) >= w.min_positive_weight());
                    }
                }
            }
        }
    }

    #[test]
    fn edge_list_round_trip_and_errors() {
        let (g, _) = generate_connected_erdos_renyi(8, 0.4, 3).unwrap();
        let text = g.to_edge_list();
        assert_eq!(Digraph::from_edge_list(&text).unwrap(), g);
        let lines: Vec<&str> = text.lines().skip(1).collect();
        let mut sorted = lines.clone();
        sorted.sort_by_key(|l| {
            let v: Vec<usize> = l.split(' ').map(|s| s.parse().unwrap()).collect();
            (v[0], v[1])
        });
        assert_eq!(lines, sorted);

        assert!(matches!(Digraph::from_edge_list("2\n1 3\n"), Err(TopologyError::EndpointOutOfRange { .. })));
        assert!(matches!(Digraph::from_edge_list("2\n1\n"), Err(TopologyError::Parse { line: 2, .. })));
        assert!(matches!(Digraph::from_edge_list(""), Err(TopologyError::Parse { .. })));
    }
}
