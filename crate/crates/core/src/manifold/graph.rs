//! Weighted neighbour graphs and Leiden community detection under the
//! RB-configuration quality
//!
//! ```text
//! Q = Σ_c [ e_c − γ·K_c² / (2m) ]
//! ```
//!
//! where `e_c` sums adjacency entries over ordered node pairs inside `c`
//! (each internal edge counts twice), `K_c` is the community's degree sum and
//! `2m` the total degree.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::umap::nearest_neighbors;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Undirected weighted graph as symmetric adjacency lists sorted by
/// neighbour. A self-loop appears once in its node's list.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
}

impl WeightedGraph {
    /// Builds from undirected edges; parallel edges are summed.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(u, v, w) in edges {
            if u >= n || v >= n {
                return Err(Error::Contract(format!("edge ({u}, {v}) outside a graph of {n} nodes")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Contract(format!("edge ({u}, {v}) has invalid weight {w}")));
            }
            adj[u].push((v, w));
            if u != v {
                adj[v].push((u, w));
            }
        }
        for list in adj.iter_mut() {
            list.sort_by_key(|e| e.0);
            list.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 += b.1;
                    true
                } else {
                    false
                }
            });
        }
        Ok(WeightedGraph { adj })
    }

    pub fn n_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn neighbors(&self, u: usize) -> &[(usize, f64)] {
        &self.adj[u]
    }

    pub fn weight(&self, u: usize, v: usize) -> f64 {
        self.adj[u]
            .binary_search_by_key(&v, |e| e.0)
            .map_or(0.0, |p| self.adj[u][p].1)
    }

    pub fn degree(&self, u: usize) -> f64 {
        self.adj[u].iter().map(|e| e.1).sum()
    }

    /// Each undirected edge once, `u ≤ v`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(u, l)| l.iter().filter(move |e| e.0 >= u).map(move |&(v, w)| (u, v, w)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    pub graph: WeightedGraph,
}

/// Exact k-nearest-neighbour graph. Edge weights are `exp(−d²/(σᵢσⱼ))` with
/// σ the distance to the k-th neighbour, scaled so each row's largest weight
/// is 1, then symmetrised by taking the larger direction.
pub fn knn_graph(x: &Matrix, k: usize) -> Result<KnnGraph> {
    let n = x.rows();
    if k == 0 || k >= n {
        return Err(Error::Contract(format!("knn_graph needs 1 <= k < n = {n}, got {k}")));
    }
    let knn = nearest_neighbors(x, k);
    let positive_min = knn
        .iter()
        .flatten()
        .map(|e| e.1)
        .filter(|&d| d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let floor = if positive_min.is_finite() { positive_min } else { 1.0 };
    let sigma: Vec<f64> = knn.iter().map(|l| l.last().map_or(floor, |e| e.1).max(floor)).collect();
    let mut directed: Vec<(usize, usize, f64)> = Vec::with_capacity(n * k);
    for (i, list) in knn.iter().enumerate() {
        let logw: Vec<f64> = list.iter().map(|&(j, d)| -d * d / (sigma[i] * sigma[j])).collect();
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (&(j, _), lw) in list.iter().zip(logw) {
            directed.push((i, j, (lw - top).exp().max(f64::MIN_POSITIVE)));
        }
    }
    directed.sort_by(|a, b| (a.0.min(a.1), a.0.max(a.1)).cmp(&(b.0.min(b.1), b.0.max(b.1))));
    let mut edges: Vec<(usize, usize, f64)> = Vec::with_capacity(directed.len());
    for (i, j, w) in directed {
        let key = (i.min(j), i.max(j));
        match edges.last_mut() {
            Some(last) if (last.0, last.1) == key => last.2 = last.2.max(w),
            _ => edges.push((key.0, key.1, w)),
        }
    }
    Ok(KnnGraph {
        k,
        graph: WeightedGraph::from_edges(n, &edges)?,
    })
}

fn community_count(membership: &[usize]) -> usize {
    membership.iter().max().map_or(0, |m| m + 1)
}

/// RB-configuration quality of `membership` on `graph` at resolution `γ`.
pub fn rb_quality(graph: &WeightedGraph, membership: &[usize], resolution: f64) -> f64 {
    let c = community_count(membership);
    let mut internal = vec![0.0; c];
    let mut degree = vec![0.0; c];
    let mut total = 0.0;
    for u in 0..graph.n_nodes() {
        for &(v, w) in graph.neighbors(u) {
            if membership[u] == membership[v] {
                internal[membership[u]] += w;
            }
            degree[membership[u]] += w;
            total += w;
        }
    }
    let penalty = if total > 0.0 { resolution / total } else { 0.0 };
    internal.iter().zip(&degree).map(|(e, k)| e - penalty * k * k).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Community of each node, ids contiguous from 0.
    pub membership: Vec<usize>,
    pub n_clusters: usize,
    pub resolution: f64,
    pub quality: f64,
    /// Quality of the unrefined partition after every local-moving and
    /// aggregation phase.
    pub trace: Vec<f64>,
}

/// Graph at one aggregation level.
struct Level {
    adj: Vec<Vec<(usize, f64)>>,
    /// Internal adjacency mass carried by the node (ordered-pair units).
    self_mass: Vec<f64>,
    degree: Vec<f64>,
}

impl Level {
    fn from_graph(g: &WeightedGraph) -> Level {
        let n = g.n_nodes();
        let mut adj = vec![Vec::new(); n];
        let mut self_mass = vec![0.0; n];
        let mut degree = vec![0.0; n];
        for u in 0..n {
            for &(v, w) in g.neighbors(u) {
                degree[u] += w;
                if u == v {
                    self_mass[u] += w;
                } else {
                    adj[u].push((v, w));
                }
            }
        }
        Level { adj, self_mass, degree }
    }

    fn n(&self) -> usize {
        self.adj.len()
    }

    fn aggregate(&self, groups: &[usize]) -> Level {
        let c = community_count(groups);
        let mut self_mass = vec![0.0; c];
        let mut degree = vec![0.0; c];
        let mut rows: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); c];
        for u in 0..self.n() {
            let gu = groups[u];
            self_mass[gu] += self.self_mass[u];
            degree[gu] += self.degree[u];
            for &(v, w) in &self.adj[u] {
                let gv = groups[v];
                if gu == gv {
                    self_mass[gu] += w;
                } else {
                    *rows[gu].entry(gv).or_insert(0.0) += w;
                }
            }
        }
        Level {
            adj: rows.into_iter().map(|r| r.into_iter().collect()).collect(),
            self_mass,
            degree,
        }
    }
}

/// Mutable partition of a level with per-community degree sums.
struct Partition {
    membership: Vec<usize>,
    comm_degree: Vec<f64>,
    comm_size: Vec<usize>,
    empty: BTreeSet<usize>,
}

impl Partition {
    fn new(level: &Level, membership: Vec<usize>) -> Partition {
        let n = level.n();
        let mut comm_degree = vec![0.0; n];
        let mut comm_size = vec![0; n];
        for (u, &c) in membership.iter().enumerate() {
            comm_degree[c] += level.degree[u];
            comm_size[c] += 1;
        }
        let empty = (0..n).filter(|&c| comm_size[c] == 0).collect();
        Partition {
            membership,
            comm_degree,
            comm_size,
            empty,
        }
    }

    fn relocate(&mut self, level: &Level, u: usize, to: usize) {
        let from = self.membership[u];
        self.comm_degree[from] -= level.degree[u];
        self.comm_size[from] -= 1;
        if self.comm_size[from] == 0 {
            self.comm_degree[from] = 0.0;
            self.empty.insert(from);
        }
        self.comm_degree[to] += level.degree[u];
        self.comm_size[to] += 1;
        self.empty.remove(&to);
        self.membership[u] = to;
    }
}

const MOVE_EPS: f64 = 1e-12;

struct Leiden<'a> {
    resolution: f64,
    /// γ / (2m), zero on an edgeless graph.
    penalty: f64,
    rng: &'a mut ChaCha8Rng,
}

impl Leiden<'_> {
    /// Scores of moving `u` (already detached) into each neighbouring
    /// community: `w(u, C) − γ·K_u·K_C/(2m)`.
    fn neighbour_weights(&self, level: &Level, part: &Partition, u: usize) -> std::collections::BTreeMap<usize, f64> {
        let mut w = std::collections::BTreeMap::new();
        for &(v, wt) in &level.adj[u] {
            *w.entry(part.membership[v]).or_insert(0.0) += wt;
        }
        w
    }

    fn score(&self, level: &Level, part: &Partition, u: usize, comm: usize, w: f64, own: bool) -> f64 {
        let k = part.comm_degree[comm] - if own { level.degree[u] } else { 0.0 };
        w - self.penalty * level.degree[u] * k
    }

    /// Queue-based local moving; returns whether any node moved.
    fn move_nodes_fast(&mut self, level: &Level, part: &mut Partition) -> bool {
        let n = level.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(self.rng);
        let mut queue: std::collections::VecDeque<usize> = order.into_iter().collect();
        let mut queued = vec![true; n];
        let mut moved_any = false;
        while let Some(u) = queue.pop_front() {
            queued[u] = false;
            let own = part.membership[u];
            let weights = self.neighbour_weights(level, part, u);
            let w_own = weights.get(&own).copied().unwrap_or(0.0);
            let mut best = own;
            let mut best_score = self.score(level, part, u, own, w_own, true);
            for (&c, &w) in &weights {
                if c == own {
                    continue;
                }
                let s = self.score(level, part, u, c, w, false);
                if s > best_score + MOVE_EPS * (1.0 + best_score.abs()) {
                    best = c;
                    best_score = s;
                }
            }
            // an empty community scores 0
            if part.comm_size[own] > 1 && 0.0 > best_score + MOVE_EPS * (1.0 + best_score.abs()) {
                if let Some(&e) = part.empty.iter().next() {
                    best = e;
                }
            }
            if best != own {
                part.relocate(level, u, best);
                moved_any = true;
                for &(v, _) in &level.adj[u] {
                    if !queued[v] && part.membership[v] != best {
                        queued[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        moved_any
    }

    /// Greedy refinement inside each community of `coarse`: starting from
    /// singletons, well-connected nodes merge into the well-connected
    /// sub-community with the largest non-negative gain, lower id on ties.
    fn refine(&mut self, level: &Level, coarse: &[usize]) -> Vec<usize> {
        let n = level.n();
        let mut part = Partition::new(level, (0..n).collect());
        let c = community_count(coarse);
        let mut coarse_degree = vec![0.0; c];
        for u in 0..n {
            coarse_degree[coarse[u]] += level.degree[u];
        }
        // E(S, C − S) for each refined community S, single-counted
        let mut ext: Vec<f64> = (0..n)
            .map(|u| {
                level.adj[u]
                    .iter()
                    .filter(|e| coarse[e.0] == coarse[u])
                    .map(|e| e.1)
                    .sum()
            })
            .collect();
        let well_connected = |e: f64, k_s: f64, k_c: f64, penalty: f64| e >= penalty * k_s * (k_c - k_s) - 1e-12;

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(self.rng);
        for u in order {
            let cu = coarse[u];
            if part.comm_size[part.membership[u]] != 1 {
                continue;
            }
            if !well_connected(ext[u], level.degree[u], coarse_degree[cu], self.penalty) {
                continue;
            }
            let own = part.membership[u];
            let weights = self.neighbour_weights(level, &part, u);
            let mut best = own;
            let mut best_score = 0.0_f64;
            for (&s, &w) in &weights {
                // a non-empty refined community always contains the node it is
                // named after, since only singletons move
                if s == own || coarse[s] != cu {
                    continue;
                }
                if !well_connected(ext[s], part.comm_degree[s], coarse_degree[cu], self.penalty) {
                    continue;
                }
                let gain = self.score(level, &part, u, s, w, false);
                if gain > best_score + MOVE_EPS * (1.0 + best_score.abs()) {
                    best = s;
                    best_score = gain;
                }
            }
            if best != own {
                let w_into = weights[&best];
                part.relocate(level, u, best);
                ext[best] += ext[u] - 2.0 * w_into;
                ext[own] = 0.0;
            }
        }
        renumber(&part.membership)
    }
}

fn renumber(membership: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    membership
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

/// Leiden community detection. Passes repeat from the previous result until
/// one leaves the partition unchanged, so no single-node move improves it.
pub fn leiden(graph: &WeightedGraph, resolution: f64, seed: u64) -> Result<ClusterAssignment> {
    let n = graph.n_nodes();
    if n == 0 {
        return Err(Error::Contract("leiden needs a non-empty graph".into()));
    }
    if !(resolution.is_finite() && resolution >= 0.0) {
        return Err(Error::Contract(format!("resolution must be finite and non-negative, got {resolution}")));
    }
    let base = Level::from_graph(graph);
    let total: f64 = base.degree.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = Leiden {
        resolution,
        penalty: if total > 0.0 { resolution / total } else { 0.0 },
        rng: &mut rng,
    };
    let mut membership: Vec<usize> = (0..n).collect();
    let mut trace = vec![rb_quality(graph, &membership, resolution)];
    loop {
        let before = membership.clone();
        membership = state.pass(&base, graph, membership, &mut trace);
        if membership == before {
            break;
        }
    }
    let quality = rb_quality(graph, &membership, state.resolution);
    Ok(ClusterAssignment {
        n_clusters: community_count(&membership),
        membership,
        resolution,
        quality,
        trace,
    })
}

impl Leiden<'_> {
    fn pass(&mut self, base: &Level, graph: &WeightedGraph, start: Vec<usize>, trace: &mut Vec<f64>) -> Vec<usize> {
        let mut level_owned: Option<Level> = None;
        // node of the current level for each original node
        let mut node_of: Vec<usize> = (0..base.n()).collect();
        let mut part_membership = start;
        loop {
            let level = level_owned.as_ref().unwrap_or(base);
            let mut part = Partition::new(level, part_membership);
            self.move_nodes_fast(level, &mut part);
            let flat: Vec<usize> = node_of.iter().map(|&v| part.membership[v]).collect();
            trace.push(rb_quality(graph, &renumber(&flat), self.resolution));
            let coarse = renumber(&part.membership);
            if community_count(&coarse) == level.n() {
                return renumber(&flat);
            }
            let mut refined = self.refine(level, &coarse);
            if community_count(&refined) == level.n() {
                refined = coarse.clone();
            }
            let next = level.aggregate(&refined);
            let mut next_membership = vec![0; next.n()];
            for u in 0..level.n() {
                next_membership[refined[u]] = coarse[u];
            }
            for v in node_of.iter_mut() {
                *v = refined[*v];
            }
            let flat: Vec<usize> = node_of.iter().map(|&v| next_membership[v]).collect();
            trace.push(rb_quality(graph, &renumber(&flat), self.resolution));
            part_membership = next_membership;
            level_owned = Some(next);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> WeightedGraph {
        WeightedGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap()
    }

    #[test]
    fn triangle_quality_by_hand() {
        // one community: e = 6 ordered pairs, K = 6, 2m = 6 → 6 − 6γ
        for gamma in [0.0, 0.3, 1.0] {
            assert!((rb_quality(&triangle(), &[0, 0, 0], gamma) - (6.0 - 6.0 * gamma)).abs() < 1e-12);
        }
        // singletons: −γ·3·4/6
        assert!((rb_quality(&triangle(), &[0, 1, 2], 1.0) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn edgeless_singletons_score_zero() {
        let g = WeightedGraph::from_edges(4, &[]).unwrap();
        assert_eq!(rb_quality(&g, &[0, 1, 2, 3], 1.0), 0.0);
        let a = leiden(&g, 1.0, 0).unwrap();
        assert_eq!(a.n_clusters, 4);
    }

    fn two_cliques() -> WeightedGraph {
        let mut edges = Vec::new();
        for base in [0, 5] {
            for i in 0..5 {
                for j in i + 1..5 {
                    edges.push((base + i, base + j, 1.0));
                }
            }
        }
        edges.push((4, 5, 1.0));
        WeightedGraph::from_edges(10, &edges).unwrap()
    }

    #[test]
    fn two_cliques_are_recovered() {
        let g = two_cliques();
        let a = leiden(&g, 1.0, 3).unwrap();
        assert_eq!(a.membership, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        let merged = rb_quality(&g, &[0; 10], 1.0);
        assert!(a.quality > merged);
        assert!(a.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    #[test]
    fn zero_resolution_gives_one_community_per_component() {
        let a = leiden(&two_cliques(), 0.0, 0).unwrap();
        assert_eq!(a.n_clusters, 1);
    }

    #[test]
    fn merging_disconnected_communities_never_helps() {
        let g = WeightedGraph::from_edges(4, &[(0, 1, 1.0), (2, 3, 2.0)]).unwrap();
        assert!(rb_quality(&g, &[0, 0, 0, 0], 0.5) < rb_quality(&g, &[0, 0, 1, 1], 0.5));
    }

    #[test]
    fn collinear_points_form_a_chain() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0]]);
        let g = knn_graph(&x, 1).unwrap().graph;
        let edges: Vec<(usize, usize)> = g.edges().map(|e| (e.0, e.1)).collect();
        assert_eq!(edges, vec![(0, 1), (1, 2)]);
        assert!(knn_graph(&x, 3).is_err());
    }

    #[test]
    fn knn_weights_symmetric_in_unit_interval() {
        let x = Matrix::from_fn(25, 3, |i, j| ((i * 31 + j * 17) % 13) as f64 * 0.37);
        let g = knn_graph(&x, 4).unwrap().graph;
        for u in 0..25 {
            for &(v, w) in g.neighbors(u) {
                assert!(u != v && w > 0.0 && w <= 1.0);
                assert_eq!(g.weight(v, u), w);
            }
        }
    }
}
