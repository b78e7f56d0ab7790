//! Gradient-boosted regression trees with logistic loss.
//!
//! Each round fits a depth-limited tree to the residuals `y − p` by least
//! squares and sets leaf values with one Newton step, `Σr / Σp(1−p)`.
//! More than two classes are handled one-vs-rest.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// Fraction of rows drawn without replacement for each round.
    pub subsample: f64,
    /// Minimum hessian sum `Σp(1−p)` in each child of a split.
    pub min_child_weight: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            n_rounds: 100,
            max_depth: 3,
            learning_rate: 0.1,
            subsample: 1.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// A regression tree; node 0 is the root. Rows with `x[feature] ≤ threshold`
/// go left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf(_) => None,
        })
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// One binary logistic booster: `P = sigmoid(init + Σ tree(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Booster {
    pub init: f64,
    pub trees: Vec<Tree>,
}

impl Booster {
    pub fn margin(&self, row: &[f64]) -> f64 {
        self.init + self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        sigmoid(self.margin(row))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    n_features: usize,
    /// Class ids present in the training targets, ascending.
    classes: Vec<usize>,
    /// One booster for two classes (predicting the larger id), otherwise one
    /// per class.
    boosters: Vec<Booster>,
    pub config: SurrogateConfig,
}

impl SurrogateModel {
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn n_outputs(&self) -> usize {
        self.boosters.len()
    }

    pub fn booster(&self, output: usize) -> &Booster {
        &self.boosters[output]
    }

    /// The class whose probability output `output` models.
    pub fn output_class(&self, output: usize) -> usize {
        if self.boosters.len() == 1 {
            self.classes[1]
        } else {
            self.classes[output]
        }
    }

    /// Index of the output modelling `class`, if it was present in training.
    pub fn output_for_class(&self, class: usize) -> Option<usize> {
        (0..self.n_outputs()).find(|&o| self.output_class(o) == class)
    }

    pub fn predict_output(&self, output: usize, x: &Matrix) -> Vec<f64> {
        let b = &self.boosters[output];
        x.iter_rows().map(|r| b.predict_proba(r)).collect()
    }

    pub fn predict_class(&self, x: &Matrix) -> Vec<usize> {
        x.iter_rows()
            .map(|r| {
                if self.boosters.len() == 1 {
                    self.classes[usize::from(self.boosters[0].predict_proba(r) >= 0.5)]
                } else {
                    let scores: Vec<f64> = self.boosters.iter().map(|b| b.margin(r)).collect();
                    self.classes[crate::trainer::argmax(&scores)]
                }
            })
            .collect()
    }

    /// Mask of features some tree of `output` splits on.
    pub fn used_features(&self, output: usize) -> Vec<bool> {
        let mut used = vec![false; self.n_features];
        for t in &self.boosters[output].trees {
            for f in t.split_features() {
                used[f] = true;
            }
        }
        used
    }
}

/// Fits the surrogate to `targets` (class ids). Needs at least two classes.
pub fn train_surrogate(x: &Matrix, targets: &[usize], cfg: &SurrogateConfig) -> Result<SurrogateModel> {
    if targets.len() != x.rows() {
        return Err(Error::Dimension {
            op: "surrogate targets",
            left: x.shape(),
            right: (targets.len(), 1),
        });
    }
    if !(cfg.learning_rate > 0.0) || !(cfg.subsample > 0.0 && cfg.subsample <= 1.0) || cfg.min_child_weight < 0.0 {
        return Err(Error::Config(
            "surrogate needs learning_rate > 0, subsample in (0, 1] and min_child_weight >= 0".into(),
        ));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("surrogate training features".into()));
    }
    let mut classes: Vec<usize> = targets.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Label(format!(
            "surrogate needs at least two classes, found {}",
            classes.len()
        )));
    }
    let sorted = presort(x);
    let one_vs: Vec<usize> = if classes.len() == 2 {
        vec![classes[1]]
    } else {
        classes.clone()
    };
    let boosters = one_vs
        .par_iter()
        .enumerate()
        .map(|(k, &c)| {
            let y: Vec<f64> = targets.iter().map(|&t| f64::from(u8::from(t == c))).collect();
            fit_booster(x, &sorted, &y, cfg, cfg.seed.wrapping_add(k as u64))
        })
        .collect();
    Ok(SurrogateModel {
        n_features: x.cols(),
        classes,
        boosters,
        config: cfg.clone(),
    })
}

fn presort(x: &Matrix) -> Vec<Vec<u32>> {
    (0..x.cols())
        .into_par_iter()
        .map(|j| {
            let mut idx: Vec<u32> = (0..x.rows() as u32).collect();
            idx.sort_by(|&a, &b| x[(a as usize, j)].total_cmp(&x[(b as usize, j)]));
            idx
        })
        .collect()
}

fn fit_booster(x: &Matrix, sorted: &[Vec<u32>], y: &[f64], cfg: &SurrogateConfig, seed: u64) -> Booster {
    let n = y.len();
    let prior = y.iter().sum::<f64>() / n as f64;
    let init = (prior / (1.0 - prior)).ln();
    let mut margin = vec![init; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trees = Vec::with_capacity(cfg.n_rounds);
    let n_sub = ((cfg.subsample * n as f64).round() as usize).clamp(1, n);
    for _ in 0..cfg.n_rounds {
        let p: Vec<f64> = margin.iter().map(|&m| sigmoid(m)).collect();
        let grad: Vec<f64> = y.iter().zip(&p).map(|(y, p)| y - p).collect();
        let hess: Vec<f64> = p.iter().map(|p| p * (1.0 - p)).collect();
        let mut in_sample = vec![n_sub == n; n];
        if n_sub < n {
            for i in index::sample(&mut rng, n, n_sub) {
                in_sample[i] = true;
            }
        }
        let tree = fit_tree(x, sorted, &grad, &hess, &in_sample, cfg);
        for (i, m) in margin.iter_mut().enumerate() {
            *m += tree.predict(x.row(i));
        }
        trees.push(tree);
    }
    Booster { init, trees }
}

#[derive(Clone, Copy, Default)]
struct Stats {
    grad: f64,
    hess: f64,
    count: usize,
}

impl Stats {
    fn add(&mut self, g: f64, h: f64) {
        self.grad += g;
        self.hess += h;
        self.count += 1;
    }

    fn sse_gain(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.grad * self.grad / self.count as f64
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Level-wise growth: every level scans each presorted feature once for all
/// open nodes at the same time.
fn fit_tree(x: &Matrix, sorted: &[Vec<u32>], grad: &[f64], hess: &[f64], in_sample: &[bool], cfg: &SurrogateConfig) -> Tree {
    const NONE: u32 = u32::MAX;
    let n = grad.len();
    // open-node slot of each row at the current level
    let mut slot_of: Vec<u32> = (0..n).map(|i| if in_sample[i] { 0 } else { NONE }).collect();
    let mut nodes = vec![Node::Leaf(0.0)];
    let mut open: Vec<usize> = vec![0];
    let mut totals = vec![Stats::default()];
    for i in (0..n).filter(|&i| in_sample[i]) {
        totals[0].add(grad[i], hess[i]);
    }
    let leaf_value = |s: &Stats| cfg.learning_rate * s.grad / s.hess.max(1e-12);

    for _depth in 0..cfg.max_depth {
        if open.is_empty() {
            break;
        }
        let per_feature: Vec<Vec<Option<Candidate>>> = (0..x.cols())
            .into_par_iter()
            .map(|j| {
                let mut left = vec![Stats::default(); open.len()];
                let mut last = vec![f64::NAN; open.len()];
                let mut best: Vec<Option<Candidate>> = vec![None; open.len()];
                for &i in &sorted[j] {
                    let i = i as usize;
                    let s = slot_of[i];
                    if s == NONE {
                        continue;
                    }
                    let s = s as usize;
                    let v = x[(i, j)];
                    let l = left[s];
                    if l.count > 0 && v > last[s] {
                        let t = totals[s];
                        let r = Stats {
                            grad: t.grad - l.grad,
                            hess: t.hess - l.hess,
                            count: t.count - l.count,
                        };
                        if l.hess >= cfg.min_child_weight && r.hess >= cfg.min_child_weight {
                            let gain = l.sse_gain() + r.sse_gain() - t.sse_gain();
                            if best[s].is_none_or(|b| gain > b.gain) {
                                best[s] = Some(Candidate {
                                    gain,
                                    feature: j,
                                    threshold: last[s] + (v - last[s]) / 2.0,
                                });
                            }
                        }
                    }
                    left[s].add(grad[i], hess[i]);
                    last[s] = v;
                }
                best
            })
            .collect();

        let mut next_open = Vec::new();
        let mut next_totals = Vec::new();
        // new slot ids for (left, right) children of each open slot
        let mut child_slots: Vec<Option<(u32, u32, Candidate)>> = vec![None; open.len()];
        for (s, &node) in open.iter().enumerate() {
            let mut chosen: Option<Candidate> = None;
            for cands in &per_feature {
                if let Some(c) = cands[s] {
                    if c.gain > 1e-12 && chosen.is_none_or(|b| c.gain > b.gain) {
                        chosen = Some(c);
                    }
                }
            }
            match chosen {
                None => nodes[node] = Node::Leaf(leaf_value(&totals[s])),
                Some(c) => {
                    let left = nodes.len();
                    nodes.push(Node::Leaf(0.0));
                    nodes.push(Node::Leaf(0.0));
                    nodes[node] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right: left + 1,
                    };
                    let ls = next_open.len() as u32;
                    next_open.push(left);
                    next_open.push(left + 1);
                    next_totals.push(Stats::default());
                    next_totals.push(Stats::default());
                    child_slots[s] = Some((ls, ls + 1, c));
                }
            }
        }
        for i in 0..n {
            let s = slot_of[i];
            if s == NONE {
                continue;
            }
            slot_of[i] = match child_slots[s as usize] {
                None => NONE,
                Some((l, r, c)) => {
                    let to = if x[(i, c.feature)] <= c.threshold { l } else { r };
                    next_totals[to as usize].add(grad[i], hess[i]);
                    to
                }
            };
        }
        open = next_open;
        totals = next_totals;
    }
    for (s, &node) in open.iter().enumerate() {
        nodes[node] = Node::Leaf(leaf_value(&totals[s]));
    }
    Tree { nodes }
}
