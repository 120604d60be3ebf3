//! Isolation forest: random axis-aligned partitioning trees whose expected
//! isolation depth scores how anomalous a point is.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, DetRng};

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Average unsuccessful-search path length in a binary search tree of `n`
/// points, `c(n) = 2 (ln(n - 1) + gamma) - 2 (n - 1) / n`, with `c(1) = 0`.
pub fn c_factor(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let n = n as f64;
    2.0 * (libm::log(n - 1.0) + EULER_GAMMA) - 2.0 * (n - 1.0) / n
}

/// One node of a tree stored in preorder; the left child of a split at
/// index `i` is at `i + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Split { dim: usize, value: f64, right: usize },
    Leaf { size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationTree {
    nodes: Vec<Node>,
}

impl IsolationTree {
    /// Rebuilds a tree from preorder nodes, checking the child links.
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        fn walk(nodes: &[Node], i: usize) -> Result<usize> {
            match nodes.get(i) {
                None => Err(Error::Config(format!("tree node {i} is missing"))),
                Some(Node::Leaf { .. }) => Ok(i + 1),
                Some(&Node::Split { right, .. }) => {
                    let end_left = walk(nodes, i + 1)?;
                    if right != end_left {
                        return Err(Error::Config(format!(
                            "split at node {i} points right to {right}, expected {end_left}"
                        )));
                    }
                    walk(nodes, right)
                }
            }
        }
        if walk(&nodes, 0)? != nodes.len() {
            return Err(Error::Config("tree has trailing nodes".into()));
        }
        Ok(IsolationTree { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Edges from the root to the deepest leaf.
    pub fn height(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> (usize, usize) {
            match nodes[i] {
                Node::Leaf { .. } => (0, i + 1),
                Node::Split { right, .. } => {
                    let (hl, _) = go(nodes, i + 1);
                    let (hr, end) = go(nodes, right);
                    (1 + hl.max(hr), end)
                }
            }
        }
        go(&self.nodes, 0).0
    }

    /// Depth of the leaf reached by `x` plus `c(leaf size)`.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        let mut depth = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { size } => return depth as f64 + c_factor(size),
                Node::Split { dim, value, right } => {
                    i = if x[dim] < value { i + 1 } else { right };
                    depth += 1;
                }
            }
        }
    }

    /// Grows a tree on `rows[idx]` up to `height_limit` splits deep.
    pub fn grow<R: AsRef<[f64]>>(rows: &[R], idx: &mut [usize], height_limit: usize, rng: &mut DetRng) -> Self {
        let mut nodes = Vec::new();
        grow_into(&mut nodes, rows, idx, 0, height_limit, rng);
        IsolationTree { nodes }
    }
}

fn grow_into<R: AsRef<[f64]>>(
    nodes: &mut Vec<Node>,
    rows: &[R],
    idx: &mut [usize],
    depth: usize,
    limit: usize,
    rng: &mut DetRng,
) {
    let leaf = Node::Leaf { size: idx.len() };
    if depth >= limit || idx.len() <= 1 {
        nodes.push(leaf);
        return;
    }
    let dims = rows[idx[0]].as_ref().len();
    let ranges: Vec<(usize, f64, f64)> = (0..dims)
        .filter_map(|d| {
            let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = rows[i].as_ref()[d];
                (lo.min(v), hi.max(v))
            });
            (lo < hi).then_some((d, lo, hi))
        })
        .collect();
    if ranges.is_empty() {
        nodes.push(leaf);
        return;
    }
    let (dim, lo, hi) = ranges[rng.random_range(0..ranges.len())];
    let value = loop {
        let v = rng.random_range(lo..hi);
        if v > lo && v < hi {
            break v;
        }
    };
    // Partition so that points with x < value come first.
    let mut split = 0;
    for j in 0..idx.len() {
        if rows[idx[j]].as_ref()[dim] < value {
            idx.swap(split, j);
            split += 1;
        }
    }
    let at = nodes.len();
    nodes.push(Node::Split { dim, value, right: 0 });
    let (left, right) = idx.split_at_mut(split);
    grow_into(nodes, rows, left, depth + 1, limit, rng);
    let right_at = nodes.len();
    if let Node::Split { right, .. } = &mut nodes[at] {
        *right = right_at;
    }
    grow_into(nodes, rows, right, depth + 1, limit, rng);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestConfig {
    pub n_estimators: usize,
    /// Points per tree; clamped to the dataset size.
    pub subsample: usize,
    pub contamination: f64,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_estimators: 100,
            subsample: 256,
            contamination: 0.05,
            seed: 0,
        }
    }
}

fn check_contamination(c: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&c) {
        return Err(Error::Config(format!("contamination must lie in [0, 0.5], got {c}")));
    }
    Ok(())
}

/// Number of training points expected above the threshold, `ceil(c * n)`.
pub fn flagged_quota(contamination: f64, n: usize) -> usize {
    // The small slack keeps e.g. 0.05 * 100 from rounding up to 6.
    let k = libm::ceil(contamination * n as f64 - 1e-9);
    (k.max(0.0) as usize).min(n)
}

/// Threshold such that exactly `ceil(c * n)` of `scores` are strictly above
/// it when there are no ties: the next-highest score after the quota.
/// Ties at the threshold stay normal.
pub fn threshold_for(scores: &[f64], contamination: f64) -> Result<f64> {
    check_contamination(contamination)?;
    if scores.is_empty() {
        return Err(Error::Contract("no training scores to threshold".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let k = flagged_quota(contamination, sorted.len());
    Ok(if k >= sorted.len() { 0.0 } else { sorted[k] })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Normal,
    Anomalous,
}

impl Verdict {
    pub fn is_anomalous(self) -> bool {
        self == Verdict::Anomalous
    }
}

/// A fitted forest with its decision threshold and cached training scores.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolationForestModel {
    pub trees: Vec<IsolationTree>,
    pub dims: usize,
    pub n_estimators: usize,
    /// Subsample size actually used, `psi`.
    pub subsample_size: usize,
    pub contamination: f64,
    pub score_threshold: f64,
    pub seed: u64,
    pub training_scores: Vec<f64>,
}

impl IsolationForestModel {
    /// `c(psi)`, the path-length normalizer.
    pub fn c_norm(&self) -> f64 {
        c_factor(self.subsample_size)
    }

    /// Mean path length of `x` over all trees.
    pub fn mean_path_length(&self, x: &[f64]) -> Result<f64> {
        if self.trees.is_empty() {
            return Err(Error::State("isolation forest has no trees".into()));
        }
        if x.len() != self.dims {
            return Err(Error::Contract(format!(
                "point has {} features, forest expects {}",
                x.len(),
                self.dims
            )));
        }
        Ok(self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64)
    }

    /// `2^(-E[h(x)] / c(psi))`; higher is more anomalous.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        let h = self.mean_path_length(x)?;
        Ok(libm::exp2(-h / self.c_norm()))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Verdict> {
        Ok(self.verdict_for(self.score(x)?))
    }

    pub fn verdict_for(&self, score: f64) -> Verdict {
        if score > self.score_threshold {
            Verdict::Anomalous
        } else {
            Verdict::Normal
        }
    }

    /// Same trees, threshold recomputed from the cached training scores.
    pub fn with_contamination(&self, contamination: f64) -> Result<Self> {
        let mut m = self.clone();
        m.score_threshold = threshold_for(&self.training_scores, contamination)?;
        m.contamination = contamination;
        Ok(m)
    }
}

/// Fits `n_estimators` trees, tree `i` seeded with `seed + i`, then sets the
/// threshold from the scores of all training points.
pub fn fit<R: AsRef<[f64]>>(rows: &[R], cfg: &ForestConfig) -> Result<IsolationForestModel> {
    if rows.len() < 2 {
        return Err(Error::Config(format!(
            "isolation forest needs at least 2 training points, got {}",
            rows.len()
        )));
    }
    if cfg.n_estimators == 0 || cfg.subsample < 2 {
        return Err(Error::Config(format!(
            "need at least one estimator and a subsample of 2 or more (got {} and {})",
            cfg.n_estimators, cfg.subsample
        )));
    }
    check_contamination(cfg.contamination)?;
    let dims = rows[0].as_ref().len();
    if dims == 0 {
        return Err(Error::Config("training points have no features".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != dims {
            return Err(Error::Config(format!(
                "training point {i} has {} features, expected {dims}",
                r.len()
            )));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("isolation forest training features"));
        }
    }
    let psi = cfg.subsample.min(rows.len());
    let limit = psi.next_power_of_two().trailing_zeros() as usize;
    let trees = (0..cfg.n_estimators)
        .map(|i| {
            let mut rng = rng_from_seed(cfg.seed.wrapping_add(i as u64));
            let mut idx = index::sample(&mut rng, rows.len(), psi).into_vec();
            IsolationTree::grow(rows, &mut idx, limit, &mut rng)
        })
        .collect();
    let mut model = IsolationForestModel {
        trees,
        dims,
        n_estimators: cfg.n_estimators,
        subsample_size: psi,
        contamination: cfg.contamination,
        score_threshold: 0.0,
        seed: cfg.seed,
        training_scores: Vec::new(),
    };
    model.training_scores = rows.iter().map(|r| model.score(r.as_ref())).collect::<Result<_>>()?;
    model.score_threshold = threshold_for(&model.training_scores, cfg.contamination)?;
    Ok(model)
}
