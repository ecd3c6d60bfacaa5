//! Deterministic CART (Gini impurity), reduced-error pruning and average path length.
//!
//! Trees are binary and axis aligned. Routing rule: `x[feature] <= threshold` goes left.
//! Depth counts the internal decisions on the path from the root, so a root-only tree
//! has depth 0 everywhere.

use std::cmp::Ordering;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// Splits must beat the incumbent by this much; keeps ties on the first candidate.
const IMPURITY_TOL: f64 = 1e-12;

fn default_min_samples_leaf() -> usize {
    5
}

fn default_val_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    #[serde(default)]
    pub seed: u64,
    /// Fraction of features considered at each node; `None` considers all of them.
    #[serde(default)]
    pub max_features: Option<f64>,
    #[serde(default = "default_min_samples_leaf")]
    pub min_samples_leaf: usize,
    #[serde(default)]
    pub max_depth: Option<usize>,
    /// Seeds whose APLs are averaged. Empty means `[seed]`.
    #[serde(default)]
    pub seeds_for_averaging: Vec<u64>,
    /// Share of the distillation set held out for reduced-error pruning; 0 disables pruning.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self::new(0)
    }
}

impl TreeConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            max_features: None,
            min_samples_leaf: default_min_samples_leaf(),
            max_depth: None,
            seeds_for_averaging: vec![seed],
            val_fraction: default_val_fraction(),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds_for_averaging.is_empty() {
            vec![self.seed]
        } else {
            self.seeds_for_averaging.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_samples_leaf == 0 {
            return Err(Error::InvalidInput("min_samples_leaf must be >= 1".into()));
        }
        if let Some(f) = self.max_features {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidInput(format!("max_features must be in (0, 1], got {f}")));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidInput(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Majority training label, used when the node is collapsed by pruning.
        label: u8,
        count: usize,
        positives: usize,
    },
    Leaf {
        label: u8,
        count: usize,
        positives: usize,
    },
}

impl Node {
    fn stats(&self) -> (u8, usize, usize) {
        match *self {
            Node::Split { label, count, positives, .. } | Node::Leaf { label, count, positives } => {
                (label, count, positives)
            }
        }
    }

    fn collapsed(&self) -> Node {
        let (label, count, positives) = self.stats();
        Node::Leaf { label, count, positives }
    }
}

/// Binary tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    n_features: usize,
    nodes: Vec<Node>,
}

fn majority(count: usize, positives: usize) -> u8 {
    // ties go to label 0
    u8::from(2 * positives > count)
}

impl DecisionTree {
    /// Builds a tree from explicit nodes, checking that child links form a tree rooted at 0.
    pub fn from_nodes(n_features: usize, nodes: Vec<Node>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidInput("tree needs at least one node".into()));
        }
        let mut seen = vec![false; nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if i >= nodes.len() || seen[i] {
                return Err(Error::InvalidInput(format!("malformed child link to node {i}")));
            }
            seen[i] = true;
            if let Node::Split { feature, left, right, .. } = nodes[i] {
                if feature >= n_features {
                    return Err(Error::InvalidInput(format!("split feature {feature} out of range")));
                }
                stack.push(left);
                stack.push(right);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidInput("unreachable nodes in tree".into()));
        }
        Ok(Self { n_features, nodes })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Maximum depth over all leaves.
    pub fn max_depth(&self) -> usize {
        let mut best = 0;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((i, d)) = stack.pop() {
            match self.nodes[i] {
                Node::Split { left, right, .. } => {
                    stack.push((left, d + 1));
                    stack.push((right, d + 1));
                }
                Node::Leaf { .. } => best = best.max(d),
            }
        }
        best
    }

    /// Leaf index reached by `x` and the number of decisions taken.
    fn route(&self, x: &[f64]) -> (usize, usize) {
        let mut i = 0;
        let mut depth = 0;
        while let Node::Split { feature, threshold, left, right, .. } = self.nodes[i] {
            i = if x[feature] <= threshold { left } else { right };
            depth += 1;
        }
        (i, depth)
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(shape_err("tree input", self.n_features, x.len()));
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<u8> {
        self.check_len(x)?;
        let (leaf, _) = self.route(x);
        Ok(self.nodes[leaf].stats().0)
    }

    /// Fraction of positive training labels in the reached leaf.
    pub fn predict_score(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        let (leaf, _) = self.route(x);
        let (_, count, positives) = self.nodes[leaf].stats();
        Ok(if count == 0 { 0.0 } else { positives as f64 / count as f64 })
    }

    pub fn get_depth(&self, x: &[f64]) -> Result<usize> {
        self.check_len(x)?;
        Ok(self.route(x).1)
    }

    /// Mean path length over the rows of `x`; 0 for an empty matrix.
    pub fn mean_depth(&self, x: &Matrix) -> Result<f64> {
        if x.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0usize;
        for row in x.iter_rows() {
            total += self.get_depth(row)?;
        }
        Ok(total as f64 / x.rows() as f64)
    }

    pub fn accuracy(&self, x: &Matrix, y: &[u8]) -> Result<f64> {
        if x.rows() != y.len() {
            return Err(shape_err("labels", x.rows(), y.len()));
        }
        if y.is_empty() {
            return Err(Error::InvalidInput("accuracy of an empty set".into()));
        }
        let mut hits = 0usize;
        for (row, &t) in x.iter_rows().zip(y) {
            hits += usize::from(self.predict(row)? == t);
        }
        Ok(hits as f64 / y.len() as f64)
    }

    /// Copies reachable nodes into a fresh preorder arena.
    fn compacted(&self) -> DecisionTree {
        fn copy(src: &[Node], i: usize, out: &mut Vec<Node>) -> usize {
            let at = out.len();
            out.push(src[i]);
            if let Node::Split { left, right, .. } = src[i] {
                let l = copy(src, left, out);
                let r = copy(src, right, out);
                if let Node::Split { left: nl, right: nr, .. } = &mut out[at] {
                    *nl = l;
                    *nr = r;
                }
            }
            at
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        copy(&self.nodes, 0, &mut nodes);
        DecisionTree {
            n_features: self.n_features,
            nodes,
        }
    }
}

fn check_labels(x: &Matrix, y: &[u8]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(shape_err("labels", x.rows(), y.len()));
    }
    if let Some(bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::InvalidInput(format!("labels must be binary, found {bad}")));
    }
    Ok(())
}

struct Builder<'a> {
    x: &'a Matrix,
    y: &'a [u8],
    cfg: &'a TreeConfig,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct Candidate {
    score: f64,
    feature: usize,
    threshold: f64,
}

impl Builder<'_> {
    fn considered_features(&mut self) -> Vec<usize> {
        let p = self.x.cols();
        match self.cfg.max_features {
            None => (0..p).collect(),
            Some(frac) => {
                let k = ((frac * p as f64).ceil() as usize).clamp(1, p);
                if k == p {
                    return (0..p).collect();
                }
                let mut feats = index::sample(&mut self.rng, p, k).into_vec();
                feats.sort_unstable();
                feats
            }
        }
    }

    fn best_split(&mut self, idx: &mut [usize], positives: usize) -> Option<Candidate> {
        let n = idx.len();
        let msl = self.cfg.min_samples_leaf;
        let parent = 2.0 * positives as f64 * (n - positives) as f64 / (n * n) as f64;
        let mut best: Option<Candidate> = None;
        for f in self.considered_features() {
            let x = self.x;
            idx.sort_unstable_by(|&a, &b| x.get(a, f).total_cmp(&x.get(b, f)));
            let mut left_pos = 0usize;
            for i in 0..n - 1 {
                left_pos += usize::from(self.y[idx[i]]);
                let (lo, hi) = (x.get(idx[i], f), x.get(idx[i + 1], f));
                if lo.total_cmp(&hi) != Ordering::Less {
                    continue;
                }
                let nl = i + 1;
                let nr = n - nl;
                if nl < msl || nr < msl {
                    continue;
                }
                let rp = positives - left_pos;
                let gl = 2.0 * left_pos as f64 * (nl - left_pos) as f64 / nl as f64;
                let gr = 2.0 * rp as f64 * (nr - rp) as f64 / nr as f64;
                let score = (gl + gr) / n as f64;
                if score < parent - IMPURITY_TOL
                    && best.as_ref().is_none_or(|b| score < b.score - IMPURITY_TOL)
                {
                    let mut threshold = 0.5 * (lo + hi);
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(Candidate { score, feature: f, threshold });
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let n = idx.len();
        let positives = idx.iter().map(|&i| usize::from(self.y[i])).sum::<usize>();
        let label = majority(n, positives);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { label, count: n, positives });

        let pure = positives == 0 || positives == n;
        let depth_capped = self.cfg.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_capped || n < 2 * self.cfg.min_samples_leaf {
            return at;
        }
        let Some(split) = self.best_split(idx, positives) else {
            return at;
        };
        let x = self.x;
        let (mut left, mut right): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| x.get(i, split.feature) <= split.threshold);
        let l = self.grow(&mut left, depth + 1);
        let r = self.grow(&mut right, depth + 1);
        self.nodes[at] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
            label,
            count: n,
            positives,
        };
        at
    }
}

/// Greedy CART on binary labels.
pub fn train_tree(x: &Matrix, y: &[u8], cfg: &TreeConfig) -> Result<DecisionTree> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::InvalidInput("cannot fit a tree on an empty dataset".into()));
    }
    check_labels(x, y)?;
    let mut b = Builder {
        x,
        y,
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        nodes: Vec::new(),
    };
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    b.grow(&mut idx, 0);
    Ok(DecisionTree {
        n_features: x.cols(),
        nodes: b.nodes,
    })
}

/// Reduced-error pruning: collapse any internal node whose majority leaf makes no more
/// validation errors than its subtree, bottom-up, until nothing changes.
pub fn prune_tree(tree: &DecisionTree, x_val: &Matrix, y_val: &[u8]) -> Result<DecisionTree> {
    if x_val.is_empty() {
        return Err(Error::InvalidInput("pruning needs a non-empty validation set".into()));
    }
    check_labels(x_val, y_val)?;
    if x_val.cols() != tree.n_features {
        return Err(shape_err("validation features", tree.n_features, x_val.cols()));
    }

    // per-node validation counts: (examples reaching the node, positives among them)
    let mut reach = vec![(0usize, 0usize); tree.nodes.len()];
    for (row, &t) in x_val.iter_rows().zip(y_val) {
        let mut i = 0;
        loop {
            reach[i].0 += 1;
            reach[i].1 += usize::from(t);
            match tree.nodes[i] {
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if row[feature] <= threshold { left } else { right };
                }
                Node::Leaf { .. } => break,
            }
        }
    }

    fn errors_as_leaf(node: &Node, reach: (usize, usize)) -> usize {
        let (label, _, _) = node.stats();
        if label == 1 {
            reach.0 - reach.1
        } else {
            reach.1
        }
    }

    // post-order pass; returns the validation errors of the (possibly pruned) subtree
    fn pass(nodes: &mut [Node], reach: &[(usize, usize)], i: usize, changed: &mut bool) -> usize {
        match nodes[i] {
            Node::Leaf { .. } => errors_as_leaf(&nodes[i], reach[i]),
            Node::Split { left, right, .. } => {
                let sub = pass(nodes, reach, left, changed) + pass(nodes, reach, right, changed);
                let leaf = errors_as_leaf(&nodes[i], reach[i]);
                if leaf <= sub {
                    nodes[i] = nodes[i].collapsed();
                    *changed = true;
                    leaf
                } else {
                    sub
                }
            }
        }
    }

    let mut nodes = tree.nodes.clone();
    loop {
        let mut changed = false;
        pass(&mut nodes, &reach, 0, &mut changed);
        if !changed {
            break;
        }
    }
    Ok(DecisionTree {
        n_features: tree.n_features,
        nodes,
    }
    .compacted())
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(u, v)| u.total_cmp(v))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Splits rows into (fit, validation) index sets with a seeded shuffle of a canonical
/// ordering, so the split depends on the example multiset and not on row order.
fn distillation_split(x: &Matrix, y: &[u8], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = x.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lexicographic(x.row(a), x.row(b)).then(y[a].cmp(&y[b])));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if val_fraction > 0.0 && n >= 2 {
        ((n as f64 * val_fraction).floor() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let val = order[..n_val].to_vec();
    let fit = order[n_val..].to_vec();
    (fit, val)
}

/// Fits and prunes one tree with `seed` driving both the split and the feature sampling.
fn fit_pruned_with_seed(x: &Matrix, y: &[u8], cfg: &TreeConfig, seed: u64) -> Result<DecisionTree> {
    let (fit, val) = distillation_split(x, y, cfg.val_fraction, seed);
    let fx = x.select_rows(&fit);
    let fy: Vec<u8> = fit.iter().map(|&i| y[i]).collect();
    let seeded = TreeConfig { seed, ..cfg.clone() };
    let tree = train_tree(&fx, &fy, &seeded)?;
    if val.is_empty() {
        return Ok(tree);
    }
    let vx = x.select_rows(&val);
    let vy: Vec<u8> = val.iter().map(|&i| y[i]).collect();
    prune_tree(&tree, &vx, &vy)
}

/// The distillation pipeline: split, fit, prune. Uses the first averaging seed.
pub fn fit_pruned(x: &Matrix, y: &[u8], cfg: &TreeConfig) -> Result<DecisionTree> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::InvalidInput("cannot fit a tree on an empty dataset".into()));
    }
    check_labels(x, y)?;
    fit_pruned_with_seed(x, y, cfg, cfg.seeds()[0])
}

/// Average decision path length of a pruned tree fitted to the given labels, evaluated
/// on all rows and averaged across the configured seeds.
pub fn apl_from_labels(x: &Matrix, y: &[u8], cfg: &TreeConfig) -> Result<f64> {
    cfg.validate()?;
    if x.rows() < 2 {
        return Err(Error::InvalidInput(format!("APL needs at least 2 examples, got {}", x.rows())));
    }
    check_labels(x, y)?;
    if y.iter().all(|&v| v == y[0]) {
        return Ok(0.0);
    }
    let seeds = cfg.seeds();
    let mut total = 0.0;
    for &s in &seeds {
        total += fit_pruned_with_seed(x, y, cfg, s)?.mean_depth(x)?;
    }
    Ok(total / seeds.len() as f64)
}

/// APL of an arbitrary binary predictor on `x`.
pub fn apl<F>(x: &Matrix, predict_fn: F, cfg: &TreeConfig) -> Result<f64>
where
    F: Fn(&[f64]) -> bool,
{
    let y: Vec<u8> = x.iter_rows().map(|r| u8::from(predict_fn(r))).collect();
    apl_from_labels(x, &y, cfg)
}
