//! CART decision trees with Gini impurity and a bagged forest of them.
//!
//! Trees are stored as flat node arrays (root at index 0) so a trained
//! forest serializes to a plain document and reloads bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scaler::ScalerParams;
use super::{FastEwqError, Result, FEATURE_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Class counts of the training samples reaching this node.
        counts: [u64; 2],
    },
    Leaf {
        counts: [u64; 2],
    },
}

impl Node {
    pub fn counts(&self) -> [u64; 2] {
        match self {
            Node::Split { counts, .. } | Node::Leaf { counts } => *counts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: None,
            min_samples_split: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

fn gini(counts: [u64; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p0 = counts[0] as f64 / n;
    let p1 = counts[1] as f64 / n;
    1.0 - p0 * p0 - p1 * p1
}

fn class_counts(labels: &[u8], idx: &[usize]) -> [u64; 2] {
    let ones = idx.iter().filter(|&&i| labels[i] == 1).count() as u64;
    [idx.len() as u64 - ones, ones]
}

/// Majority class; ties go to 0.
fn majority(counts: [u64; 2]) -> u8 {
    u8::from(counts[1] > counts[0])
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

fn best_split(x: &[[f64; 3]], y: &[u8], idx: &[usize]) -> Option<BestSplit> {
    let n = idx.len() as f64;
    let mut best: Option<BestSplit> = None;
    let mut order = idx.to_vec();
    #[allow(clippy::needless_range_loop)]
    for feature in 0..3 {
        order.sort_by(|&a, &b| x[a][feature].total_cmp(&x[b][feature]).then(a.cmp(&b)));
        let total = class_counts(y, &order);
        let mut left = [0u64; 2];
        for k in 0..order.len() - 1 {
            left[y[order[k]] as usize] += 1;
            let lo = x[order[k]][feature];
            let hi = x[order[k + 1]][feature];
            if lo == hi {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let nl = (k + 1) as f64;
            let impurity = (nl * gini(left) + (n - nl) * gini(right)) / n;
            if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                let mut threshold = lo + (hi - lo) / 2.0;
                if !(threshold >= lo && threshold < hi) {
                    threshold = lo;
                }
                best = Some(BestSplit {
                    feature,
                    threshold,
                    impurity,
                });
            }
        }
    }
    best
}

impl DecisionTree {
    /// Fits a tree on the rows of `x` selected by `idx` (repeats allowed).
    pub fn fit_indices(x: &[[f64; 3]], y: &[u8], idx: &[usize], params: &TreeParams) -> Self {
        let mut nodes = Vec::new();
        grow(x, y, idx.to_vec(), 0, params, &mut nodes);
        Self { nodes }
    }

    pub fn fit(x: &[[f64; 3]], y: &[u8], params: &TreeParams) -> Self {
        let idx: Vec<usize> = (0..x.len()).collect();
        Self::fit_indices(x, y, &idx, params)
    }

    /// A tree that always answers `class`.
    pub fn constant(class: u8) -> Self {
        let mut counts = [0; 2];
        counts[class as usize] = 1;
        Self {
            nodes: vec![Node::Leaf { counts }],
        }
    }

    pub fn leaf_counts(&self, x: &[f64; 3]) -> [u64; 2] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { counts } => return *counts,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    at = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn predict(&self, x: &[f64; 3]) -> u8 {
        majority(self.leaf_counts(x))
    }

    /// Weighted impurity decrease per feature, unnormalized.
    pub fn impurity_decrease(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        let Some(root) = self.nodes.first() else {
            return out;
        };
        let n_root = root.counts().iter().sum::<u64>() as f64;
        for node in &self.nodes {
            if let Node::Split {
                feature,
                left,
                right,
                counts,
                ..
            } = node
            {
                let size = |c: [u64; 2]| (c[0] + c[1]) as f64;
                let (l, r) = (self.nodes[*left].counts(), self.nodes[*right].counts());
                let decrease =
                    size(*counts) * gini(*counts) - size(l) * gini(l) - size(r) * gini(r);
                out[*feature] += decrease / n_root;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(FastEwqError::InvalidModel("empty tree".into()));
        }
        for node in &self.nodes {
            match node {
                Node::Split {
                    feature,
                    left,
                    right,
                    ..
                } => {
                    if *feature >= 3 || *left >= self.nodes.len() || *right >= self.nodes.len() {
                        return Err(FastEwqError::InvalidModel("split node out of range".into()));
                    }
                }
                Node::Leaf { counts } => {
                    if counts[0] + counts[1] == 0 {
                        return Err(FastEwqError::InvalidModel("leaf with no samples".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

fn grow(
    x: &[[f64; 3]],
    y: &[u8],
    idx: Vec<usize>,
    depth: usize,
    params: &TreeParams,
    nodes: &mut Vec<Node>,
) -> usize {
    let counts = class_counts(y, &idx);
    let at = nodes.len();
    nodes.push(Node::Leaf { counts });
    let depth_ok = params.max_depth.is_none_or(|d| depth < d);
    if !depth_ok || idx.len() < params.min_samples_split.max(2) || gini(counts) == 0.0 {
        return at;
    }
    let Some(split) = best_split(x, y, &idx) else {
        return at;
    };
    let (l, r): (Vec<usize>, Vec<usize>) = idx
        .iter()
        .partition(|&&i| x[i][split.feature] <= split.threshold);
    let left = grow(x, y, l, depth + 1, params, nodes);
    let right = grow(x, y, r, depth + 1, params, nodes);
    nodes[at] = Node::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
        counts,
    };
    at
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_split: 2,
            bootstrap: true,
            seed: 0,
        }
    }
}

/// Class and the fraction of trees voting 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: u8,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub seed: u64,
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub feature_names: Vec<String>,
    pub scaler: ScalerParams,
    pub trees: Vec<DecisionTree>,
}

impl ForestModel {
    /// Assembles a forest from already-built trees.
    pub fn from_trees(trees: Vec<DecisionTree>, scaler: ScalerParams) -> Self {
        Self {
            seed: 0,
            n_trees: trees.len(),
            max_depth: None,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            scaler,
            trees,
        }
    }

    /// Trains on already-scaled features; tree `t` draws its bootstrap
    /// sample from its own ChaCha stream, so output does not depend on
    /// thread scheduling.
    pub fn fit_scaled(
        x: &[[f64; 3]],
        y: &[u8],
        scaler: ScalerParams,
        params: &ForestParams,
    ) -> Self {
        let tree_params = TreeParams {
            max_depth: params.max_depth,
            min_samples_split: params.min_samples_split,
        };
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let idx: Vec<usize> = if params.bootstrap {
                    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
                    rng.set_stream(t as u64 + 1);
                    (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect()
                } else {
                    (0..x.len()).collect()
                };
                DecisionTree::fit_indices(x, y, &idx, &tree_params)
            })
            .collect();
        Self {
            seed: params.seed,
            n_trees: params.n_trees,
            max_depth: params.max_depth,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            scaler,
            trees,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trees.is_empty() {
            return Err(FastEwqError::Unfitted);
        }
        self.trees.iter().try_for_each(DecisionTree::validate)
    }

    /// `features` are raw (num_parameters, exec_index, num_blocks).
    pub fn predict(&self, features: &[f64; 3]) -> Result<Prediction> {
        if self.trees.is_empty() {
            return Err(FastEwqError::Unfitted);
        }
        let z = self.scaler.transform(features);
        let votes = self.trees.iter().filter(|t| t.predict(&z) == 1).count();
        let score = votes as f64 / self.trees.len() as f64;
        Ok(Prediction {
            // A tied vote keeps the block unquantized.
            class: u8::from(2 * votes > self.trees.len()),
            score,
        })
    }

    /// Mean impurity decrease per feature, normalized to sum to 1. All zeros
    /// when no tree has a split.
    pub fn feature_importance(&self) -> Result<[f64; 3]> {
        if self.trees.is_empty() {
            return Err(FastEwqError::Unfitted);
        }
        let mut total = [0.0; 3];
        for tree in &self.trees {
            let d = tree.impurity_decrease();
            let s: f64 = d.iter().sum();
            if s > 0.0 {
                for j in 0..3 {
                    total[j] += d[j] / s;
                }
            }
        }
        let s: f64 = total.iter().sum();
        if s > 0.0 {
            for v in &mut total {
                *v /= s;
            }
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_tree(class: u8) -> DecisionTree {
        DecisionTree::constant(class)
    }

    #[test]
    fn majority_vote_and_tie() {
        let f = ForestModel::from_trees(
            vec![leaf_tree(1), leaf_tree(1), leaf_tree(0)],
            ScalerParams::identity(),
        );
        let p = f.predict(&[0.0; 3]).unwrap();
        assert_eq!(p.class, 1);
        assert_eq!(p.score, 2.0 / 3.0);

        let f = ForestModel::from_trees(vec![leaf_tree(1), leaf_tree(0)], ScalerParams::identity());
        let p = f.predict(&[0.0; 3]).unwrap();
        assert_eq!((p.class, p.score), (0, 0.5));
    }

    #[test]
    fn unfitted_forest() {
        let f = ForestModel::from_trees(vec![], ScalerParams::identity());
        assert!(matches!(f.predict(&[0.0; 3]), Err(FastEwqError::Unfitted)));
        assert!(matches!(
            f.feature_importance(),
            Err(FastEwqError::Unfitted)
        ));
    }

    #[test]
    fn single_record_is_memorized() {
        let x = [[3.0, 7.0, 1.0]];
        for label in [0u8, 1] {
            let t = DecisionTree::fit(&x, &[label], &TreeParams::default());
            assert_eq!(t.predict(&x[0]), label);
        }
    }

    #[test]
    fn depth_zero_tree_is_majority() {
        let x: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let y = [1, 1, 1, 0, 0, 1, 1, 0, 1, 1];
        let t = DecisionTree::fit(
            &x,
            &y,
            &TreeParams {
                max_depth: Some(0),
                min_samples_split: 2,
            },
        );
        assert_eq!(t.nodes.len(), 1);
        assert!(x.iter().all(|r| t.predict(r) == 1));
    }

    #[test]
    fn unlimited_tree_memorizes_distinct_rows() {
        let x: Vec<[f64; 3]> = (0..40)
            .map(|i| [((i * 37) % 11) as f64, (i % 5) as f64, i as f64])
            .collect();
        let y: Vec<u8> = (0..40).map(|i| ((i * 7 + 3) % 3 == 0) as u8).collect();
        let t = DecisionTree::fit(&x, &y, &TreeParams::default());
        for (r, &l) in x.iter().zip(&y) {
            assert_eq!(t.predict(r), l);
        }
        t.validate().unwrap();
    }

    #[test]
    fn split_threshold_between_values() {
        let x = [
            [0.0, 1.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, 5.0, 0.0],
            [0.0, 6.0, 0.0],
        ];
        let t = DecisionTree::fit(&x, &[0, 0, 1, 1], &TreeParams::default());
        match &t.nodes[0] {
            Node::Split {
                feature, threshold, ..
            } => assert_eq!((*feature, *threshold), (1, 3.5)),
            other => panic!("expected split, got {other:?}"),
        }
        assert_eq!(t.impurity_decrease(), [0.0, 0.5, 0.0]);
    }

    #[test]
    fn training_is_reproducible() {
        let x: Vec<[f64; 3]> = (0..60)
            .map(|i| [(i % 9) as f64, (i % 13) as f64, i as f64])
            .collect();
        let y: Vec<u8> = (0..60).map(|i| (i % 13 > 6) as u8).collect();
        let params = ForestParams {
            n_trees: 16,
            seed: 42,
            ..ForestParams::default()
        };
        let a = ForestModel::fit_scaled(&x, &y, ScalerParams::identity(), &params);
        let b = ForestModel::fit_scaled(&x, &y, ScalerParams::identity(), &params);
        assert_eq!(a, b);
        let c = ForestModel::fit_scaled(
            &x,
            &y,
            ScalerParams::identity(),
            &ForestParams { seed: 43, ..params },
        );
        assert_ne!(a.trees, c.trees);
    }

    #[test]
    fn importance_sums_to_one() {
        let x: Vec<[f64; 3]> = (0..80)
            .map(|i| {
                [
                    ((i * 31) % 17) as f64,
                    (i % 20) as f64,
                    ((i * 7) % 5) as f64,
                ]
            })
            .collect();
        let y: Vec<u8> = (0..80).map(|i| ((i % 20) > 9) as u8).collect();
        let f = ForestModel::fit_scaled(
            &x,
            &y,
            ScalerParams::identity(),
            &ForestParams {
                n_trees: 10,
                seed: 3,
                ..Default::default()
            },
        );
        let imp = f.feature_importance().unwrap();
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(imp[1] > 0.9);
    }
}
