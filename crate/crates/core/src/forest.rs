//! Regression trees and random forests over dense `f64` feature rows.
//!
//! Trees grow by recursive binary splitting on (feature, threshold) pairs that
//! minimize the summed within-child squared error, each tree on a bootstrap
//! resample with a random feature subset per split. Growth continues until a
//! node is pure, indivisible, or the depth limit is hit, so a single
//! unrestricted tree memorizes distinct training rows exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rule for merging per-tree outputs into one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ForestAggregation {
    /// Arithmetic mean of tree outputs, the regression default.
    #[default]
    Mean,
    /// Mode of tree outputs after rounding to the nearest minute.
    Modal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ForestConfig {
    pub tree_count: usize,
    /// Features examined per split; `None` means ceil(d/3).
    pub max_features_per_split: Option<usize>,
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
    pub aggregation: ForestAggregation,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            tree_count: 100,
            max_features_per_split: None,
            min_samples_leaf: 1,
            max_depth: None,
            bootstrap: true,
            aggregation: ForestAggregation::Mean,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("row has {got} features, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("x length {x_len} is not a multiple of width {width} matching {y_len} targets")]
    ShapeMismatch {
        x_len: usize,
        width: usize,
        y_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn leaf_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { value } => Some(*value),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<RegressionTree>,
    n_features: usize,
    pub aggregation: ForestAggregation,
}

impl RandomForest {
    /// Fits `cfg.tree_count` trees on the row-major matrix `x` (`width`
    /// features per row). Deterministic for a fixed seed.
    pub fn fit(
        x: &[f64],
        width: usize,
        y: &[f64],
        cfg: &ForestConfig,
    ) -> Result<RandomForest, ForestError> {
        if y.is_empty() || width == 0 {
            return Err(ForestError::EmptyTrainingSet);
        }
        if x.len() != y.len() * width {
            return Err(ForestError::ShapeMismatch {
                x_len: x.len(),
                width,
                y_len: y.len(),
            });
        }
        let mtry = cfg
            .max_features_per_split
            .unwrap_or_else(|| width.div_ceil(3))
            .clamp(1, width);

        let trees = (0..cfg.tree_count)
            .map(|t| {
                let mut rng = ChaCha12Rng::seed_from_u64(
                    cfg.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let rows: Vec<u32> = if cfg.bootstrap {
                    (0..y.len())
                        .map(|_| rng.random_range(0..y.len()) as u32)
                        .collect()
                } else {
                    (0..y.len() as u32).collect()
                };
                grow_tree(x, width, y, rows, mtry, cfg, &mut rng)
            })
            .collect();

        Ok(RandomForest {
            trees,
            n_features: width,
            aggregation: cfg.aggregation,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    /// Raw per-tree outputs for one row.
    pub fn tree_predictions(&self, row: &[f64]) -> Result<Vec<f64>, ForestError> {
        if row.len() != self.n_features {
            return Err(ForestError::DimensionMismatch {
                expected: self.n_features,
                got: row.len(),
            });
        }
        Ok(self.trees.iter().map(|t| t.predict(row)).collect())
    }

    /// Mean-aggregated prediction; modal aggregation happens at the predictor
    /// layer where outputs are back in duration units.
    pub fn predict_mean(&self, row: &[f64]) -> Result<f64, ForestError> {
        let preds = self.tree_predictions(row)?;
        Ok(preds.iter().sum::<f64>() / preds.len() as f64)
    }
}

struct BuildItem {
    /// Sample range into every per-feature order array.
    start: usize,
    end: usize,
    depth: usize,
    /// Slot in `nodes` to overwrite with this subtree's root.
    slot: usize,
}

fn grow_tree(
    x: &[f64],
    width: usize,
    y: &[f64],
    rows: Vec<u32>,
    mtry: usize,
    cfg: &ForestConfig,
    rng: &mut ChaCha12Rng,
) -> RegressionTree {
    let feat = |row: u32, f: usize| x[row as usize * width + f];
    let n_total = rows.len();

    // One index array per feature, each sorted by that feature once.
    // Every node is a range [start, end) shared by all arrays; splitting
    // partitions each array stably in place, so the sort order survives and
    // no per-node allocation happens.
    let mut order: Vec<Vec<u32>> = (0..width)
        .map(|f| {
            let mut ids = rows.clone();
            ids.sort_by(|&a, &b| feat(a, f).partial_cmp(&feat(b, f)).unwrap());
            ids
        })
        .collect();
    let mut scratch: Vec<u32> = Vec::with_capacity(n_total);

    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut stack = vec![BuildItem {
        start: 0,
        end: n_total,
        depth: 0,
        slot: 0,
    }];
    let mut feature_pool: Vec<usize> = (0..width).collect();
    let min_leaf = cfg.min_samples_leaf.max(1);

    while let Some(item) = stack.pop() {
        let ids = &order[0][item.start..item.end];
        let n = ids.len();
        let sum: f64 = ids.iter().map(|&r| y[r as usize]).sum();
        let mean = sum / n as f64;

        let pure = ids.iter().all(|&r| y[r as usize] == y[ids[0] as usize]);
        let depth_capped = cfg.max_depth.is_some_and(|d| item.depth >= d);
        let too_small = n < 2 * min_leaf;

        let split = if pure || depth_capped || too_small {
            None
        } else {
            // Random feature order; the first mtry are the draw, the rest are
            // fallbacks examined only while no valid split has been found.
            feature_pool.shuffle(rng);
            let mut best: Option<(f64, usize, f64, usize)> = None;
            for (seen, &f) in feature_pool.iter().enumerate() {
                if seen >= mtry && best.is_some() {
                    break;
                }
                if let Some((score, thr, left_len)) = best_split_on(
                    &order[f][item.start..item.end],
                    y,
                    |r| feat(r, f),
                    sum,
                    min_leaf,
                ) {
                    if best.as_ref().is_none_or(|b| score > b.0) {
                        best = Some((score, f, thr, left_len));
                    }
                }
            }
            best
        };

        match split {
            None => nodes[item.slot] = Node::Leaf { value: mean },
            Some((_, f, threshold, left_len)) => {
                // Stable in-place partition of every feature's range: keep
                // left-goers in order at the front, spill right-goers to the
                // scratch buffer, copy them back behind.
                for list in order.iter_mut() {
                    scratch.clear();
                    let slice = &mut list[item.start..item.end];
                    let mut write = 0;
                    for read in 0..slice.len() {
                        let id = slice[read];
                        if feat(id, f) <= threshold {
                            slice[write] = id;
                            write += 1;
                        } else {
                            scratch.push(id);
                        }
                    }
                    slice[write..].copy_from_slice(&scratch);
                }

                let left_slot = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                let right_slot = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[item.slot] = Node::Split {
                    feature: f as u32,
                    threshold,
                    left: left_slot as u32,
                    right: right_slot as u32,
                };
                stack.push(BuildItem {
                    start: item.start + left_len,
                    end: item.end,
                    depth: item.depth + 1,
                    slot: right_slot,
                });
                stack.push(BuildItem {
                    start: item.start,
                    end: item.start + left_len,
                    depth: item.depth + 1,
                    slot: left_slot,
                });
            }
        }
    }

    RegressionTree { nodes }
}

/// Best threshold on one feature for the rows in `ids` (pre-sorted by the
/// feature). Maximizes sumL^2/nL + sumR^2/nR, the part of the SSE reduction
/// that varies with the split. Returns `(score, threshold, left_len)`.
fn best_split_on(
    ids: &[u32],
    y: &[f64],
    value: impl Fn(u32) -> f64,
    total_sum: f64,
    min_leaf: usize,
) -> Option<(f64, f64, usize)> {
    let n = ids.len();
    let mut best: Option<(f64, f64, usize)> = None;
    let mut left_sum = 0.0;
    for i in 0..n - 1 {
        left_sum += y[ids[i] as usize];
        let left_n = i + 1;
        let right_n = n - left_n;
        if left_n < min_leaf || right_n < min_leaf {
            continue;
        }
        let v_here = value(ids[i]);
        let v_next = value(ids[i + 1]);
        if v_here == v_next {
            continue;
        }
        let right_sum = total_sum - left_sum;
        let score = left_sum * left_sum / left_n as f64 + right_sum * right_sum / right_n as f64;
        if best.as_ref().is_none_or(|b| score > b.0) {
            // Midpoint keeps both sides strictly on their own half.
            best = Some((score, v_here + (v_next - v_here) / 2.0, left_n));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fit(x: &[f64], width: usize, y: &[f64], cfg: &ForestConfig) -> RandomForest {
        RandomForest::fit(x, width, y, cfg).unwrap()
    }

    #[test]
    fn single_unrestricted_tree_memorizes_distinct_rows() {
        let x = [0.0, 1.0, 1.0, 0.0, 2.0, 5.0, 3.0, 2.0, 4.0, 4.0];
        let y = [10.0, 20.0, 5.0, 40.0, 80.0];
        let cfg = ForestConfig {
            tree_count: 1,
            max_features_per_split: Some(2),
            bootstrap: false,
            ..ForestConfig::default()
        };
        let forest = fit(&x, 2, &y, &cfg);
        let mse: f64 = (0..y.len())
            .map(|i| {
                let p = forest.predict_mean(&x[i * 2..i * 2 + 2]).unwrap();
                (p - y[i]).powi(2)
            })
            .sum::<f64>()
            / y.len() as f64;
        assert_eq!(mse, 0.0);
    }

    #[test]
    fn constant_targets_predict_the_constant() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y = vec![7.0; 20];
        let forest = fit(&x, 1, &y, &ForestConfig::default());
        for i in 0..20 {
            assert_eq!(forest.predict_mean(&[i as f64]).unwrap(), 7.0);
        }
    }

    #[test]
    fn two_point_forest_stays_within_target_range() {
        let x = [0.0, 1.0];
        let y = [0.0, 100.0];
        let forest = fit(&x, 1, &y, &ForestConfig::default());
        // Exhaustive leaf audit: every leaf is an average of training targets,
        // so it lies within [0, 100].
        for tree in forest.trees() {
            for leaf in tree.leaf_values() {
                assert!((0.0..=100.0).contains(&leaf), "leaf {leaf} out of range");
            }
        }
        for probe in [0.0, 1.0] {
            let p = forest.predict_mean(&[probe]).unwrap();
            assert!((0.0..=100.0).contains(&p));
        }
    }

    #[test]
    fn single_tree_forest_returns_the_leaf_value() {
        let x = [1.0, 2.0, 3.0];
        let y = [4.0, 8.0, 16.0];
        let cfg = ForestConfig {
            tree_count: 1,
            bootstrap: false,
            max_features_per_split: Some(1),
            ..ForestConfig::default()
        };
        let forest = fit(&x, 1, &y, &cfg);
        let per_tree = forest.tree_predictions(&[2.0]).unwrap();
        assert_eq!(per_tree.len(), 1);
        assert_eq!(forest.predict_mean(&[2.0]).unwrap(), per_tree[0]);
    }

    #[test]
    fn seeded_fit_is_bit_identical() {
        let x: Vec<f64> = (0..60).map(|i| (i % 13) as f64).collect();
        let y: Vec<f64> = (0..30).map(|i| (i * i % 17) as f64).collect();
        let cfg = ForestConfig {
            tree_count: 10,
            seed: 99,
            ..ForestConfig::default()
        };
        let a = fit(&x, 2, &y, &cfg);
        let b = fit(&x, 2, &y, &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let forest = fit(&[0.0, 1.0], 1, &[1.0, 2.0], &ForestConfig::default());
        assert_eq!(
            forest.tree_predictions(&[0.0, 1.0]),
            Err(ForestError::DimensionMismatch {
                expected: 1,
                got: 2
            })
        );
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert_eq!(
            RandomForest::fit(&[], 1, &[], &ForestConfig::default()),
            Err(ForestError::EmptyTrainingSet)
        );
    }

    #[test]
    fn depth_limit_caps_the_tree() {
        let x: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let cfg = ForestConfig {
            tree_count: 1,
            bootstrap: false,
            max_depth: Some(2),
            max_features_per_split: Some(1),
            ..ForestConfig::default()
        };
        let forest = fit(&x, 1, &y, &cfg);
        // Depth 2 allows at most 4 leaves.
        assert!(forest.trees()[0].leaf_values().count() <= 4);
    }

    proptest! {
        /// Under mean aggregation every prediction lies within the training
        /// target range, because leaves average training targets.
        #[test]
        fn predictions_bounded_by_target_range(
            data in prop::collection::vec((0.0f64..100.0, -50.0f64..50.0), 2..40),
            probe in 0.0f64..100.0,
            seed in 0u64..500,
        ) {
            let x: Vec<f64> = data.iter().map(|(a, _)| *a).collect();
            let y: Vec<f64> = data.iter().map(|(_, b)| *b).collect();
            let cfg = ForestConfig { tree_count: 5, seed, ..ForestConfig::default() };
            let forest = fit(&x, 1, &y, &cfg);
            let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = forest.predict_mean(&[probe]).unwrap();
            prop_assert!(p >= lo - 1e-9 && p <= hi + 1e-9);
        }
    }
}
