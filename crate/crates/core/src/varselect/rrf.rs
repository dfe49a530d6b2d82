//! Regularized random forests: split gains on features outside the
//! forest-global used set are multiplied by a penalty in [0, 1], and
//! per-feature importances (average informational gain) scale the selected
//! columns of the matching space.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Forest hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RrfParams {
    pub n_trees: usize,
    /// Split candidates per node; `None` means ceil(sqrt(k)).
    pub mtry: Option<usize>,
    pub max_depth: usize,
    /// Minimum node size eligible for splitting.
    pub min_node: usize,
    /// Bootstrap-resample each tree's training rows.
    pub bootstrap: bool,
}

impl Default for RrfParams {
    fn default() -> Self {
        RrfParams {
            n_trees: 100,
            mtry: None,
            max_depth: 8,
            min_node: 10,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForestTarget {
    /// Regression trees on the outcome (variance-reduction gain).
    Outcome,
    /// Classification trees on the treatment label (entropy gain).
    Treatment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_row(&self, row: ndarray::ArrayView1<f64>) -> f64 {
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
                    at = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

/// A fitted regularized forest: trees, the selected feature set F, and
/// per-feature average informational gain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RrfFit {
    pub lambda: f64,
    pub target: ForestTarget,
    /// Features used in at least one split, ascending.
    pub selected: Vec<usize>,
    /// c_j: average raw gain over all splits on feature j (0 when unused).
    pub importance: Vec<f64>,
    /// (lambda, mean CV loss); empty when no cross-validation was run.
    pub cv_curve: Vec<(f64, f64)>,
    trees: Vec<Tree>,
}

impl RrfFit {
    /// Mean tree prediction (regression value or class-1 probability).
    pub fn predict_row(&self, row: ndarray::ArrayView1<f64>) -> f64 {
        self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / self.trees.len() as f64
    }

    #[cfg(test)]
    pub(crate) fn for_test(selected: Vec<usize>, importance: Vec<f64>, target: ForestTarget) -> Self {
        RrfFit {
            lambda: 1.0,
            target,
            selected,
            importance,
            cv_curve: Vec::new(),
            trees: Vec::new(),
        }
    }
}

fn entropy(pos: f64, total: f64) -> f64 {
    if total == 0.0 {
        return 0.0;
    }
    let p = pos / total;
    let mut h = 0.0;
    for q in [p, 1.0 - p] {
        if q > 0.0 {
            h -= q * q.log2();
        }
    }
    h
}

/// Best (gain, threshold) for one feature at one node, or None when no split
/// separates the rows. Gain is variance reduction for regression, information
/// gain for classification, both per node observation.
fn best_split_on_feature(
    values: &mut Vec<(f64, f64)>, // (x value, target), sorted in place
    target: ForestTarget,
) -> Option<(f64, f64)> {
    let m = values.len();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    if values[0].0 == values[m - 1].0 {
        return None;
    }
    let total_sum: f64 = values.iter().map(|v| v.1).sum();
    let total_sq: f64 = values.iter().map(|v| v.1 * v.1).sum();
    let mf = m as f64;
    let parent = match target {
        ForestTarget::Outcome => total_sq / mf - (total_sum / mf) * (total_sum / mf),
        ForestTarget::Treatment => entropy(total_sum, mf),
    };
    let mut best: Option<(f64, f64)> = None;
    let mut left_sum = 0.0;
    let mut left_sq = 0.0;
    for i in 0..m - 1 {
        left_sum += values[i].1;
        left_sq += values[i].1 * values[i].1;
        if values[i].0 == values[i + 1].0 {
            continue;
        }
        let nl = (i + 1) as f64;
        let nr = mf - nl;
        let child = match target {
            ForestTarget::Outcome => {
                let right_sum = total_sum - left_sum;
                let right_sq = total_sq - left_sq;
                let var_l = left_sq / nl - (left_sum / nl) * (left_sum / nl);
                let var_r = right_sq / nr - (right_sum / nr) * (right_sum / nr);
                (nl / mf) * var_l + (nr / mf) * var_r
            }
            ForestTarget::Treatment => {
                let right_sum = total_sum - left_sum;
                (nl / mf) * entropy(left_sum, nl) + (nr / mf) * entropy(right_sum, nr)
            }
        };
        let gain = parent - child;
        let threshold = 0.5 * (values[i].0 + values[i + 1].0);
        match best {
            Some((g, _)) if gain <= g => {}
            _ => best = Some((gain, threshold)),
        }
    }
    best.filter(|&(g, _)| g > 1e-12)
}

struct ForestBuilder<'a> {
    x: &'a Array2<f64>,
    t: &'a Array1<f64>,
    target: ForestTarget,
    lambda: f64,
    params: RrfParams,
    used: HashSet<usize>,
    gain_sum: Vec<f64>,
    gain_count: Vec<usize>,
}

impl<'a> ForestBuilder<'a> {
    fn grow_node(
        &mut self,
        tree: &mut Vec<Node>,
        rows: &[usize],
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let leaf_value = || -> f64 {
            rows.iter().map(|&i| self.t[i]).sum::<f64>() / rows.len() as f64
        };
        if depth >= self.params.max_depth || rows.len() < self.params.min_node {
            tree.push(Node::Leaf { value: leaf_value() });
            return tree.len() - 1;
        }
        let k = self.x.ncols();
        let mtry = self
            .params
            .mtry
            .unwrap_or_else(|| (k as f64).sqrt().ceil() as usize)
            .clamp(1, k);
        // Partial Fisher-Yates draws mtry distinct features; the RNG stream
        // is independent of lambda so penalized and plain forests stay
        // draw-for-draw comparable.
        let mut pool: Vec<usize> = (0..k).collect();
        for i in 0..mtry {
            let j = rng.gen_range(i..k);
            pool.swap(i, j);
        }
        let mut candidates: Vec<usize> = pool[..mtry].to_vec();
        candidates.sort_unstable();

        // Lexicographic argmax on (penalized gain, raw gain, low feature):
        // an out-of-set feature wins only when lambda * gain beats every
        // in-set gain, or when every in-set gain is zero (then the raw gain
        // breaks the tie, which also covers the all-new root case).
        let mut best: Option<(f64, f64, usize, f64)> = None; // (gain_r, gain, feature, threshold)
        for &feature in &candidates {
            let mut values: Vec<(f64, f64)> = rows
                .iter()
                .map(|&i| (self.x[[i, feature]], self.t[i]))
                .collect();
            if let Some((gain, threshold)) = best_split_on_feature(&mut values, self.target) {
                let gain_r = if self.used.contains(&feature) {
                    gain
                } else {
                    self.lambda * gain
                };
                let better = match best {
                    None => true,
                    Some((bg_r, bg, _, _)) => {
                        gain_r > bg_r + 1e-15 || ((gain_r - bg_r).abs() <= 1e-15 && gain > bg)
                    }
                };
                if better {
                    best = Some((gain_r, gain, feature, threshold));
                }
            }
        }
        let Some((_, gain, feature, threshold)) = best else {
            tree.push(Node::Leaf { value: leaf_value() });
            return tree.len() - 1;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.x[[i, feature]] <= threshold);
        if left_rows.is_empty() || right_rows.is_empty() {
            tree.push(Node::Leaf { value: leaf_value() });
            return tree.len() - 1;
        }
        self.used.insert(feature);
        self.gain_sum[feature] += gain;
        self.gain_count[feature] += 1;
        let at = tree.len();
        tree.push(Node::Leaf { value: 0.0 }); // placeholder
        let left = self.grow_node(tree, &left_rows, depth + 1, rng);
        let right = self.grow_node(tree, &right_rows, depth + 1, rng);
        tree[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

fn forest_target_values(ds: &Dataset, target: ForestTarget) -> Array1<f64> {
    match target {
        ForestTarget::Outcome => ds.y.clone(),
        ForestTarget::Treatment => Array1::from_iter(ds.d.iter().map(|&v| f64::from(v))),
    }
}

fn train_forest(
    ds: &Dataset,
    target: ForestTarget,
    lambda: f64,
    params: RrfParams,
    seed: u64,
    initial_used: HashSet<usize>,
) -> Result<RrfFit> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Validation("rrf penalty must lie in [0, 1]".into()));
    }
    if params.n_trees == 0 {
        return Err(Error::Validation("need at least one tree".into()));
    }
    let t = forest_target_values(ds, target);
    let mut builder = ForestBuilder {
        x: &ds.x,
        t: &t,
        target,
        lambda,
        params,
        used: initial_used,
        gain_sum: vec![0.0; ds.k()],
        gain_count: vec![0; ds.k()],
    };
    let mut trees = Vec::with_capacity(params.n_trees);
    // Trees grow sequentially: the used-feature set F is global across the
    // forest and must evolve in a fixed order for reproducibility.
    for tree_idx in 0..params.n_trees {
        let mut rng = stream_rng(seed, tree_idx as u64);
        let rows: Vec<usize> = if params.bootstrap {
            (0..ds.n()).map(|_| rng.gen_range(0..ds.n())).collect()
        } else {
            (0..ds.n()).collect()
        };
        let mut nodes = Vec::new();
        let root = builder.grow_node(&mut nodes, &rows, 0, &mut rng);
        debug_assert_eq!(root, 0);
        if tree_idx == 0 && matches!(nodes[0], Node::Leaf { .. }) {
            return Err(Error::NonConvergence(
                "degenerate tree: no valid split at the root".into(),
            ));
        }
        trees.push(Tree { nodes });
    }
    let selected: Vec<usize> = (0..ds.k()).filter(|&j| builder.gain_count[j] > 0).collect();
    let importance: Vec<f64> = (0..ds.k())
        .map(|j| {
            if builder.gain_count[j] > 0 {
                builder.gain_sum[j] / builder.gain_count[j] as f64
            } else {
                0.0
            }
        })
        .collect();
    Ok(RrfFit {
        lambda,
        target,
        selected,
        importance,
        cv_curve: Vec::new(),
        trees,
    })
}

/// Trains a regularized forest at a fixed penalty.
pub fn rrf_train(
    ds: &Dataset,
    target: ForestTarget,
    lambda: f64,
    params: RrfParams,
    seed: u64,
) -> Result<RrfFit> {
    ds.validate()?;
    train_forest(ds, target, lambda, params, seed, HashSet::new())
}

fn cv_loss(ds: &Dataset, fit: &RrfFit, rows: &[usize]) -> f64 {
    let t = forest_target_values(ds, fit.target);
    let mut total = 0.0;
    for &i in rows {
        let p = fit.predict_row(ds.x.row(i));
        let r = t[i] - p;
        total += r * r;
    }
    total / rows.len() as f64
}

/// Selects the penalty by k-fold cross-validation over `grid`, then refits on
/// the full data at the winner.
pub fn rrf_train_cv(
    ds: &Dataset,
    target: ForestTarget,
    grid: &[f64],
    cv_folds: usize,
    params: RrfParams,
    seed: u64,
) -> Result<RrfFit> {
    ds.validate()?;
    if grid.is_empty() {
        return Err(Error::Validation("empty penalty grid".into()));
    }
    if grid.len() == 1 || cv_folds < 2 {
        return rrf_train(ds, target, grid[0], params, seed);
    }
    let mut ids = vec![0usize; ds.n()];
    {
        let mut order: Vec<usize> = (0..ds.n()).collect();
        let mut rng = stream_rng(seed, 0xf01d);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (pos, &row) in order.iter().enumerate() {
            ids[row] = pos % cv_folds;
        }
    }
    use rayon::prelude::*;
    let losses: Vec<(f64, f64)> = grid
        .par_iter()
        .enumerate()
        .map(|(gi, &lambda)| {
            let mut loss = 0.0;
            for fold in 0..cv_folds {
                let train_rows: Vec<usize> = (0..ds.n()).filter(|&i| ids[i] != fold).collect();
                let test_rows: Vec<usize> = (0..ds.n()).filter(|&i| ids[i] == fold).collect();
                let sub = crate::dataset::subset(ds, &train_rows);
                let fit = train_forest(
                    &sub,
                    target,
                    lambda,
                    params,
                    crate::rng::derive_seed(seed, (gi * cv_folds + fold) as u64),
                    HashSet::new(),
                )?;
                // Score on the held-out rows of the original data.
                let t = forest_target_values(ds, target);
                let mut fold_loss = 0.0;
                for &i in &test_rows {
                    let p = fit.predict_row(ds.x.row(i));
                    let r = t[i] - p;
                    fold_loss += r * r;
                }
                loss += fold_loss / test_rows.len().max(1) as f64 / cv_folds as f64;
            }
            Ok((lambda, loss))
        })
        .collect::<Result<_>>()?;
    let best = losses
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).expect("finite losses"))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let mut fit = rrf_train(ds, target, grid[best], params, seed)?;
    fit.cv_curve = losses;
    Ok(fit)
}

/// Matching space from two forest fits: standardized columns at the union of
/// the selected sets, each scaled by its importance (the larger one when both
/// models selected the feature).
pub fn rrf_matching_space(
    ds: &Dataset,
    fit_y: &RrfFit,
    fit_d: &RrfFit,
) -> Result<crate::space::MatchingSpace> {
    if fit_y.importance.len() != ds.k() || fit_d.importance.len() != ds.k() {
        return Err(Error::Validation(
            "forest fits do not match the dataset's covariates".into(),
        ));
    }
    let mut union: Vec<usize> = fit_y
        .selected
        .iter()
        .chain(fit_d.selected.iter())
        .copied()
        .collect();
    union.sort_unstable();
    union.dedup();
    if union.is_empty() {
        return Err(Error::EmptySupport("no feature was used in any split".into()));
    }
    let mut z = ds.x.select(Axis(1), &union);
    let mut labels = Vec::with_capacity(union.len());
    for (pos, &j) in union.iter().enumerate() {
        let c = fit_y.importance[j].max(fit_d.importance[j]);
        debug_assert!(c > 0.0, "selected features always carry positive gain");
        z.column_mut(pos).mapv_inplace(|v| v * c);
        labels.push(ds.names[j].clone());
    }
    crate::space::MatchingSpace::new_pruned(z, crate::space::SpaceMethod::Rrf, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn two_feature_toy(n: usize, seed: u64) -> Dataset {
        // x0 carries a large step signal plus a smooth trend so it keeps
        // positive gain at depth; x1 carries a smaller step.
        let mut rng = seeded_rng(seed);
        let x = Array2::from_shape_fn((n, 2), |_| StandardNormal.sample(&mut rng));
        let y = Array1::from_shape_fn(n, |i| {
            let step = if x[[i, 0]] > 0.0 { 2.0 } else { 0.0 };
            step + 0.6 * x[[i, 0]] + 0.3 * f64::from(x[[i, 1]] > 0.0)
        });
        let d: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        Dataset::new(x, d, y, vec!["x0".into(), "x1".into()], None).unwrap()
    }

    #[test]
    fn lambda_one_matches_a_forest_with_no_penalty_in_reach() {
        // With every feature pre-seeded into F the penalty can never apply;
        // at lambda = 1 the two runs must agree split for split.
        let ds = two_feature_toy(300, 1);
        let params = RrfParams {
            n_trees: 12,
            max_depth: 4,
            ..RrfParams::default()
        };
        let plain = train_forest(
            &ds,
            ForestTarget::Outcome,
            1.0,
            params,
            7,
            HashSet::from([0, 1]),
        )
        .unwrap();
        let rrf = rrf_train(&ds, ForestTarget::Outcome, 1.0, params, 7).unwrap();
        assert_eq!(plain.trees, rrf.trees);
    }

    #[test]
    fn zero_penalty_keeps_the_forest_on_the_first_feature() {
        let ds = two_feature_toy(400, 2);
        let params = RrfParams {
            n_trees: 10,
            max_depth: 5,
            mtry: Some(2),
            ..RrfParams::default()
        };
        let fit = rrf_train(&ds, ForestTarget::Outcome, 0.0, params, 3).unwrap();
        // Root enters x0 (largest raw gain among all-new candidates); with
        // lambda = 0 a new feature can win later only when every in-set gain
        // is zero, which the smooth x0 trend prevents.
        assert_eq!(fit.selected, vec![0]);
        let relaxed = rrf_train(&ds, ForestTarget::Outcome, 1.0, params, 3).unwrap();
        assert_eq!(relaxed.selected, vec![0, 1]);
    }

    #[test]
    fn forests_are_deterministic() {
        let ds = two_feature_toy(200, 3);
        let params = RrfParams {
            n_trees: 8,
            ..RrfParams::default()
        };
        let a = rrf_train(&ds, ForestTarget::Outcome, 0.7, params, 11).unwrap();
        let b = rrf_train(&ds, ForestTarget::Outcome, 0.7, params, 11).unwrap();
        assert_eq!(a.trees, b.trees);
        assert_eq!(a.importance, b.importance);
    }

    #[test]
    fn classification_forest_learns_the_boundary() {
        let mut rng = seeded_rng(4);
        let n = 600;
        let x = Array2::from_shape_fn((n, 3), |_| StandardNormal.sample(&mut rng));
        let d: Vec<u8> = (0..n).map(|i| u8::from(x[[i, 1]] > 0.0)).collect();
        let mut ds = Dataset::new(
            x,
            d,
            Array1::zeros(n),
            vec!["a".into(), "b".into(), "c".into()],
            None,
        )
        .unwrap();
        ds.validate().unwrap();
        let fit = rrf_train(
            &ds,
            ForestTarget::Treatment,
            1.0,
            RrfParams {
                n_trees: 30,
                ..RrfParams::default()
            },
            5,
        )
        .unwrap();
        assert!(fit.selected.contains(&1));
        assert!(fit.importance[1] > fit.importance[0]);
        assert!(fit.importance[1] > fit.importance[2]);
        // Out-of-sample-ish accuracy sanity.
        let mut correct = 0;
        for i in 0..n {
            let p = fit.predict_row(ds.x.row(i));
            if (p > 0.5) == (ds.d[i] == 1) {
                correct += 1;
            }
        }
        assert!(correct as f64 / n as f64 > 0.9);
    }

    #[test]
    fn cv_selects_from_the_grid() {
        let ds = two_feature_toy(250, 6);
        let params = RrfParams {
            n_trees: 6,
            max_depth: 4,
            ..RrfParams::default()
        };
        let fit = rrf_train_cv(&ds, ForestTarget::Outcome, &[0.3, 1.0], 3, params, 9).unwrap();
        assert_eq!(fit.cv_curve.len(), 2);
        assert!(fit.lambda == 0.3 || fit.lambda == 1.0);
    }

    #[test]
    fn importance_scaling_drives_distance_contributions() {
        // A feature with importance 0.01 contributes 1e4 times less squared
        // distance than one with importance 1.0.
        let mut rng = seeded_rng(8);
        let n = 50;
        let x = Array2::from_shape_fn((n, 2), |_| StandardNormal.sample(&mut rng));
        let d: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        let ds = Dataset::new(x, d, Array1::zeros(n), vec!["a".into(), "b".into()], None)
            .unwrap();
        let fit_y = RrfFit::for_test(vec![0, 1], vec![1.0, 0.01], ForestTarget::Outcome);
        let fit_d = RrfFit::for_test(vec![], vec![0.0, 0.0], ForestTarget::Treatment);
        let space = rrf_matching_space(&ds, &fit_y, &fit_d).unwrap();
        for i in 0..n {
            assert_eq!(space.z[[i, 0]], ds.x[[i, 0]]);
            assert_eq!(space.z[[i, 1]], 0.01 * ds.x[[i, 1]]);
        }
        let ratio = (0.01_f64 / 1.0).powi(2);
        assert_eq!(ratio, 1e-4);
    }

    #[test]
    fn empty_union_is_an_error() {
        let ds = two_feature_toy(60, 9);
        let fit_y = RrfFit::for_test(vec![], vec![0.0, 0.0], ForestTarget::Outcome);
        let fit_d = RrfFit::for_test(vec![], vec![0.0, 0.0], ForestTarget::Treatment);
        assert!(matches!(
            rrf_matching_space(&ds, &fit_y, &fit_d),
            Err(Error::EmptySupport(_))
        ));
    }

    #[test]
    fn degenerate_root_errors() {
        // Constant target: no split can reduce impurity anywhere.
        let mut rng = seeded_rng(10);
        let n = 80;
        let x = Array2::from_shape_fn((n, 2), |_| StandardNormal.sample(&mut rng));
        let d: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        let ds = Dataset::new(
            x,
            d,
            Array1::from_elem(n, 2.0),
            vec!["a".into(), "b".into()],
            None,
        )
        .unwrap();
        assert!(matches!(
            rrf_train(&ds, ForestTarget::Outcome, 1.0, RrfParams::default(), 1),
            Err(Error::NonConvergence(_))
        ));
    }
}
