//! Siamese training: twin towers with shared parameters, pair sampling, the
//! contrastive and outcome-pair losses, and the unscaled SNN matching space.

use crate::dataset::{oversample_treated, Dataset};
use crate::error::{Error, Result};
use crate::matching::Estimand;
use crate::net::{Activation, LossKind, NetKind, Subsample, TrainedNet};
use crate::rng::{seeded_rng, stream_rng};
use crate::space::{MatchingSpace, SpaceMethod};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairLoss {
    /// Same-treatment pairs are pulled together, cross-treatment pairs pushed
    /// past the margin.
    Contrastive,
    /// Embedding distance regresses onto the absolute outcome difference.
    OutcomePair,
}

/// Tower architecture and pair-training settings. The tower terminates at the
/// embedding layer; there is no output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnnConfig {
    pub hidden: Vec<usize>,
    pub activations: Vec<Activation>,
    pub loss: PairLoss,
    /// Hinge margin for dissimilar pairs (contrastive loss only).
    pub margin: f64,
    /// Pairs drawn per epoch; 0 means 20 x n.
    pub pairs_per_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub subsample: Subsample,
}

impl Default for SnnConfig {
    fn default() -> Self {
        SnnConfig {
            hidden: vec![32, 4],
            activations: vec![Activation::Relu, Activation::Relu],
            loss: PairLoss::Contrastive,
            margin: 1.0,
            pairs_per_epoch: 0,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            seed: 0,
            subsample: Subsample::Pooled,
        }
    }
}

impl SnnConfig {
    /// Outcome-similarity tower on the estimand-appropriate subsample.
    pub fn outcome_default(estimand: Estimand, seed: u64) -> Self {
        SnnConfig {
            loss: PairLoss::OutcomePair,
            subsample: match estimand {
                Estimand::Att => Subsample::ControlOnly,
                Estimand::Atut => Subsample::TreatedOnly,
            },
            seed,
            ..SnnConfig::default()
        }
    }

    /// Treatment-similarity tower on the pooled sample.
    pub fn treatment_default(seed: u64) -> Self {
        SnnConfig {
            loss: PairLoss::Contrastive,
            subsample: Subsample::Pooled,
            seed,
            ..SnnConfig::default()
        }
    }

    pub fn embedding_width(&self) -> usize {
        self.hidden.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Validation("tower needs non-empty positive widths".into()));
        }
        if self.activations.len() != self.hidden.len() {
            return Err(Error::Validation("need one activation per tower layer".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Validation("margin must be positive".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Validation("bad optimizer settings".into()));
        }
        if self.loss == PairLoss::Contrastive && self.subsample != Subsample::Pooled {
            return Err(Error::Validation(
                "the contrastive tower trains on the pooled sample".into(),
            ));
        }
        Ok(())
    }

    fn resolved_pairs(&self, n: usize) -> usize {
        if self.pairs_per_epoch == 0 {
            20 * n
        } else {
            self.pairs_per_epoch
        }
    }
}

/// Per-pair supervision.
#[derive(Debug, Clone, PartialEq)]
pub enum PairTarget {
    /// 1 = similar (same treatment class), 0 = dissimilar.
    Similarity(Vec<u8>),
    /// Outcome values of the two units.
    Outcomes(Vec<(f64, f64)>),
}

/// A batch of index pairs with their targets. Indices refer to dataset rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
    pub target: PairTarget,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn sample_distinct_pair<R: Rng>(rng: &mut R, pool: &[usize]) -> (usize, usize) {
    let a = pool[rng.gen_range(0..pool.len())];
    loop {
        let b = pool[rng.gen_range(0..pool.len())];
        if b != a {
            return (a, b);
        }
    }
}

fn sample_pairs_with(ds: &Dataset, cfg: &SnnConfig, rng: &mut ChaCha8Rng) -> Result<PairBatch> {
    let want = cfg.resolved_pairs(ds.n());
    match cfg.loss {
        PairLoss::Contrastive => {
            let treated = ds.treated_indices();
            let control = ds.control_indices();
            if treated.is_empty() || control.is_empty() {
                return Err(Error::Validation(
                    "contrastive sampling needs both treatment classes".into(),
                ));
            }
            let all: Vec<usize> = (0..ds.n()).collect();
            // Half same-class, half cross-class; if neither class has two
            // members only cross pairs exist.
            let can_same = treated.len() >= 2 || control.len() >= 2;
            let n_same = if can_same { want / 2 } else { 0 };
            let n_cross = want - n_same;
            let mut pairs = Vec::with_capacity(want);
            let mut labels = Vec::with_capacity(want);
            for _ in 0..n_same {
                // Draw a unit uniformly among those whose class has a partner.
                let (i, j) = loop {
                    let i = all[rng.gen_range(0..all.len())];
                    let class = if ds.d[i] == 1 { &treated } else { &control };
                    if class.len() < 2 {
                        continue;
                    }
                    break loop {
                        let j = class[rng.gen_range(0..class.len())];
                        if j != i {
                            break (i, j);
                        }
                    };
                };
                pairs.push((i, j));
                labels.push(1u8);
            }
            for _ in 0..n_cross {
                let i = treated[rng.gen_range(0..treated.len())];
                let j = control[rng.gen_range(0..control.len())];
                pairs.push((i, j));
                labels.push(0u8);
            }
            Ok(PairBatch {
                pairs,
                target: PairTarget::Similarity(labels),
            })
        }
        PairLoss::OutcomePair => {
            let pool: Vec<usize> = match cfg.subsample {
                Subsample::Pooled => (0..ds.n()).collect(),
                Subsample::ControlOnly => ds.control_indices(),
                Subsample::TreatedOnly => ds.treated_indices(),
            };
            if pool.len() < 2 {
                return Err(Error::Validation(
                    "outcome-pair sampling needs at least two units in the subsample".into(),
                ));
            }
            let mut pairs = Vec::with_capacity(want);
            let mut ys = Vec::with_capacity(want);
            for _ in 0..want {
                let (i, j) = sample_distinct_pair(rng, &pool);
                pairs.push((i, j));
                ys.push((ds.y[i], ds.y[j]));
            }
            Ok(PairBatch {
                pairs,
                target: PairTarget::Outcomes(ys),
            })
        }
    }
}

/// Draws one epoch's worth of training pairs, seeded by `cfg.seed`.
pub fn sample_pairs(ds: &Dataset, cfg: &SnnConfig) -> Result<PairBatch> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    sample_pairs_with(ds, cfg, &mut rng)
}

/// Contrastive loss: D^2 for similar pairs, hinge (margin - D)^2 for
/// dissimilar pairs, with D the Euclidean embedding distance.
pub fn contrastive_loss(e_i: &[f64], e_j: &[f64], similar: u8, margin: f64) -> f64 {
    let d = euclidean(e_i, e_j);
    if similar == 1 {
        d * d
    } else {
        let gap = (margin - d).max(0.0);
        gap * gap
    }
}

/// Outcome-pair loss: (D - |y_i - y_j|)^2, so embedding distance tracks the
/// absolute outcome difference.
pub fn outcome_pair_loss(e_i: &[f64], e_j: &[f64], y_i: f64, y_j: f64) -> f64 {
    let d = euclidean(e_i, e_j);
    let gap = d - (y_i - y_j).abs();
    gap * gap
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean pair loss of a tower on a batch.
pub fn pair_batch_loss(net: &TrainedNet, x: &Array2<f64>, batch: &PairBatch, margin: f64) -> f64 {
    let e = net.forward_full(x);
    let mut total = 0.0;
    for (p, (i, j)) in batch.pairs.iter().enumerate() {
        let ei = e.row(*i);
        let ej = e.row(*j);
        let (ei, ej) = (ei.as_slice().unwrap(), ej.as_slice().unwrap());
        total += match &batch.target {
            PairTarget::Similarity(lab) => contrastive_loss(ei, ej, lab[p], margin),
            PairTarget::Outcomes(ys) => outcome_pair_loss(ei, ej, ys[p].0, ys[p].1),
        };
    }
    total / batch.len() as f64
}

/// dL/dD for one pair at embedding distance `d`.
fn loss_ddist(target: &PairTarget, p: usize, d: f64, margin: f64) -> f64 {
    match target {
        PairTarget::Similarity(lab) => {
            if lab[p] == 1 {
                2.0 * d
            } else if d < margin {
                -2.0 * (margin - d)
            } else {
                0.0
            }
        }
        PairTarget::Outcomes(ys) => 2.0 * (d - (ys[p].0 - ys[p].1).abs()),
    }
}

/// Mean-batch parameter gradients of the pairwise loss; both towers share
/// parameters, so left- and right-side gradients sum.
fn pair_gradients(
    net: &TrainedNet,
    x: &Array2<f64>,
    batch: &PairBatch,
    margin: f64,
) -> (Vec<Array2<f64>>, Vec<Array1<f64>>) {
    let b = batch.len();
    let z = net.embedding_width();
    let left_idx: Vec<usize> = batch.pairs.iter().map(|p| p.0).collect();
    let right_idx: Vec<usize> = batch.pairs.iter().map(|p| p.1).collect();
    let xl = x.select(Axis(0), &left_idx);
    let xr = x.select(Axis(0), &right_idx);
    let el = net.forward_full(&xl);
    let er = net.forward_full(&xr);
    let mut gl = Array2::zeros((b, z));
    let mut gr = Array2::zeros((b, z));
    for p in 0..b {
        let mut d2 = 0.0;
        for c in 0..z {
            let diff = el[[p, c]] - er[[p, c]];
            d2 += diff * diff;
        }
        let d = d2.sqrt();
        let dl = loss_ddist(&batch.target, p, d, margin) / b as f64;
        // dD/de = (e_l - e_r)/D; for similar pairs the D^2 form avoids the
        // division entirely, and at D = 0 the subgradient is taken as zero.
        let similar_sq = matches!(&batch.target, PairTarget::Similarity(lab) if lab[p] == 1);
        for c in 0..z {
            let diff = el[[p, c]] - er[[p, c]];
            let g = if similar_sq {
                2.0 * diff / b as f64
            } else if d > 0.0 {
                dl * diff / d
            } else {
                0.0
            };
            gl[[p, c]] = g;
            gr[[p, c]] = -g;
        }
    }
    let (gw_l, gb_l) = net.gradients_from_upstream(&xl, &gl);
    let (gw_r, gb_r) = net.gradients_from_upstream(&xr, &gr);
    let gw = gw_l
        .into_iter()
        .zip(gw_r)
        .map(|(a, b)| a + b)
        .collect();
    let gb = gb_l
        .into_iter()
        .zip(gb_r)
        .map(|(a, b)| a + b)
        .collect();
    (gw, gb)
}

/// Finite-difference check of the pairwise-loss gradients over all tower
/// parameters; returns the maximum relative error.
pub fn snn_grad_check(
    net: &TrainedNet,
    x: &Array2<f64>,
    batch: &PairBatch,
    margin: f64,
    epsilon: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Validation(
            "grad-check epsilon must lie in [1e-7, 1e-3]".into(),
        ));
    }
    let (gw, gb) = pair_gradients(net, x, batch, margin);
    let mut probe = net.clone();
    let mut max_rel: f64 = 0.0;
    let mut check = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    };
    for l in 0..net.weights.len() {
        for idx in 0..net.weights[l].len() {
            let orig = net.weights[l].as_slice().unwrap()[idx];
            probe.weights[l].as_slice_mut().unwrap()[idx] = orig + epsilon;
            let plus = pair_batch_loss(&probe, x, batch, margin);
            probe.weights[l].as_slice_mut().unwrap()[idx] = orig - epsilon;
            let minus = pair_batch_loss(&probe, x, batch, margin);
            probe.weights[l].as_slice_mut().unwrap()[idx] = orig;
            check(gw[l].as_slice().unwrap()[idx], plus, minus);
        }
        for idx in 0..net.biases[l].len() {
            let orig = net.biases[l][idx];
            probe.biases[l][idx] = orig + epsilon;
            let plus = pair_batch_loss(&probe, x, batch, margin);
            probe.biases[l][idx] = orig - epsilon;
            let minus = pair_batch_loss(&probe, x, batch, margin);
            probe.biases[l][idx] = orig;
            check(gb[l][idx], plus, minus);
        }
    }
    Ok(max_rel)
}

fn init_tower(input: usize, cfg: &SnnConfig) -> TrainedNet {
    let mut rng = seeded_rng(cfg.seed);
    let mut widths = vec![input];
    widths.extend_from_slice(&cfg.hidden);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in widths.windows(2) {
        let (fi, fo) = (w[0], w[1]);
        let lim = (6.0 / (fi + fo) as f64).sqrt();
        weights.push(Array2::from_shape_fn((fi, fo), |_| rng.gen_range(-lim..lim)));
        biases.push(Array1::zeros(fo));
    }
    TrainedNet {
        weights,
        biases,
        activations: cfg.activations.clone(),
        loss: LossKind::SquaredError,
        kind: NetKind::Tower,
        loss_trace: Vec::new(),
    }
}

/// Trains a shared-parameter tower on resampled pair batches with mini-batch
/// momentum SGD. Deterministic per seed; the contrastive tower's pair pool is
/// oversampled when the treated share falls below 10%.
pub fn train_snn(ds: &Dataset, cfg: &SnnConfig) -> Result<TrainedNet> {
    cfg.validate()?;
    let pool_ds = if cfg.loss == PairLoss::Contrastive {
        oversample_treated(ds, 0.10, 0.10, cfg.seed.wrapping_add(0x0b5))?
    } else {
        ds.clone()
    };
    let mut net = init_tower(pool_ds.x.ncols(), cfg);
    let mut vel_w: Vec<Array2<f64>> = net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect();
    let mut vel_b: Vec<Array1<f64>> = net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(cfg.seed, 0x9a17 + epoch as u64);
        let batch = sample_pairs_with(&pool_ds, cfg, &mut rng)?;
        let mut epoch_loss = 0.0;
        let mut chunks = 0usize;
        let mut start = 0;
        while start < batch.len() {
            let end = (start + cfg.batch_size).min(batch.len());
            let sub = PairBatch {
                pairs: batch.pairs[start..end].to_vec(),
                target: match &batch.target {
                    PairTarget::Similarity(l) => PairTarget::Similarity(l[start..end].to_vec()),
                    PairTarget::Outcomes(y) => PairTarget::Outcomes(y[start..end].to_vec()),
                },
            };
            let (gw, gb) = pair_gradients(&net, &pool_ds.x, &sub, cfg.margin);
            for l in 0..net.weights.len() {
                vel_w[l].zip_mut_with(&gw[l], |v, &g| {
                    *v = cfg.momentum * *v - cfg.learning_rate * g
                });
                net.weights[l] += &vel_w[l];
                vel_b[l].zip_mut_with(&gb[l], |v, &g| {
                    *v = cfg.momentum * *v - cfg.learning_rate * g
                });
                net.biases[l] += &vel_b[l];
            }
            epoch_loss += pair_batch_loss(&net, &pool_ds.x, &sub, cfg.margin);
            chunks += 1;
            start = end;
        }
        let mean_loss = epoch_loss / chunks.max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "siamese epoch {epoch} produced a non-finite loss"
            )));
        }
        net.loss_trace.push(mean_loss);
    }
    if net.loss_trace.is_empty() {
        net.loss_trace.push(pair_batch_loss(
            &net,
            &pool_ds.x,
            &sample_pairs_with(&pool_ds, cfg, &mut seeded_rng(cfg.seed))?,
            cfg.margin,
        ));
    }
    Ok(net)
}

/// Embeds all rows through the outcome and treatment towers and concatenates
/// without any weight scaling, then prunes degenerate columns.
pub fn snn_matching_space(
    ds: &Dataset,
    cfg_y: &SnnConfig,
    cfg_d: &SnnConfig,
    estimand: Estimand,
) -> Result<MatchingSpace> {
    cfg_y.validate()?;
    cfg_d.validate()?;
    if cfg_y.activations.contains(&Activation::Elu) || cfg_d.activations.contains(&Activation::Elu)
    {
        return Err(Error::Validation("ELU is not allowed in embedding nets".into()));
    }
    if cfg_y.loss != PairLoss::OutcomePair || cfg_d.loss != PairLoss::Contrastive {
        return Err(Error::Validation(
            "snn_matching_space needs an outcome-pair tower and a contrastive tower".into(),
        ));
    }
    let want = match estimand {
        Estimand::Att => Subsample::ControlOnly,
        Estimand::Atut => Subsample::TreatedOnly,
    };
    if cfg_y.subsample != want {
        return Err(Error::Validation(format!(
            "outcome tower for {estimand:?} must train on the {want:?} subsample"
        )));
    }
    let tower_y = train_snn(ds, cfg_y)?;
    let tower_d = train_snn(ds, cfg_d)?;
    let md = crate::net::extract_embedding(&tower_d, &ds.x)?;
    let my = crate::net::extract_embedding(&tower_y, &ds.x)?;
    let (zd, zy) = (md.ncols(), my.ncols());
    let mut z = Array2::zeros((ds.n(), zd + zy));
    z.slice_mut(ndarray::s![.., ..zd]).assign(&md);
    z.slice_mut(ndarray::s![.., zd..]).assign(&my);
    let labels: Vec<String> = (0..zd)
        .map(|j| format!("d{j}"))
        .chain((0..zy).map(|j| format!("y{j}")))
        .collect();
    MatchingSpace::new_pruned(z, SpaceMethod::Snn, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn toy_ds(n: usize, seed: u64) -> Dataset {
        let mut rng = seeded_rng(seed);
        let x = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let d: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]] * 2.0 + f64::from(d[i]));
        Dataset::new(x, d, y, vec!["a".into(), "b".into()], None).unwrap()
    }

    #[test]
    fn contrastive_loss_examples() {
        let e = [0.3, -0.2];
        assert_eq!(contrastive_loss(&e, &e, 1, 1.0), 0.0);
        // Dissimilar with D >= margin saturates to zero.
        assert_eq!(contrastive_loss(&[0.0, 0.0], &[3.0, 4.0], 0, 1.0), 0.0);
        // Dissimilar at distance zero pays margin^2.
        assert_eq!(contrastive_loss(&e, &e, 0, 1.0), 1.0);
    }

    #[test]
    fn outcome_pair_loss_examples() {
        let e = [0.1, 0.7];
        assert_eq!(outcome_pair_loss(&e, &e, 2.0, 2.0), 0.0);
        assert_abs_diff_eq!(
            outcome_pair_loss(&[0.0, 0.0], &[1.0, 0.0], 3.0, 2.0),
            0.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(outcome_pair_loss(&e, &e, 1.0, 3.0), 4.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn losses_are_symmetric_and_nonnegative(
            a in proptest::collection::vec(-5.0_f64..5.0, 3),
            b in proptest::collection::vec(-5.0_f64..5.0, 3),
            yi in -5.0_f64..5.0,
            yj in -5.0_f64..5.0,
            sim in 0_u8..2,
            margin in 0.1_f64..4.0,
        ) {
            let c1 = contrastive_loss(&a, &b, sim, margin);
            let c2 = contrastive_loss(&b, &a, sim, margin);
            prop_assert!((c1 - c2).abs() < 1e-12);
            prop_assert!(c1 >= 0.0);
            let o1 = outcome_pair_loss(&a, &b, yi, yj);
            let o2 = outcome_pair_loss(&b, &a, yj, yi);
            prop_assert!((o1 - o2).abs() < 1e-12);
            prop_assert!(o1 >= 0.0);
        }
    }

    #[test]
    fn contrastive_sampling_is_balanced() {
        let ds = toy_ds(40, 1);
        let cfg = SnnConfig {
            pairs_per_epoch: 1000,
            ..SnnConfig::treatment_default(5)
        };
        let batch = sample_pairs(&ds, &cfg).unwrap();
        assert_eq!(batch.len(), 1000);
        if let PairTarget::Similarity(labels) = &batch.target {
            let same: usize = labels.iter().map(|&l| l as usize).sum();
            assert_eq!(same, 500);
            for (p, (i, j)) in batch.pairs.iter().enumerate() {
                assert_ne!(i, j);
                let same_class = ds.d[*i] == ds.d[*j];
                assert_eq!(same_class, labels[p] == 1);
            }
        } else {
            panic!("expected similarity targets");
        }
    }

    #[test]
    fn two_unit_subsample_yields_the_single_pair() {
        // Two control units: the outcome-pair sampler can only form (i, j)
        // from those two rows.
        let ds = Dataset::new(
            array![[0.0], [1.0], [2.0]],
            vec![1, 0, 0],
            array![1.0, 2.0, 3.0],
            vec!["x".into()],
            None,
        )
        .unwrap();
        let cfg = SnnConfig {
            pairs_per_epoch: 10,
            ..SnnConfig::outcome_default(Estimand::Att, 3)
        };
        let batch = sample_pairs(&ds, &cfg).unwrap();
        for (i, j) in &batch.pairs {
            assert!(*i >= 1 && *j >= 1 && i != j);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let ds = toy_ds(30, 2);
        let cfg = SnnConfig {
            pairs_per_epoch: 64,
            ..SnnConfig::treatment_default(11)
        };
        assert_eq!(sample_pairs(&ds, &cfg).unwrap(), sample_pairs(&ds, &cfg).unwrap());
    }

    #[test]
    fn contrastive_needs_both_classes() {
        let ds = Dataset {
            x: array![[0.0], [1.0]],
            d: vec![0, 0],
            y: array![0.0, 0.0],
            names: vec!["x".into()],
            truth: None,
            row_ids: vec![0, 1],
        };
        let cfg = SnnConfig {
            pairs_per_epoch: 4,
            ..SnnConfig::treatment_default(0)
        };
        assert!(sample_pairs(&ds, &cfg).is_err());
    }

    #[test]
    fn pairwise_grad_check_passes_for_both_losses() {
        let ds = toy_ds(24, 7);
        for loss in [PairLoss::Contrastive, PairLoss::OutcomePair] {
            let cfg = SnnConfig {
                hidden: vec![5, 3],
                activations: vec![Activation::Relu, Activation::Relu],
                loss,
                subsample: Subsample::Pooled,
                pairs_per_epoch: 16,
                seed: 19,
                ..SnnConfig::default()
            };
            let net = init_tower(2, &cfg);
            let batch = sample_pairs(&ds, &cfg).unwrap();
            let err = snn_grad_check(&net, &ds.x, &batch, cfg.margin, 1e-5).unwrap();
            assert!(err < 1e-4, "{loss:?}: rel err {err}");
        }
    }

    #[test]
    fn constant_outcome_collapses_towers() {
        let mut ds = toy_ds(60, 9);
        ds.y = Array1::from_elem(60, 5.0);
        let cfg = SnnConfig {
            pairs_per_epoch: 600,
            epochs: 120,
            learning_rate: 5e-3,
            subsample: Subsample::Pooled,
            loss: PairLoss::OutcomePair,
            seed: 4,
            ..SnnConfig::default()
        };
        let net = train_snn(&ds, &cfg).unwrap();
        let last = *net.loss_trace.last().unwrap();
        assert!(last < 0.05, "final loss {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy_ds(40, 10);
        let cfg = SnnConfig {
            pairs_per_epoch: 80,
            epochs: 5,
            ..SnnConfig::treatment_default(21)
        };
        let a = train_snn(&ds, &cfg).unwrap();
        let b = train_snn(&ds, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn snn_space_has_expected_width_and_no_rescaling() {
        let ds = toy_ds(80, 12);
        let cfg_y = SnnConfig {
            pairs_per_epoch: 200,
            epochs: 10,
            ..SnnConfig::outcome_default(Estimand::Att, 31)
        };
        let cfg_d = SnnConfig {
            pairs_per_epoch: 200,
            epochs: 10,
            ..SnnConfig::treatment_default(32)
        };
        let space = snn_matching_space(&ds, &cfg_y, &cfg_d, Estimand::Att).unwrap();
        assert!(space.width() <= 8 && space.width() >= 1);
        assert_eq!(space.n(), 80);
        // Columns are raw tower activations: re-embedding the data through
        // the towers reproduces the retained columns exactly.
        let ty = train_snn(&ds, &cfg_y).unwrap();
        let td = train_snn(&ds, &cfg_d).unwrap();
        let md = crate::net::extract_embedding(&td, &ds.x).unwrap();
        let my = crate::net::extract_embedding(&ty, &ds.x).unwrap();
        for (pos, label) in space.columns.iter().enumerate() {
            let (src, col) = if let Some(j) = label.strip_prefix('d') {
                (&md, j.parse::<usize>().unwrap())
            } else {
                (&my, label[1..].parse::<usize>().unwrap())
            };
            for i in 0..ds.n() {
                assert_eq!(space.z[[i, pos]], src[[i, col]]);
            }
        }
    }

    #[test]
    fn snn_space_rejects_wrong_loss_roles() {
        let ds = toy_ds(30, 13);
        let cfg_y = SnnConfig::treatment_default(1); // contrastive in the outcome slot
        let cfg_d = SnnConfig::treatment_default(2);
        assert!(snn_matching_space(&ds, &cfg_y, &cfg_d, Estimand::Att).is_err());
    }
}
