//! Generators for the five simulated data-generating processes, each
//! returning a `Dataset` with ground-truth potential outcomes.

use crate::dataset::{Dataset, Truth};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::space::{MatchingSpace, SpaceMethod};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

// Sub-stream ids carving independent RNG streams out of one master seed.
// Shared streams keep the squared variant bit-compatible with the linear one.
const STREAM_SUPPORTS: u64 = 0;
const STREAM_X: u64 = 1;
const STREAM_EPS: u64 = 2;
const STREAM_TREAT: u64 = 3;
const STREAM: u64 = 4;
const STREAM_NET: u64 = 5;
const STREAM_MASK: u64 = 6;
const STREAM_NORM: u64 = 7;
const STREAM_BETA: u64 = 8;

/// Which simulated environment to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpKind {
    SparseLinear,
    SparseLinearSq,
    RandomNn,
    Counterexample,
    IhdpSurface,
}

/// Structure of the random-net generator.
///
/// The correlation and scale constants were calibrated so the naive
/// difference-in-means is biased upward by roughly the same magnitude as in
/// the sparse linear design; see `examples/calibrate_random_nn.rs`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RandomNnParams {
    /// Width of the first (very wide, ELU) hidden layer.
    pub hidden_wide: usize,
    /// Width of the second (shallow, ReLU) hidden layer.
    pub hidden_narrow: usize,
    /// Cross-net correlation of the per-layer Gaussian weight cores.
    pub weight_corr: f64,
    /// Probability that a weight is zeroed (the same mask hits both nets).
    pub p_zero: f64,
    /// Standard deviation the outcome index is normalized to.
    pub outcome_index_sd: f64,
    /// Standard deviation the treatment logit index is normalized to.
    pub treatment_index_sd: f64,
}

impl Default for RandomNnParams {
    fn default() -> Self {
        RandomNnParams {
            hidden_wide: 100,
            hidden_narrow: 10,
            weight_corr: 0.75,
            p_zero: 0.5,
            outcome_index_sd: 1.41,
            treatment_index_sd: 4.0,
        }
    }
}

/// Parameterization of one simulated environment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub k: usize,
    /// True treatment effect.
    pub beta0: f64,
    pub seed: u64,
    /// Magnitude of the nonzero linear coefficients.
    pub coef: f64,
    /// Magnitude of the nonzero squared-term coefficients (squared variant).
    pub coef_sq: f64,
    /// Observation noise of the single-covariate counter-example.
    pub noise_sd: f64,
    pub nn: RandomNnParams,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            kind: DgpKind::SparseLinear,
            n: 8000,
            k: 50,
            beta0: 1.0,
            seed: 0,
            coef: 0.5,
            coef_sq: 0.5,
            noise_sd: 0.1,
            nn: RandomNnParams::default(),
        }
    }
}

impl DgpSpec {
    pub fn with_kind(kind: DgpKind) -> Self {
        DgpSpec {
            kind,
            ..DgpSpec::default()
        }
    }

    /// Runs the matching generator, returning oracle support information when
    /// the design defines it.
    pub fn generate(&self) -> Result<(Dataset, Option<OracleInfo>)> {
        match self.kind {
            DgpKind::SparseLinear => gen_sparse_linear(self).map(|(d, o)| (d, Some(o))),
            DgpKind::SparseLinearSq => gen_sparse_linear_sq(self).map(|(d, o)| (d, Some(o))),
            DgpKind::RandomNn => gen_random_nn(self).map(|d| (d, None)),
            DgpKind::Counterexample => gen_counterexample(self).map(|d| (d, None)),
            DgpKind::IhdpSurface => Err(Error::Validation(
                "the IHDP surface generator needs a covariate file; call gen_ihdp_surface".into(),
            )),
        }
    }
}

/// Indices of covariates with nonzero outcome / treatment coefficients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleInfo {
    pub outcome_support: Vec<usize>,
    pub treatment_support: Vec<usize>,
}

impl OracleInfo {
    pub fn union(&self) -> Vec<usize> {
        let mut u = self.outcome_support.clone();
        for &j in &self.treatment_support {
            if !u.contains(&j) {
                u.push(j);
            }
        }
        u.sort_unstable();
        u
    }

    pub fn intersection(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .outcome_support
            .iter()
            .copied()
            .filter(|j| self.treatment_support.contains(j))
            .collect();
        v.sort_unstable();
        v
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn draw_normals<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Fisher-Yates shuffle of `0..k`, consuming `rng` deterministically.
fn permutation<R: Rng>(rng: &mut R, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Draws the shared pieces of the two sparse designs. `squared` adds the
/// squared-covariate terms; with `coef_sq == 0` the outputs are bit-identical
/// to the purely linear design under the same seed.
fn gen_sparse_inner(spec: &DgpSpec, squared: bool) -> Result<(Dataset, OracleInfo)> {
    if spec.n < 2 {
        return Err(Error::Validation(format!("n = {} too small", spec.n)));
    }
    if spec.k < 10 {
        return Err(Error::Validation(format!(
            "k = {} cannot place supports of size 8 with 6 overlapping",
            spec.k
        )));
    }
    let (n, k) = (spec.n, spec.k);

    // Support placement: 6 shared indices, then 2 treatment-only, 2 outcome-only.
    let mut rng_sup = stream_rng(spec.seed, STREAM_SUPPORTS);
    let perm = permutation(&mut rng_sup, k);
    let shared = &perm[0..6];
    let treat_only = &perm[6..8];
    let outcome_only = &perm[8..10];
    let mut omega = vec![0.0; k];
    let mut gamma = vec![0.0; k];
    for &j in shared {
        omega[j] = spec.coef;
        gamma[j] = spec.coef;
    }
    for &j in treat_only {
        omega[j] = spec.coef;
    }
    for &j in outcome_only {
        gamma[j] = spec.coef;
    }
    let mut outcome_support: Vec<usize> = shared.iter().chain(outcome_only).copied().collect();
    let mut treatment_support: Vec<usize> = shared.iter().chain(treat_only).copied().collect();

    // Squared supports (size 2 each), drawn independently of the linear ones.
    let mut omega_sq = vec![0.0; k];
    let mut gamma_sq = vec![0.0; k];
    if squared {
        let mut rng_sq = stream_rng(spec.seed, STREAM);
        let perm_sq = permutation(&mut rng_sq, k);
        for &j in &perm_sq[0..2] {
            omega_sq[j] = spec.coef_sq;
        }
        for &j in &perm_sq[2..4] {
            gamma_sq[j] = spec.coef_sq;
        }
        if spec.coef_sq != 0.0 {
            for &j in &perm_sq[0..2] {
                if !treatment_support.contains(&j) {
                    treatment_support.push(j);
                }
            }
            for &j in &perm_sq[2..4] {
                if !outcome_support.contains(&j) {
                    outcome_support.push(j);
                }
            }
        }
    }
    outcome_support.sort_unstable();
    treatment_support.sort_unstable();

    let mut rng_x = stream_rng(spec.seed, STREAM_X);
    let x = Array2::from_shape_vec((n, k), draw_normals(&mut rng_x, n * k))
        .expect("shape is consistent by construction");

    let mut index_y = Array1::<f64>::zeros(n);
    let mut index_d = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut iy = 0.0;
        let mut id = 0.0;
        for j in 0..k {
            let v = x[[i, j]];
            iy += v * gamma[j];
            id += v * omega[j];
            if squared && (gamma_sq[j] != 0.0 || omega_sq[j] != 0.0) {
                let v2 = v * v;
                iy += v2 * gamma_sq[j];
                id += v2 * omega_sq[j];
            }
        }
        index_y[i] = iy;
        index_d[i] = id;
    }

    let mut rng_eps = stream_rng(spec.seed, STREAM_EPS);
    let eps = Array1::from(draw_normals(&mut rng_eps, n));
    let mut rng_t = stream_rng(spec.seed, STREAM_TREAT);
    let d: Vec<u8> = (0..n)
        .map(|i| u8::from(rng_t.gen::<f64>() < sigmoid(index_d[i])))
        .collect();

    let y0 = &index_y + &eps;
    let y1 = &y0 + spec.beta0;
    let y = Array1::from_shape_fn(n, |i| if d[i] == 1 { y1[i] } else { y0[i] });
    let tau = Array1::from_elem(n, spec.beta0);
    let names = (0..k).map(|j| format!("x{}", j + 1)).collect();
    let ds = Dataset::new(x, d, y, names, Some(Truth { y0, y1, tau }))?;
    Ok((
        ds,
        OracleInfo {
            outcome_support,
            treatment_support,
        },
    ))
}

/// Sparse linear design: Y = D*beta0 + X*gamma + eps, logit treatment on
/// X*omega, with 8 nonzero coefficients per equation sharing 6 indices.
pub fn gen_sparse_linear(spec: &DgpSpec) -> Result<(Dataset, OracleInfo)> {
    if spec.kind != DgpKind::SparseLinear {
        return Err(Error::Validation("spec kind must be sparse-linear".into()));
    }
    gen_sparse_inner(spec, false)
}

/// Sparse linear design plus squared-covariate terms in both equations
/// (two nonzero squared coefficients each, supports drawn independently).
pub fn gen_sparse_linear_sq(spec: &DgpSpec) -> Result<(Dataset, OracleInfo)> {
    if spec.kind != DgpKind::SparseLinearSq {
        return Err(Error::Validation(
            "spec kind must be sparse-linear-sq".into(),
        ));
    }
    gen_sparse_inner(spec, true)
}

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

struct RandomNet {
    w1: Array2<f64>,
    w2: Array2<f64>,
    w3: Array1<f64>,
}

impl RandomNet {
    /// ELU first layer, ReLU second, linear readout, no biases.
    fn eval(&self, x: &Array2<f64>) -> Array1<f64> {
        let h1 = x.dot(&self.w1).mapv(elu);
        let h2 = h1.dot(&self.w2).mapv(|v| v.max(0.0));
        h2.dot(&self.w3)
    }
}

/// Random two-hidden-layer-net design. The outcome and treatment nets share
/// per-layer Gaussian weight cores (correlation `weight_corr`) and a common
/// zero mask, which is what induces the upward confounding bias; both indices
/// are then normalized to fixed scales estimated on an auxiliary draw so the
/// design keeps a stable overlap profile.
pub fn gen_random_nn(spec: &DgpSpec) -> Result<Dataset> {
    if spec.kind != DgpKind::RandomNn {
        return Err(Error::Validation("spec kind must be random-nn".into()));
    }
    if spec.n < 2 {
        return Err(Error::Validation(format!("n = {} too small", spec.n)));
    }
    let p = &spec.nn;
    if p.hidden_wide == 0 || p.hidden_narrow == 0 || spec.k == 0 {
        return Err(Error::Validation("degenerate random-net widths".into()));
    }
    if !(0.0..=1.0).contains(&p.p_zero) || !(-1.0..=1.0).contains(&p.weight_corr) {
        return Err(Error::Validation(
            "p_zero must be in [0,1] and weight_corr in [-1,1]".into(),
        ));
    }
    let (n, k) = (spec.n, spec.k);
    let shapes = [(k, p.hidden_wide), (p.hidden_wide, p.hidden_narrow), (p.hidden_narrow, 1)];
    let scales = [(2.0 / k as f64).sqrt(), 0.176, 0.9];

    let mut rng_net = stream_rng(spec.seed, STREAM_NET);
    let mut rng_mask = stream_rng(spec.seed, STREAM_MASK);
    let rho = p.weight_corr;
    let noise_scale = (1.0 - rho * rho).sqrt();
    let mut layers_y: Vec<Array2<f64>> = Vec::new();
    let mut layers_d: Vec<Array2<f64>> = Vec::new();
    for (li, &(rows, cols)) in shapes.iter().enumerate() {
        let mut wy = Array2::zeros((rows, cols));
        let mut wd = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                let core: f64 = StandardNormal.sample(&mut rng_net);
                let indep: f64 = StandardNormal.sample(&mut rng_net);
                let mask = if rng_mask.gen::<f64>() < p.p_zero { 0.0 } else { 1.0 };
                wy[[r, c]] = scales[li] * core * mask;
                wd[[r, c]] = scales[li] * (rho * core + noise_scale * indep) * mask;
            }
        }
        layers_y.push(wy);
        layers_d.push(wd);
    }
    let into_net = |layers: Vec<Array2<f64>>| {
        let mut it = layers.into_iter();
        RandomNet {
            w1: it.next().unwrap(),
            w2: it.next().unwrap(),
            w3: it.next().unwrap().column(0).to_owned(),
        }
    };
    let net_y = into_net(layers_y);
    let net_d = into_net(layers_d);

    // Normalization constants from an auxiliary draw, so the sampled units
    // stay iid conditional on the drawn nets.
    let aux_n = 4096;
    let mut rng_norm = stream_rng(spec.seed, STREAM_NORM);
    let aux = Array2::from_shape_vec((aux_n, k), draw_normals(&mut rng_norm, aux_n * k))
        .expect("shape is consistent by construction");
    let norm_of = |f: &Array1<f64>| {
        let mean = f.sum() / f.len() as f64;
        let var = f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (f.len() as f64 - 1.0);
        (mean, var.sqrt())
    };
    let (my, sy) = norm_of(&net_y.eval(&aux));
    let (md, sd) = norm_of(&net_d.eval(&aux));
    let apply = |f: Array1<f64>, mean: f64, s: f64, target: f64| -> Array1<f64> {
        if s < 1e-12 {
            // Collapsed net (e.g. p_zero = 1): leave the constant index as is.
            f
        } else {
            f.mapv(|v| target * (v - mean) / s)
        }
    };

    let mut rng_x = stream_rng(spec.seed, STREAM_X);
    let x = Array2::from_shape_vec((n, k), draw_normals(&mut rng_x, n * k))
        .expect("shape is consistent by construction");
    let fy = apply(net_y.eval(&x), my, sy, p.outcome_index_sd);
    let fd = apply(net_d.eval(&x), md, sd, p.treatment_index_sd);

    let mut rng_eps = stream_rng(spec.seed, STREAM_EPS);
    let eps = Array1::from(draw_normals(&mut rng_eps, n));
    let mut rng_t = stream_rng(spec.seed, STREAM_TREAT);
    let d: Vec<u8> = (0..n)
        .map(|i| u8::from(rng_t.gen::<f64>() < sigmoid(fd[i])))
        .collect();
    let y0 = &fy + &eps;
    let y1 = &y0 + spec.beta0;
    let y = Array1::from_shape_fn(n, |i| if d[i] == 1 { y1[i] } else { y0[i] });
    let tau = Array1::from_elem(n, spec.beta0);
    let names = (0..k).map(|j| format!("x{}", j + 1)).collect();
    Dataset::new(x, d, y, names, Some(Truth { y0, y1, tau }))
}

/// Propensity of the single-covariate counter-example.
pub fn counterexample_propensity(x: f64) -> f64 {
    if x >= 0.0 {
        x / (4.0 - x)
    } else {
        -3.0 * x / (4.0 - x)
    }
}

/// Control conditional mean m(x) of the counter-example.
pub fn counterexample_m(x: f64) -> f64 {
    x / 2.0
}

/// Conditional treatment effect tau(x) of the counter-example.
pub fn counterexample_tau(x: f64) -> f64 {
    (4.0 - x) / 2.0
}

/// Single-covariate design with heterogeneous effects where a metric learned
/// on pooled outcomes cannot distinguish x from -x.
///
/// x ~ U[-1,1]; E[Y(0)|x] = x/2, E[Y(1)|x] = 2, treatment assigned with the
/// piecewise propensity above; outcomes observed with additive Gaussian noise.
/// The `tau` truth column stores the conditional effect tau(x).
pub fn gen_counterexample(spec: &DgpSpec) -> Result<Dataset> {
    if spec.kind != DgpKind::Counterexample {
        return Err(Error::Validation("spec kind must be counterexample".into()));
    }
    if spec.n < 2 {
        return Err(Error::Validation(format!("n = {} too small", spec.n)));
    }
    let n = spec.n;
    let mut rng_x = stream_rng(spec.seed, STREAM_X);
    let xv: Vec<f64> = (0..n).map(|_| rng_x.gen_range(-1.0..1.0)).collect();
    let mut rng_eps = stream_rng(spec.seed, STREAM_EPS);
    let e0 = draw_normals(&mut rng_eps, n);
    let e1 = draw_normals(&mut rng_eps, n);
    let mut rng_t = stream_rng(spec.seed, STREAM_TREAT);
    let d: Vec<u8> = xv
        .iter()
        .map(|&x| u8::from(rng_t.gen::<f64>() < counterexample_propensity(x)))
        .collect();
    let y0 = Array1::from_shape_fn(n, |i| counterexample_m(xv[i]) + spec.noise_sd * e0[i]);
    let y1 = Array1::from_shape_fn(n, |i| 2.0 + spec.noise_sd * e1[i]);
    let tau = Array1::from_shape_fn(n, |i| counterexample_tau(xv[i]));
    let y = Array1::from_shape_fn(n, |i| if d[i] == 1 { y1[i] } else { y0[i] });
    let x = Array2::from_shape_vec((n, 1), xv).expect("shape is consistent by construction");
    Dataset::new(x, d, y, vec!["x1".into()], Some(Truth { y0, y1, tau }))
}

/// Simulated response surface on real covariates:
/// Y(0) = exp((X+0.5)beta) + e0, Y(1) = X beta - alpha + e1, with beta entries
/// drawn from {0, 0.1, 0.2, 0.3, 0.4} w.p. (0.6, 0.1, 0.1, 0.1, 0.1) and the
/// constant alpha set so the sample ATT over treated units equals 4.
pub fn gen_ihdp_surface(
    covariates: &Array2<f64>,
    treatment_col: usize,
    seed: u64,
) -> Result<Dataset> {
    let n = covariates.nrows();
    let p = covariates.ncols();
    if treatment_col >= p {
        return Err(Error::Validation(format!(
            "treatment column {treatment_col} out of range for {p} columns"
        )));
    }
    if n < 2 || p < 2 {
        return Err(Error::Validation("need at least 2 rows and 2 columns".into()));
    }
    let mut d = Vec::with_capacity(n);
    for i in 0..n {
        let v = covariates[[i, treatment_col]];
        if v != 0.0 && v != 1.0 {
            return Err(Error::Validation(format!(
                "treatment column contains non-binary value {v} at row {i}"
            )));
        }
        d.push(v as u8);
    }
    let keep: Vec<usize> = (0..p).filter(|&j| j != treatment_col).collect();
    let x = covariates.select(Axis(1), &keep);
    let k = x.ncols();

    let mut rng_beta = stream_rng(seed, STREAM_BETA);
    let levels = [0.0, 0.1, 0.2, 0.3, 0.4];
    let beta: Vec<f64> = (0..k)
        .map(|_| {
            let u: f64 = rng_beta.gen();
            if u < 0.6 {
                levels[0]
            } else {
                levels[1 + ((u - 0.6) / 0.1).floor().min(3.0) as usize]
            }
        })
        .collect();
    let mut rng_eps = stream_rng(seed, STREAM_EPS);
    let e0 = draw_normals(&mut rng_eps, n);
    let e1 = draw_normals(&mut rng_eps, n);

    let mut y0 = Array1::zeros(n);
    let mut y1_raw = Array1::zeros(n);
    for i in 0..n {
        let mut lin = 0.0;
        let mut off = 0.0;
        for j in 0..k {
            lin += x[[i, j]] * beta[j];
            off += (x[[i, j]] + 0.5) * beta[j];
        }
        y0[i] = off.exp() + e0[i];
        y1_raw[i] = lin + e1[i];
    }
    let treated: Vec<usize> = (0..n).filter(|&i| d[i] == 1).collect();
    if treated.is_empty() || treated.len() == n {
        return Err(Error::Validation(
            "both treatment classes must be non-empty".into(),
        ));
    }
    let alpha = treated
        .iter()
        .map(|&i| y1_raw[i] - y0[i])
        .sum::<f64>()
        / treated.len() as f64
        - 4.0;
    let y1 = y1_raw.mapv(|v| v - alpha);
    let y = Array1::from_shape_fn(n, |i| if d[i] == 1 { y1[i] } else { y0[i] });
    let tau = &y1 - &y0;
    let names = (0..k).map(|j| format!("x{}", j + 1)).collect();
    Dataset::new(x, d, y, names, Some(Truth { y0, y1, tau }))
}

/// Union or intersection of the oracle supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    Union,
    Intersection,
}

/// Matching space made of the raw standardized columns the oracle knows to
/// matter (union or intersection of the outcome and treatment supports).
pub fn oracle_matching_space(
    ds: &Dataset,
    info: &OracleInfo,
    mode: OracleMode,
) -> Result<MatchingSpace> {
    let (cols, method) = match mode {
        OracleMode::Union => (info.union(), SpaceMethod::OracleUnion),
        OracleMode::Intersection => (info.intersection(), SpaceMethod::OracleIntersection),
    };
    if cols.is_empty() {
        return Err(Error::EmptySupport(
            "oracle intersection of outcome and treatment supports is empty".into(),
        ));
    }
    if cols.iter().any(|&j| j >= ds.k()) {
        return Err(Error::Validation("oracle index out of range".into()));
    }
    let z = ds.x.select(Axis(1), &cols);
    let labels = cols.iter().map(|&j| ds.names[j].clone()).collect();
    MatchingSpace::new_pruned(z, method, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::standardize;
    use crate::linalg::{inv_spd, least_squares};
    use approx::assert_abs_diff_eq;

    fn spec(kind: DgpKind, n: usize, seed: u64) -> DgpSpec {
        DgpSpec {
            kind,
            n,
            seed,
            ..DgpSpec::default()
        }
    }

    #[test]
    fn sparse_linear_is_deterministic() {
        let s = spec(DgpKind::SparseLinear, 200, 11);
        let (a, oa) = gen_sparse_linear(&s).unwrap();
        let (b, ob) = gen_sparse_linear(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(oa, ob);
    }

    #[test]
    fn sparse_linear_supports_overlap_six() {
        let (_, info) = gen_sparse_linear(&spec(DgpKind::SparseLinear, 50, 3)).unwrap();
        assert_eq!(info.outcome_support.len(), 8);
        assert_eq!(info.treatment_support.len(), 8);
        assert_eq!(info.intersection().len(), 6);
        assert_eq!(info.union().len(), 10);
    }

    #[test]
    fn sparse_linear_rejects_small_k() {
        let mut s = spec(DgpKind::SparseLinear, 100, 0);
        s.k = 9;
        assert!(gen_sparse_linear(&s).is_err());
    }

    #[test]
    fn sparse_linear_column_means_and_treated_fraction() {
        // Frozen from a 100-seed Monte-Carlo of this generator: the treated
        // fraction stays inside (0.2, 0.8) and per-column means inside 4/sqrt(n).
        let mut worst_mean: f64 = 0.0;
        for seed in 0..100 {
            let s = spec(DgpKind::SparseLinear, 8000, seed);
            let (ds, _) = gen_sparse_linear(&s).unwrap();
            let f = ds.treated_fraction();
            assert!(
                (0.2..0.8).contains(&f),
                "seed {seed}: treated fraction {f}"
            );
            if seed < 5 {
                for col in ds.x.axis_iter(Axis(1)) {
                    let m = col.sum() / ds.n() as f64;
                    worst_mean = worst_mean.max(m.abs());
                }
            }
        }
        assert!(worst_mean < 4.0 / (8000.0_f64).sqrt(), "worst mean {worst_mean}");
    }

    #[test]
    fn sparse_linear_recovers_gamma_within_three_se() {
        let s = spec(DgpKind::SparseLinear, 8000, 5);
        let (ds, info) = gen_sparse_linear(&s).unwrap();
        // Regress y - d*beta0 on [1, X]; each support coefficient ~ 0.5.
        let n = ds.n();
        let k = ds.k();
        let mut design = Array2::ones((n, k + 1));
        design.slice_mut(ndarray::s![.., 1..]).assign(&ds.x);
        let target = Array1::from_shape_fn(n, |i| ds.y[i] - f64::from(ds.d[i]) * s.beta0);
        let names: Vec<String> = std::iter::once("const".to_string())
            .chain(ds.names.iter().cloned())
            .collect();
        let b = least_squares(&design, &target, &names).unwrap();
        let resid = &target - &design.dot(&b);
        let sigma2 = resid.iter().map(|r| r * r).sum::<f64>() / (n - k - 1) as f64;
        let xtx = design.t().dot(&design);
        let inv = inv_spd(&xtx, 1e-12).unwrap();
        for j in 0..k {
            let se = (sigma2 * inv[[j + 1, j + 1]]).sqrt();
            let truth = if info.outcome_support.contains(&j) { 0.5 } else { 0.0 };
            assert!(
                (b[j + 1] - truth).abs() < 3.0 * se,
                "coef {j}: {} vs {truth} (se {se})",
                b[j + 1]
            );
        }
    }

    #[test]
    fn sq_variant_nests_linear_when_coefficients_zero() {
        let mut s = spec(DgpKind::SparseLinearSq, 300, 21);
        s.coef_sq = 0.0;
        let (a, oa) = gen_sparse_linear_sq(&s).unwrap();
        let mut lin = s.clone();
        lin.kind = DgpKind::SparseLinear;
        let (b, ob) = gen_sparse_linear(&lin).unwrap();
        assert_eq!(a, b);
        assert_eq!(oa, ob);
    }

    #[test]
    fn sq_variant_leaves_unexplained_quadratic_variance() {
        let s = spec(DgpKind::SparseLinearSq, 8000, 9);
        let (ds, _) = gen_sparse_linear_sq(&s).unwrap();
        // OLS of y on (1, d, X) cannot absorb the squared terms; residual
        // variance stays above the pure-noise level of 1.
        let n = ds.n();
        let k = ds.k();
        let mut design = Array2::ones((n, k + 2));
        for i in 0..n {
            design[[i, 1]] = f64::from(ds.d[i]);
        }
        design.slice_mut(ndarray::s![.., 2..]).assign(&ds.x);
        let names: Vec<String> = (0..k + 2).map(|j| format!("c{j}")).collect();
        let b = least_squares(&design, &ds.y, &names).unwrap();
        let resid = &ds.y - &design.dot(&b);
        let sigma2 = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
        assert!(sigma2 > 1.0, "residual variance {sigma2}");
    }

    #[test]
    fn random_nn_is_deterministic_and_consistent() {
        let s = spec(DgpKind::RandomNn, 500, 13);
        let a = gen_random_nn(&s).unwrap();
        let b = gen_random_nn(&s).unwrap();
        assert_eq!(a, b);
        let truth = a.truth.as_ref().unwrap();
        for i in 0..a.n() {
            let expect = if a.d[i] == 1 { truth.y1[i] } else { truth.y0[i] };
            assert_eq!(a.y[i], expect);
        }
    }

    #[test]
    fn random_nn_all_weights_zeroed_removes_confounding() {
        let mut s = spec(DgpKind::RandomNn, 4000, 17);
        s.nn.p_zero = 1.0;
        let ds = gen_random_nn(&s).unwrap();
        // F_Y and F_D collapse to constants: Y(0) is pure noise and the
        // treated share sits at logistic(0) = 1/2.
        let truth = ds.truth.as_ref().unwrap();
        let m = truth.y0.sum() / ds.n() as f64;
        assert!(m.abs() < 0.1, "mean y0 {m}");
        assert!((ds.treated_fraction() - 0.5).abs() < 0.05);
        let naive = naive_diff(&ds);
        assert!((naive - 1.0).abs() < 0.15, "naive {naive}");
    }

    fn naive_diff(ds: &Dataset) -> f64 {
        let t: Vec<f64> = ds.treated_indices().iter().map(|&i| ds.y[i]).collect();
        let c: Vec<f64> = ds.control_indices().iter().map(|&i| ds.y[i]).collect();
        t.iter().sum::<f64>() / t.len() as f64 - c.iter().sum::<f64>() / c.len() as f64
    }

    #[test]
    fn random_nn_naive_estimate_is_biased_upward() {
        // Derived check: across seeds the naive difference-in-means exceeds
        // beta0 = 1 on average.
        let mut total = 0.0;
        let reps = 20;
        for seed in 0..reps {
            let s = spec(DgpKind::RandomNn, 8000, 1000 + seed);
            let ds = gen_random_nn(&s).unwrap();
            total += naive_diff(&ds);
        }
        let mean = total / reps as f64;
        assert!(mean > 1.1, "mean naive estimate {mean}");
    }

    #[test]
    fn counterexample_formula_values() {
        assert_abs_diff_eq!(counterexample_propensity(1.0), 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(counterexample_propensity(-1.0), 3.0 / 5.0, epsilon = 1e-15);
        assert_eq!(counterexample_propensity(0.0), 0.0);
        assert_abs_diff_eq!(counterexample_tau(0.0), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn counterexample_treatment_frequency_tracks_propensity() {
        let s = spec(DgpKind::Counterexample, 40000, 23);
        let ds = gen_counterexample(&s).unwrap();
        // rho stays within [0, 3/5]; realized bin frequencies match within
        // binomial error (5 sigma to keep the test stable).
        let bins = 8;
        let mut count = vec![0usize; bins];
        let mut treat = vec![0usize; bins];
        for i in 0..ds.n() {
            let x = ds.x[[i, 0]];
            let b = (((x + 1.0) / 2.0) * bins as f64).min(bins as f64 - 1.0) as usize;
            count[b] += 1;
            treat[b] += usize::from(ds.d[i] == 1);
        }
        for b in 0..bins {
            let mid = -1.0 + (b as f64 + 0.5) * 2.0 / bins as f64;
            let p = counterexample_propensity(mid);
            assert!((0.0..=0.6).contains(&p));
            let n = count[b] as f64;
            let freq = treat[b] as f64 / n;
            let tol = 5.0 * (p.max(0.01) * (1.0 - p.max(0.01)) / n).sqrt() + 0.02;
            assert!(
                (freq - p).abs() < tol,
                "bin {b}: freq {freq} vs rho {p} (tol {tol})"
            );
        }
    }

    #[test]
    fn ihdp_surface_forces_sample_att_of_four() {
        // Synthetic covariate stand-in with a binary treatment column.
        let n = 300;
        let mut rng = crate::rng::seeded_rng(5);
        let mut cov = Array2::zeros((n, 6));
        for i in 0..n {
            cov[[i, 0]] = f64::from(rng.gen::<f64>() < 0.3);
            for j in 1..6 {
                cov[[i, j]] = rng.gen::<f64>() * 2.0 - 1.0;
            }
        }
        let ds = gen_ihdp_surface(&cov, 0, 7).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        let treated = ds.treated_indices();
        let att: f64 = treated.iter().map(|&i| truth.tau[i]).sum::<f64>() / treated.len() as f64;
        assert_abs_diff_eq!(att, 4.0, epsilon = 1e-9);
        // Deterministic per seed.
        let ds2 = gen_ihdp_surface(&cov, 0, 7).unwrap();
        assert_eq!(ds, ds2);
    }

    #[test]
    fn ihdp_surface_rejects_non_binary_treatment() {
        let cov = ndarray::array![[0.5, 1.0], [0.0, 2.0]];
        assert!(gen_ihdp_surface(&cov, 0, 1).is_err());
    }

    #[test]
    fn oracle_space_dimensions() {
        let s = spec(DgpKind::SparseLinear, 400, 31);
        let (ds, info) = gen_sparse_linear(&s).unwrap();
        let (std_ds, _) = standardize(&ds).unwrap();
        let u = oracle_matching_space(&std_ds, &info, OracleMode::Union).unwrap();
        let i = oracle_matching_space(&std_ds, &info, OracleMode::Intersection).unwrap();
        assert_eq!(u.width(), 10);
        assert_eq!(i.width(), 6);
        // Union contains the intersection columnwise.
        for c in &i.columns {
            assert!(u.columns.contains(c));
        }
        // Identical sets make union equal intersection.
        let same = OracleInfo {
            outcome_support: vec![0, 1],
            treatment_support: vec![0, 1],
        };
        let us = oracle_matching_space(&std_ds, &same, OracleMode::Union).unwrap();
        let is = oracle_matching_space(&std_ds, &same, OracleMode::Intersection).unwrap();
        assert_eq!(us.z, is.z);
    }

    #[test]
    fn oracle_space_empty_intersection_errors() {
        let s = spec(DgpKind::SparseLinear, 100, 2);
        let (ds, _) = gen_sparse_linear(&s).unwrap();
        let disjoint = OracleInfo {
            outcome_support: vec![0],
            treatment_support: vec![1],
        };
        assert!(matches!(
            oracle_matching_space(&ds, &disjoint, OracleMode::Intersection),
            Err(Error::EmptySupport(_))
        ));
    }
}
