//! L1-penalized linear and logistic regression by (iteratively reweighted)
//! coordinate descent, with k-fold cross-validated penalty selection.
//!
//! Objectives are normalized per observation: the linear problem is
//! (1/2n)||y - b0 - X b||^2 + lambda ||b||_1, the logistic one is the mean
//! negative log-likelihood plus the same penalty, so KKT conditions read
//! |X_j' r / n| <= lambda with equality on the active set.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

/// A fitted L1 model at one penalty value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoFit {
    pub beta: Vec<f64>,
    pub intercept: f64,
    /// Penalty the returned coefficients were fit at.
    pub lambda: f64,
    /// (lambda, mean CV loss) over the grid, descending lambda; empty when no
    /// cross-validation was run.
    pub cv_curve: Vec<(f64, f64)>,
}

impl LassoFit {
    /// Indices with nonzero coefficients.
    pub fn support(&self) -> Vec<usize> {
        self.beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, _)| j)
            .collect()
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

const MAX_SWEEPS: usize = 100_000;
const KKT_INNER_TOL: f64 = 1e-8;

/// Coordinate descent for the linear lasso at a fixed lambda, warm-started
/// from (intercept, beta).
fn cd_linear(
    x: &Array2<f64>,
    y: &Array1<f64>,
    lambda: f64,
    intercept: &mut f64,
    beta: &mut [f64],
) -> Result<()> {
    let n = x.nrows();
    let p = x.ncols();
    let nf = n as f64;
    let col_sq: Vec<f64> = (0..p)
        .map(|j| x.column(j).iter().map(|v| v * v).sum::<f64>() / nf)
        .collect();
    // Residual r = y - b0 - X beta under the warm start.
    let mut r = y.clone();
    r.iter_mut().for_each(|v| *v -= *intercept);
    for j in 0..p {
        if beta[j] != 0.0 {
            let bj = beta[j];
            r.iter_mut()
                .zip(x.column(j).iter())
                .for_each(|(ri, xij)| *ri -= bj * xij);
        }
    }
    for _sweep in 0..MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        // Intercept (unpenalized).
        let shift = r.sum() / nf;
        *intercept += shift;
        r.iter_mut().for_each(|v| *v -= shift);
        max_change = max_change.max(shift.abs());
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let xj = x.column(j);
            let grad = xj.iter().zip(r.iter()).map(|(a, b)| a * b).sum::<f64>() / nf;
            let rho = grad + col_sq[j] * beta[j];
            let new = soft_threshold(rho, lambda) / col_sq[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                r.iter_mut()
                    .zip(xj.iter())
                    .for_each(|(ri, xij)| *ri -= delta * xij);
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < 1e-11 {
            // Confirm the KKT system before declaring victory.
            let mut worst: f64 = 0.0;
            let mean_r = r.sum() / nf;
            worst = worst.max(mean_r.abs());
            for j in 0..p {
                let g = x.column(j).iter().zip(r.iter()).map(|(a, b)| a * b).sum::<f64>() / nf;
                let viol = if beta[j] != 0.0 {
                    (g - lambda * beta[j].signum()).abs()
                } else {
                    (g.abs() - lambda).max(0.0)
                };
                worst = worst.max(viol);
            }
            if worst < KKT_INNER_TOL {
                return Ok(());
            }
        }
    }
    Err(Error::NonConvergence(format!(
        "linear lasso exceeded {MAX_SWEEPS} sweeps at lambda = {lambda:.3e}"
    )))
}

/// Smallest lambda at which every linear-lasso coefficient is zero.
pub fn lambda_max_linear(x: &Array2<f64>, y: &Array1<f64>) -> f64 {
    let n = x.nrows() as f64;
    let ybar = y.sum() / n;
    (0..x.ncols())
        .map(|j| {
            x.column(j)
                .iter()
                .zip(y.iter())
                .map(|(xij, yi)| xij * (yi - ybar))
                .sum::<f64>()
                .abs()
                / n
        })
        .fold(0.0_f64, f64::max)
}

/// Smallest lambda at which every logistic-lasso coefficient is zero.
pub fn lambda_max_logit(x: &Array2<f64>, d: &[u8]) -> f64 {
    let n = x.nrows() as f64;
    let dbar = d.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    (0..x.ncols())
        .map(|j| {
            x.column(j)
                .iter()
                .zip(d.iter())
                .map(|(xij, &di)| xij * (f64::from(di) - dbar))
                .sum::<f64>()
                .abs()
                / n
        })
        .fold(0.0_f64, f64::max)
}

/// Default grid: 50 log-spaced points from lambda_max down to 1e-3 of it.
pub fn default_grid(lambda_max: f64) -> Vec<f64> {
    let lo = lambda_max * 1e-3;
    let steps = 50;
    (0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            lambda_max * (lo / lambda_max).powf(t)
        })
        .collect()
}

const SEPARATION_LOGIT: f64 = 30.0;
const MAX_IRLS: usize = 400;

/// IRLS with an inner penalized weighted coordinate-descent step.
fn cd_logit(
    x: &Array2<f64>,
    d: &[u8],
    lambda: f64,
    intercept: &mut f64,
    beta: &mut [f64],
) -> Result<()> {
    let n = x.nrows();
    let p = x.ncols();
    let nf = n as f64;
    for _outer in 0..MAX_IRLS {
        let mut eta = Array1::from_elem(n, *intercept);
        for j in 0..p {
            if beta[j] != 0.0 {
                let bj = beta[j];
                eta.iter_mut()
                    .zip(x.column(j).iter())
                    .for_each(|(e, xij)| *e += bj * xij);
            }
        }
        let max_eta = eta.iter().map(|e| e.abs()).fold(0.0_f64, f64::max);
        if max_eta > SEPARATION_LOGIT {
            return Err(Error::NonConvergence(format!(
                "logistic lasso coefficients diverged (|eta| reached {max_eta:.1}); \
                 the classes may be separable at lambda = {lambda:.3e}"
            )));
        }
        let prob = eta.mapv(|e| 1.0 / (1.0 + (-e).exp()));
        // KKT check on the true (unweighted) gradient.
        let resid = Array1::from_shape_fn(n, |i| f64::from(d[i]) - prob[i]);
        let mut worst = (resid.sum() / nf).abs();
        for j in 0..p {
            let g = x.column(j).iter().zip(resid.iter()).map(|(a, b)| a * b).sum::<f64>() / nf;
            let viol = if beta[j] != 0.0 {
                (g - lambda * beta[j].signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            };
            worst = worst.max(viol);
        }
        if worst < KKT_INNER_TOL {
            return Ok(());
        }
        // Quadratic approximation: weights w and working response z.
        let w = prob.mapv(|pi| (pi * (1.0 - pi)).max(1e-6));
        let z = Array1::from_shape_fn(n, |i| eta[i] + resid[i] / w[i]);
        // One pass of weighted coordinate descent sweeps.
        let col_wsq: Vec<f64> = (0..p)
            .map(|j| {
                x.column(j)
                    .iter()
                    .zip(w.iter())
                    .map(|(xij, wi)| wi * xij * xij)
                    .sum::<f64>()
                    / nf
            })
            .collect();
        let mut r = Array1::from_shape_fn(n, |i| z[i] - eta[i]);
        let wsum = w.sum() / nf;
        for _sweep in 0..200 {
            let mut max_change: f64 = 0.0;
            let shift = w.iter().zip(r.iter()).map(|(a, b)| a * b).sum::<f64>() / nf / wsum;
            *intercept += shift;
            r.iter_mut().for_each(|v| *v -= shift);
            max_change = max_change.max(shift.abs());
            for j in 0..p {
                if col_wsq[j] == 0.0 {
                    continue;
                }
                let xj = x.column(j);
                let grad = xj
                    .iter()
                    .zip(w.iter())
                    .zip(r.iter())
                    .map(|((xij, wi), ri)| wi * xij * ri)
                    .sum::<f64>()
                    / nf;
                let rho = grad + col_wsq[j] * beta[j];
                let new = soft_threshold(rho, lambda) / col_wsq[j];
                let delta = new - beta[j];
                if delta != 0.0 {
                    r.iter_mut()
                        .zip(xj.iter())
                        .for_each(|(ri, xij)| *ri -= delta * xij);
                    beta[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            if max_change < 1e-10 {
                break;
            }
        }
    }
    Err(Error::NonConvergence(format!(
        "logistic lasso exceeded {MAX_IRLS} reweighting steps at lambda = {lambda:.3e}"
    )))
}

#[derive(Clone, Copy)]
enum Family {
    Linear,
    Logit,
}

/// Warm-started path fit over a descending lambda grid; returns coefficients
/// at each grid point.
fn path(
    x: &Array2<f64>,
    y: &Array1<f64>,
    d: &[u8],
    family: Family,
    grid: &[f64],
) -> Result<Vec<(f64, f64, Vec<f64>)>> {
    let p = x.ncols();
    let mut intercept = match family {
        Family::Linear => 0.0,
        Family::Logit => {
            let n = x.nrows() as f64;
            let share = (d.iter().map(|&v| f64::from(v)).sum::<f64>() / n).clamp(1e-12, 1.0 - 1e-12);
            (share / (1.0 - share)).ln()
        }
    };
    let mut beta = vec![0.0; p];
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        match family {
            Family::Linear => cd_linear(x, y, lambda, &mut intercept, &mut beta)?,
            Family::Logit => cd_logit(x, d, lambda, &mut intercept, &mut beta)?,
        }
        out.push((lambda, intercept, beta.clone()));
    }
    Ok(out)
}

fn held_out_loss(
    x: &Array2<f64>,
    y: &Array1<f64>,
    d: &[u8],
    family: Family,
    intercept: f64,
    beta: &[f64],
) -> f64 {
    let n = x.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut eta = intercept;
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                eta += b * x[[i, j]];
            }
        }
        total += match family {
            Family::Linear => {
                let r = y[i] - eta;
                r * r
            }
            Family::Logit => {
                let log_p = -((-eta).exp().ln_1p());
                let log_q = -(eta.exp().ln_1p());
                if d[i] == 1 {
                    -log_p
                } else {
                    -log_q
                }
            }
        };
    }
    total / n as f64
}

/// Deterministic fold assignment: a seeded shuffle chunked into `folds` parts.
fn fold_ids(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed);
    for i in (1..n).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let mut ids = vec![0usize; n];
    for (pos, &row) in order.iter().enumerate() {
        ids[row] = pos % folds;
    }
    ids
}

fn fit_cv(
    ds: &Dataset,
    family: Family,
    grid: Option<&[f64]>,
    cv_folds: usize,
    seed: u64,
    penalty_scale: f64,
) -> Result<LassoFit> {
    ds.validate()?;
    if !(penalty_scale > 0.0) {
        return Err(Error::Validation("penalty scale must be positive".into()));
    }
    let x = &ds.x;
    let lmax = match family {
        Family::Linear => lambda_max_linear(x, &ds.y),
        Family::Logit => lambda_max_logit(x, &ds.d),
    };
    let default;
    let grid: &[f64] = match grid {
        Some(g) if !g.is_empty() => g,
        _ => {
            default = default_grid(lmax.max(f64::MIN_POSITIVE));
            &default
        }
    };
    let mut sorted: Vec<f64> = grid.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite lambdas"));

    let mut cv_curve = Vec::new();
    let chosen = if cv_folds >= 2 && sorted.len() > 1 {
        let ids = fold_ids(ds.n(), cv_folds, seed);
        let mut losses = vec![0.0; sorted.len()];
        for fold in 0..cv_folds {
            let train_rows: Vec<usize> = (0..ds.n()).filter(|&i| ids[i] != fold).collect();
            let test_rows: Vec<usize> = (0..ds.n()).filter(|&i| ids[i] == fold).collect();
            if train_rows.is_empty() || test_rows.is_empty() {
                continue;
            }
            let xt = x.select(Axis(0), &train_rows);
            let yt = Array1::from_iter(train_rows.iter().map(|&i| ds.y[i]));
            let dt: Vec<u8> = train_rows.iter().map(|&i| ds.d[i]).collect();
            let xv = x.select(Axis(0), &test_rows);
            let yv = Array1::from_iter(test_rows.iter().map(|&i| ds.y[i]));
            let dv: Vec<u8> = test_rows.iter().map(|&i| ds.d[i]).collect();
            for (gi, (lambda, b0, beta)) in path(&xt, &yt, &dt, family, &sorted)?.iter().enumerate()
            {
                let _ = lambda;
                losses[gi] += held_out_loss(&xv, &yv, &dv, family, *b0, beta) / cv_folds as f64;
            }
        }
        let mut best = 0;
        for gi in 1..sorted.len() {
            if losses[gi] < losses[best] {
                best = gi;
            }
        }
        cv_curve = sorted.iter().copied().zip(losses).collect();
        sorted[best]
    } else {
        sorted[0]
    };

    let final_lambda = chosen * penalty_scale;
    // Refit on the full data along the path down to the chosen penalty.
    let mut refit_grid: Vec<f64> = sorted.iter().copied().filter(|&l| l > final_lambda).collect();
    refit_grid.push(final_lambda);
    let fits = path(x, &ds.y, &ds.d, family, &refit_grid)?;
    let (lambda, intercept, beta) = fits.into_iter().last().expect("grid is non-empty");
    Ok(LassoFit {
        beta,
        intercept,
        lambda,
        cv_curve,
    })
}

/// LASSO of y on X with the penalty chosen by k-fold cross-validation
/// (multiplied by `penalty_scale` before the final refit).
pub fn lasso_linear(
    ds: &Dataset,
    grid: Option<&[f64]>,
    cv_folds: usize,
    seed: u64,
    penalty_scale: f64,
) -> Result<LassoFit> {
    fit_cv(ds, Family::Linear, grid, cv_folds, seed, penalty_scale)
}

/// L1-penalized logit of d on X with cross-validated penalty.
pub fn lasso_logit(
    ds: &Dataset,
    grid: Option<&[f64]>,
    cv_folds: usize,
    seed: u64,
    penalty_scale: f64,
) -> Result<LassoFit> {
    fit_cv(ds, Family::Logit, grid, cv_folds, seed, penalty_scale)
}

/// Linear-lasso fit at one fixed penalty (no cross-validation).
pub fn lasso_linear_at(ds: &Dataset, lambda: f64) -> Result<LassoFit> {
    ds.validate()?;
    let mut intercept = 0.0;
    let mut beta = vec![0.0; ds.k()];
    cd_linear(&ds.x, &ds.y, lambda, &mut intercept, &mut beta)?;
    Ok(LassoFit {
        beta,
        intercept,
        lambda,
        cv_curve: Vec::new(),
    })
}

/// Logistic-lasso fit at one fixed penalty (no cross-validation).
pub fn lasso_logit_at(ds: &Dataset, lambda: f64) -> Result<LassoFit> {
    ds.validate()?;
    let n = ds.n() as f64;
    let share = (ds.d.iter().map(|&v| f64::from(v)).sum::<f64>() / n).clamp(1e-12, 1.0 - 1e-12);
    let mut intercept = (share / (1.0 - share)).ln();
    let mut beta = vec![0.0; ds.k()];
    cd_logit(&ds.x, &ds.d, lambda, &mut intercept, &mut beta)?;
    Ok(LassoFit {
        beta,
        intercept,
        lambda,
        cv_curve: Vec::new(),
    })
}

/// Worst-case KKT violation of a linear-lasso solution; used by tests and the
/// acceptance suite.
pub fn kkt_residual_linear(ds: &Dataset, fit: &LassoFit) -> f64 {
    let n = ds.n() as f64;
    let mut r = ds.y.clone();
    r.iter_mut().for_each(|v| *v -= fit.intercept);
    for (j, &b) in fit.beta.iter().enumerate() {
        if b != 0.0 {
            r.iter_mut()
                .zip(ds.x.column(j).iter())
                .for_each(|(ri, xij)| *ri -= b * xij);
        }
    }
    let mut worst = (r.sum() / n).abs();
    for (j, &b) in fit.beta.iter().enumerate() {
        let g = ds.x.column(j).iter().zip(r.iter()).map(|(a, c)| a * c).sum::<f64>() / n;
        let viol = if b != 0.0 {
            (g - fit.lambda * b.signum()).abs()
        } else {
            (g.abs() - fit.lambda).max(0.0)
        };
        worst = worst.max(viol);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::least_squares;
    use crate::rng::seeded_rng;
    use crate::simgen::{gen_sparse_linear, DgpKind, DgpSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_ds(n: usize, k: usize, seed: u64) -> Dataset {
        let mut rng = seeded_rng(seed);
        let x = Array2::from_shape_fn((n, k), |_| StandardNormal.sample(&mut rng));
        let d: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        let y = Array1::from_shape_fn(n, |i| {
            1.5 * x[[i, 0]] - 0.8 * x[[i, 2]] + 0.3 * StandardNormal.sample(&mut rng) as f64
        });
        Dataset::new(x, d, y, (0..k).map(|j| format!("x{j}")).collect(), None).unwrap()
    }

    #[test]
    fn unpenalized_limit_matches_ols() {
        let ds = random_ds(120, 6, 1);
        let fit = lasso_linear_at(&ds, 0.0).unwrap();
        let n = ds.n();
        let mut design = Array2::ones((n, 7));
        design.slice_mut(ndarray::s![.., 1..]).assign(&ds.x);
        let names: Vec<String> = (0..7).map(|j| format!("c{j}")).collect();
        let ols = least_squares(&design, &ds.y, &names).unwrap();
        assert_abs_diff_eq!(fit.intercept, ols[0], epsilon = 1e-6);
        for j in 0..6 {
            assert_abs_diff_eq!(fit.beta[j], ols[j + 1], epsilon = 1e-6);
        }
    }

    #[test]
    fn lambda_at_or_above_max_zeroes_everything() {
        let ds = random_ds(80, 5, 2);
        let lmax = lambda_max_linear(&ds.x, &ds.y);
        for scale in [1.0, 1.5] {
            let fit = lasso_linear_at(&ds, lmax * scale).unwrap();
            assert!(fit.beta.iter().all(|&b| b == 0.0), "scale {scale}");
        }
        // Just below lambda_max something activates.
        let fit = lasso_linear_at(&ds, lmax * 0.99).unwrap();
        assert!(fit.beta.iter().any(|&b| b != 0.0));
    }

    #[test]
    fn kkt_residuals_are_small_along_the_path() {
        let ds = random_ds(150, 8, 3);
        let lmax = lambda_max_linear(&ds.x, &ds.y);
        for frac in [0.5, 0.1, 0.01] {
            let fit = lasso_linear_at(&ds, lmax * frac).unwrap();
            let worst = kkt_residual_linear(&ds, &fit);
            assert!(worst <= 1e-6, "frac {frac}: KKT residual {worst}");
        }
    }

    #[test]
    fn cv_selects_a_reasonable_penalty_and_records_the_curve() {
        let ds = random_ds(200, 10, 4);
        let fit = lasso_linear(&ds, None, 5, 7, 1.0).unwrap();
        assert_eq!(fit.cv_curve.len(), 50);
        assert!(fit.lambda > 0.0);
        // True support {0, 2} must be found at the CV penalty.
        let support = fit.support();
        assert!(support.contains(&0) && support.contains(&2), "{support:?}");
    }

    #[test]
    fn logit_large_lambda_gives_null_model() {
        let ds = random_ds(300, 6, 5);
        let lmax = lambda_max_logit(&ds.x, &ds.d);
        let fit = lasso_logit_at(&ds, lmax * 1.2).unwrap();
        assert!(fit.beta.iter().all(|&b| b == 0.0));
        let share = ds.treated_fraction();
        assert_abs_diff_eq!(fit.intercept, (share / (1.0 - share)).ln(), epsilon = 1e-6);
    }

    #[test]
    fn separable_data_at_zero_penalty_errors() {
        let x = array![[-2.0], [-1.5], [-1.0], [1.0], [1.5], [2.0]];
        let d = vec![0, 0, 0, 1, 1, 1];
        let ds = Dataset::new(x, d, Array1::zeros(6), vec!["x".into()], None).unwrap();
        assert!(matches!(
            lasso_logit_at(&ds, 0.0),
            Err(Error::NonConvergence(_))
        ));
    }

    #[test]
    fn logit_recovers_a_strong_signal() {
        let mut rng = seeded_rng(6);
        let n = 2000;
        let k = 8;
        let x = Array2::from_shape_fn((n, k), |_| StandardNormal.sample(&mut rng));
        let d: Vec<u8> = (0..n)
            .map(|i| {
                let eta = 1.2 * x[[i, 0]] - 0.9 * x[[i, 3]];
                u8::from(rng.gen::<f64>() < 1.0 / (1.0 + (-eta).exp()))
            })
            .collect();
        let ds = Dataset::new(
            x,
            d,
            Array1::zeros(n),
            (0..k).map(|j| format!("x{j}")).collect(),
            None,
        )
        .unwrap();
        let fit = lasso_logit(&ds, None, 5, 11, 1.0).unwrap();
        let support = fit.support();
        assert!(support.contains(&0) && support.contains(&3), "{support:?}");
    }

    // Simulation oracle: CV-selected penalties recover the true sparse
    // supports on nearly every draw.
    #[test]
    fn sparse_linear_support_recovery() {
        let mut y_hits = 0;
        let mut d_hits = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let spec = DgpSpec {
                kind: DgpKind::SparseLinear,
                n: 8000,
                seed: 400 + seed,
                ..DgpSpec::default()
            };
            let (raw, info) = gen_sparse_linear(&spec).unwrap();
            let (ds, _) = crate::dataset::standardize(&raw).unwrap();
            let fy = lasso_linear(&ds, None, 5, seed, 1.0).unwrap();
            if info.outcome_support.iter().all(|j| fy.support().contains(j)) {
                y_hits += 1;
            }
            let fd = lasso_logit(&ds, None, 5, seed, 1.0).unwrap();
            if info
                .treatment_support
                .iter()
                .all(|j| fd.support().contains(j))
            {
                d_hits += 1;
            }
        }
        assert!(y_hits >= 19, "outcome support recovered in {y_hits}/{seeds}");
        assert!(d_hits >= 19, "treatment support recovered in {d_hits}/{seeds}");
    }
}
