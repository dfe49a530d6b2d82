//! Propensity-score baselines (logit and logit-with-squares) and the OLS
//! regression baseline with heteroskedasticity-robust errors.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{inv_spd, least_squares, solve_spd};
use crate::space::{MatchingSpace, SpaceMethod, NEAR_ZERO_VARIANCE, PERFECT_CORRELATION};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

/// Maximum-likelihood logistic fit of treatment on the covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitFit {
    /// Intercept followed by one coefficient per retained design column.
    pub coef: Vec<f64>,
    /// Design column names (intercept excluded).
    pub feature_names: Vec<String>,
    /// Fitted propensities, strictly inside (0,1).
    pub fitted: Vec<f64>,
    pub converged: bool,
    pub quadratic: bool,
}

impl LogitFit {
    /// Plain-text coefficient table.
    pub fn summary(&self) -> String {
        let mut out = String::from("term            coef\n");
        out.push_str(&format!("{:<14} {:>10.6}\n", "(intercept)", self.coef[0]));
        for (name, c) in self.feature_names.iter().zip(self.coef.iter().skip(1)) {
            out.push_str(&format!("{name:<14} {c:>10.6}\n"));
        }
        out
    }
}

/// Builds [X] or [X, X^2], dropping squared columns that are near-constant or
/// perfectly correlated with an earlier design column (e.g. squares of
/// binary dummies).
fn logit_design(ds: &Dataset, quadratic: bool) -> (Array2<f64>, Vec<String>) {
    if !quadratic {
        return (ds.x.clone(), ds.names.clone());
    }
    let n = ds.n();
    let k = ds.k();
    let mut cols: Vec<Array1<f64>> = Vec::with_capacity(2 * k);
    let mut names: Vec<String> = Vec::with_capacity(2 * k);
    for j in 0..k {
        cols.push(ds.x.column(j).to_owned());
        names.push(ds.names[j].clone());
    }
    let nf = n as f64;
    for j in 0..k {
        let sq = ds.x.column(j).mapv(|v| v * v);
        let mean = sq.sum() / nf;
        let var = sq.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
        if var < NEAR_ZERO_VARIANCE {
            continue;
        }
        let sd = var.sqrt();
        let mut duplicate = false;
        for c in &cols {
            let cm = c.sum() / nf;
            let cv = c.iter().map(|v| (v - cm) * (v - cm)).sum::<f64>() / (nf - 1.0);
            if cv < NEAR_ZERO_VARIANCE {
                continue;
            }
            let cov = c
                .iter()
                .zip(sq.iter())
                .map(|(a, b)| (a - cm) * (b - mean))
                .sum::<f64>()
                / (nf - 1.0);
            if (cov / (cv.sqrt() * sd)).abs() > PERFECT_CORRELATION {
                duplicate = true;
                break;
            }
        }
        if !duplicate {
            cols.push(sq);
            names.push(format!("{}^2", ds.names[j]));
        }
    }
    let mut design = Array2::zeros((n, cols.len()));
    for (j, c) in cols.iter().enumerate() {
        design.column_mut(j).assign(c);
    }
    (design, names)
}

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 100;
const SEPARATION_LOGIT: f64 = 30.0;

fn log_likelihood(eta: &Array1<f64>, d: &[u8]) -> f64 {
    eta.iter()
        .zip(d.iter())
        .map(|(&e, &t)| {
            // log sigma(e) and log(1 - sigma(e)) in a stable form.
            let log_p = -((-e).exp().ln_1p());
            let log_q = -(e.exp().ln_1p());
            if t == 1 {
                log_p
            } else {
                log_q
            }
        })
        .sum()
}

/// Newton-Raphson logistic MLE with step-halving.
///
/// `quadratic` appends elementwise squares of the (standardized) covariates
/// to the design. Perfect separation and singular Hessians are reported as
/// errors rather than returning garbage coefficients.
pub fn fit_logit(ds: &Dataset, quadratic: bool) -> Result<LogitFit> {
    ds.validate()?;
    let (features, names) = logit_design(ds, quadratic);
    let n = ds.n();
    let p = features.ncols() + 1;
    let mut design = Array2::ones((n, p));
    design.slice_mut(ndarray::s![.., 1..]).assign(&features);

    let mut beta = Array1::zeros(p);
    let mut eta = Array1::zeros(n);
    let mut ll = log_likelihood(&eta, &ds.d);
    let mut converged = false;
    for _iter in 0..NEWTON_MAX_ITER {
        let prob = eta.mapv(|e| 1.0 / (1.0 + (-e).exp()));
        let mut grad = Array1::<f64>::zeros(p);
        for i in 0..n {
            let r = f64::from(ds.d[i]) - prob[i];
            for j in 0..p {
                grad[j] += design[[i, j]] * r;
            }
        }
        if grad.iter().map(|g| g.abs()).fold(0.0_f64, f64::max) < NEWTON_TOL {
            converged = true;
            break;
        }
        let mut hess = Array2::zeros((p, p));
        for i in 0..n {
            let w = prob[i] * (1.0 - prob[i]);
            for a in 0..p {
                let da = design[[i, a]] * w;
                for b in a..p {
                    hess[[a, b]] += da * design[[i, b]];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[[a, b]] = hess[[b, a]];
            }
        }
        let step = match solve_spd(&hess, &grad, 1e-14) {
            Some(s) => s,
            None => {
                // Ridge-jittered retry for a numerically singular Hessian.
                let ridge = 1e-8 * (0..p).map(|j| hess[[j, j]]).sum::<f64>() / p as f64;
                let mut jittered = hess.clone();
                for j in 0..p {
                    jittered[[j, j]] += ridge.max(1e-12);
                }
                solve_spd(&jittered, &grad, 1e-14).ok_or_else(|| {
                    Error::NonConvergence("singular Hessian in logistic Newton".into())
                })?
            }
        };
        // Step-halve until the log-likelihood does not decrease.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step.mapv(|s| s * scale);
            let cand_eta = design.dot(&cand);
            let cand_ll = log_likelihood(&cand_eta, &ds.d);
            if cand_ll.is_finite() && cand_ll >= ll {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        let max_eta = eta.iter().map(|e| e.abs()).fold(0.0_f64, f64::max);
        if max_eta > SEPARATION_LOGIT {
            // A diverging linear index with a still-improving likelihood is
            // the signature of separation.
            let (j, _) = beta
                .iter()
                .enumerate()
                .skip(1)
                .map(|(j, b)| (j, b.abs()))
                .fold((1, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            return Err(Error::Separation(names[j - 1].clone()));
        }
    }
    if !converged {
        // One last gradient check: Newton may stop via step-halving failure
        // at an interior optimum.
        let prob = eta.mapv(|e| 1.0 / (1.0 + (-e).exp()));
        let mut gmax: f64 = 0.0;
        for j in 0..p {
            let mut g = 0.0;
            for i in 0..n {
                g += design[[i, j]] * (f64::from(ds.d[i]) - prob[i]);
            }
            gmax = gmax.max(g.abs());
        }
        if gmax > 1e-6 {
            return Err(Error::NonConvergence(format!(
                "logistic Newton stalled with gradient max-norm {gmax:.3e}"
            )));
        }
    }
    let fitted: Vec<f64> = eta
        .iter()
        .map(|&e| (1.0 / (1.0 + (-e).exp())).clamp(f64::MIN_POSITIVE, 1.0 - 1e-16))
        .collect();
    Ok(LogitFit {
        coef: beta.to_vec(),
        feature_names: names,
        fitted,
        converged: true,
    quadratic,
    })
}

/// One-column matching space of fitted propensities (probability scale).
pub fn psm_matching_space(ds: &Dataset, fit: &LogitFit) -> Result<MatchingSpace> {
    if fit.fitted.len() != ds.n() {
        return Err(Error::Validation(
            "fit does not align with the dataset rows".into(),
        ));
    }
    if !fit.converged {
        return Err(Error::Validation("logit fit did not converge".into()));
    }
    let z = Array2::from_shape_vec((ds.n(), 1), fit.fitted.clone())
        .expect("shape is consistent by construction");
    let method = if fit.quadratic {
        SpaceMethod::Psmsq
    } else {
        SpaceMethod::Psm
    };
    MatchingSpace::new(z, method, vec!["propensity".into()])
}

/// OLS of y on [1, d, X]; returns the treatment coefficient and its HC1
/// heteroskedasticity-robust standard error.
pub fn ols_att(ds: &Dataset) -> Result<(f64, f64)> {
    ds.validate()?;
    let n = ds.n();
    let k = ds.k();
    let p = k + 2;
    let mut design = Array2::ones((n, p));
    for i in 0..n {
        design[[i, 1]] = f64::from(ds.d[i]);
    }
    design.slice_mut(ndarray::s![.., 2..]).assign(&ds.x);
    let names: Vec<String> = ["(intercept)".to_string(), "d".to_string()]
        .into_iter()
        .chain(ds.names.iter().cloned())
        .collect();
    let beta = least_squares(&design, &ds.y, &names)?;
    let resid = &ds.y - &design.dot(&beta);
    let xtx = design.t().dot(&design);
    let inv = inv_spd(&xtx, 1e-12)
        .ok_or_else(|| Error::RankDeficient(vec!["<design>".to_string()]))?;
    // HC1 sandwich: inv(X'X) (sum e_i^2 x_i x_i') inv(X'X) * n/(n-p).
    let mut meat = Array2::zeros((p, p));
    for i in 0..n {
        let e2 = resid[i] * resid[i];
        let row = design.row(i);
        for a in 0..p {
            let ra = row[a] * e2;
            for b in a..p {
                meat[[a, b]] += ra * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            meat[[a, b]] = meat[[b, a]];
        }
    }
    let sandwich = inv.dot(&meat).dot(&inv);
    let correction = n as f64 / (n - p) as f64;
    let se = (sandwich[[1, 1]] * correction).sqrt();
    Ok((beta[1], se))
}

/// Difference in means of y between treated and control with the two-sample
/// standard error; the experimental benchmark estimator.
pub fn difference_in_means(ds: &Dataset) -> Result<(f64, f64)> {
    ds.validate()?;
    let t: Vec<f64> = ds.treated_indices().iter().map(|&i| ds.y[i]).collect();
    let c: Vec<f64> = ds.control_indices().iter().map(|&i| ds.y[i]).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    let (mt, mc) = (mean(&t), mean(&c));
    let se = (var(&t, mt) / t.len() as f64 + var(&c, mc) / c.len() as f64).sqrt();
    Ok((mt - mc, se))
}
