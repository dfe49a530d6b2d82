//! Data model, CSV ingestion, standardization, treatment/control splitting,
//! and class-imbalance oversampling.

use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Ground-truth potential outcomes attached to simulated data.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub y0: Array1<f64>,
    pub y1: Array1<f64>,
    pub tau: Array1<f64>,
}

/// A rectangular causal dataset: covariates, binary treatment, outcome.
///
/// Immutable after construction; all operations return new datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Covariate matrix, n x k.
    pub x: Array2<f64>,
    /// Treatment indicator, 1 = treated.
    pub d: Vec<u8>,
    /// Observed outcome.
    pub y: Array1<f64>,
    /// Covariate labels, length k.
    pub names: Vec<String>,
    /// Per-unit potential outcomes for simulated data.
    pub truth: Option<Truth>,
    /// Original row indices; identity for freshly built datasets, retained
    /// through splits and duplicated by oversampling.
    pub row_ids: Vec<usize>,
}

impl Dataset {
    /// Builds and validates a dataset with identity row ids.
    pub fn new(
        x: Array2<f64>,
        d: Vec<u8>,
        y: Array1<f64>,
        names: Vec<String>,
        truth: Option<Truth>,
    ) -> Result<Self> {
        let n = x.nrows();
        let ds = Dataset {
            x,
            d,
            y,
            names,
            truth,
            row_ids: (0..n).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.d.iter().filter(|&&t| t == 1).count()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.n_treated() as f64 / self.n() as f64
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.d[i] == 1).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.d[i] == 0).collect()
    }

    /// Checks the structural invariants: finite entries, binary non-degenerate
    /// treatment, matching lengths, and truth consistency.
    pub fn validate(&self) -> Result<()> {
        let n = self.x.nrows();
        let k = self.x.ncols();
        if n < 2 {
            return Err(Error::Validation(format!("need n >= 2 rows, got {n}")));
        }
        if k < 1 {
            return Err(Error::Validation("need k >= 1 covariates".into()));
        }
        if self.d.len() != n || self.y.len() != n || self.row_ids.len() != n {
            return Err(Error::Validation(
                "treatment/outcome/row-id length does not match X".into(),
            ));
        }
        if self.names.len() != k {
            return Err(Error::Validation(format!(
                "expected {k} covariate names, got {}",
                self.names.len()
            )));
        }
        if self.x.iter().any(|v| !v.is_finite()) || self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite value in X or y".into()));
        }
        if self.d.iter().any(|&t| t > 1) {
            return Err(Error::Validation(
                "treatment column contains values outside {0,1}".into(),
            ));
        }
        let nt = self.n_treated();
        if nt == 0 || nt == n {
            return Err(Error::Validation(
                "both treatment classes must be non-empty".into(),
            ));
        }
        if let Some(t) = &self.truth {
            if t.y0.len() != n || t.y1.len() != n || t.tau.len() != n {
                return Err(Error::Validation("truth length does not match X".into()));
            }
            for i in 0..n {
                let expect = if self.d[i] == 1 { t.y1[i] } else { t.y0[i] };
                if self.y[i] != expect {
                    return Err(Error::Validation(format!(
                        "observed outcome at row {i} does not equal its potential outcome"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Column roles for `load_csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub treatment: String,
    pub outcome: String,
    /// Covariate columns in order; empty means "all remaining numeric columns
    /// in file order".
    #[serde(default)]
    pub covariates: Vec<String>,
}

/// Reads a headered numeric CSV and maps its columns per the schema.
///
/// Row order is preserved. Non-numeric cells and out-of-range treatment
/// values are hard errors.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}' in {}", path.display())))
    };
    let d_col = col(&schema.treatment)?;
    let y_col = col(&schema.outcome)?;
    let cov_names: Vec<String> = if schema.covariates.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != d_col && *i != y_col)
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        schema.covariates.clone()
    };
    let cov_cols: Vec<usize> = cov_names.iter().map(|n| col(n)).collect::<Result<_>>()?;

    let mut x_rows: Vec<f64> = Vec::new();
    let mut d = Vec::new();
    let mut y = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |ci: usize| -> Result<f64> {
            let raw = rec.get(ci).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|e| Error::Parse {
                row: r + 2, // 1-based, counting the header line
                col: headers[ci].clone(),
                msg: format!("'{raw}': {e}"),
            })
        };
        let dv = parse(d_col)?;
        if dv != 0.0 && dv != 1.0 {
            return Err(Error::Validation(format!(
                "treatment column '{}' contains {dv} at row {} (must be 0 or 1)",
                schema.treatment,
                r + 2
            )));
        }
        d.push(dv as u8);
        y.push(parse(y_col)?);
        for &ci in &cov_cols {
            x_rows.push(parse(ci)?);
        }
    }
    let n = d.len();
    let k = cov_cols.len();
    if k == 0 {
        return Err(Error::Schema("no covariate columns".into()));
    }
    let x = Array2::from_shape_vec((n, k), x_rows)
        .map_err(|e| Error::Validation(format!("bad shape: {e}")))?;
    Dataset::new(x, d, Array1::from(y), cov_names, None)
}

/// Per-column standardization parameters, invertible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub mean: Vec<f64>,
    /// Sample standard deviation (divisor n-1); 1.0 for flagged constant columns.
    pub sd: Vec<f64>,
    /// Columns whose variance was (numerically) zero.
    pub constant_cols: Vec<usize>,
}

impl StandardizationParams {
    /// Applies the stored transform to a raw covariate matrix.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.sd[j]);
        }
        out
    }

    /// Exact inverse of `apply`.
    pub fn invert(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut out = z.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| v * self.sd[j] + self.mean[j]);
        }
        out
    }
}

/// Centers each covariate column and scales it to sample sd 1.
///
/// Constant columns are centered with divisor 1 and flagged rather than
/// rejected. Treatment and outcome pass through untouched.
pub fn standardize(ds: &Dataset) -> Result<(Dataset, StandardizationParams)> {
    ds.validate()?;
    let n = ds.n() as f64;
    let mut mean = Vec::with_capacity(ds.k());
    let mut sd = Vec::with_capacity(ds.k());
    let mut constant_cols = Vec::new();
    for (j, col) in ds.x.axis_iter(Axis(1)).enumerate() {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        let s = var.sqrt();
        mean.push(m);
        if s <= 0.0 {
            constant_cols.push(j);
            sd.push(1.0);
        } else {
            sd.push(s);
        }
    }
    let params = StandardizationParams {
        mean,
        sd,
        constant_cols,
    };
    let out = Dataset {
        x: params.apply(&ds.x),
        d: ds.d.clone(),
        y: ds.y.clone(),
        names: ds.names.clone(),
        truth: ds.truth.clone(),
        row_ids: ds.row_ids.clone(),
    };
    Ok((out, params))
}

/// Partitions rows by treatment status, keeping original row ids.
pub fn split_by_treatment(ds: &Dataset) -> Result<(Dataset, Dataset)> {
    ds.validate()?;
    let take = |keep: u8| -> Dataset {
        let idx: Vec<usize> = (0..ds.n()).filter(|&i| ds.d[i] == keep).collect();
        subset(ds, &idx)
    };
    Ok((take(0), take(1)))
}

/// Row subset preserving metadata; callers guarantee `idx` is within bounds.
pub(crate) fn subset(ds: &Dataset, idx: &[usize]) -> Dataset {
    let x = ds.x.select(Axis(0), idx);
    let y = Array1::from_iter(idx.iter().map(|&i| ds.y[i]));
    let d = idx.iter().map(|&i| ds.d[i]).collect();
    let row_ids = idx.iter().map(|&i| ds.row_ids[i]).collect();
    let truth = ds.truth.as_ref().map(|t| Truth {
        y0: Array1::from_iter(idx.iter().map(|&i| t.y0[i])),
        y1: Array1::from_iter(idx.iter().map(|&i| t.y1[i])),
        tau: Array1::from_iter(idx.iter().map(|&i| t.tau[i])),
    });
    Dataset {
        x,
        d,
        y,
        names: ds.names.clone(),
        truth,
        row_ids,
    }
}

/// Reassembles a partition into the original row order (inverse of
/// `split_by_treatment` when given its two outputs).
pub fn merge_by_row_id(parts: &[&Dataset]) -> Result<Dataset> {
    let total: usize = parts.iter().map(|p| p.n()).sum();
    let mut order: Vec<(usize, usize, usize)> = Vec::with_capacity(total); // (row_id, part, local)
    for (pi, p) in parts.iter().enumerate() {
        for (li, &rid) in p.row_ids.iter().enumerate() {
            order.push((rid, pi, li));
        }
    }
    order.sort_unstable();
    let k = parts[0].k();
    let mut x = Array2::zeros((total, k));
    let mut d = Vec::with_capacity(total);
    let mut y = Array1::zeros(total);
    let mut row_ids = Vec::with_capacity(total);
    let has_truth = parts.iter().all(|p| p.truth.is_some());
    let mut truth = if has_truth {
        Some(Truth {
            y0: Array1::zeros(total),
            y1: Array1::zeros(total),
            tau: Array1::zeros(total),
        })
    } else {
        None
    };
    for (out_i, &(rid, pi, li)) in order.iter().enumerate() {
        let p = parts[pi];
        x.row_mut(out_i).assign(&p.x.row(li));
        d.push(p.d[li]);
        y[out_i] = p.y[li];
        row_ids.push(rid);
        if let (Some(t_out), Some(t_in)) = (truth.as_mut(), p.truth.as_ref()) {
            t_out.y0[out_i] = t_in.y0[li];
            t_out.y1[out_i] = t_in.y1[li];
            t_out.tau[out_i] = t_in.tau[li];
        }
    }
    let ds = Dataset {
        x,
        d,
        y,
        names: parts[0].names.clone(),
        truth,
        row_ids,
    };
    ds.validate()?;
    Ok(ds)
}

/// Duplicates treated rows (uniformly, with replacement) until the treated
/// fraction reaches `target`, if it starts below `threshold`.
///
/// Used only to build net-training samples; the matching and estimation steps
/// always run on the original data.
pub fn oversample_treated(ds: &Dataset, threshold: f64, target: f64, seed: u64) -> Result<Dataset> {
    ds.validate()?;
    if ds.treated_fraction() >= threshold {
        return Ok(ds.clone());
    }
    let treated = ds.treated_indices();
    let nt = treated.len() as f64;
    let n = ds.n() as f64;
    // Smallest a with (nt + a) / (n + a) >= target.
    let a = ((target * n - nt) / (1.0 - target)).ceil().max(0.0) as usize;
    let mut rng = seeded_rng(seed);
    let mut idx: Vec<usize> = (0..ds.n()).collect();
    for _ in 0..a {
        idx.push(treated[rng.gen_range(0..treated.len())]);
    }
    Ok(subset(ds, &idx))
}
