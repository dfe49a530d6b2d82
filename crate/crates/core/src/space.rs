//! The matching space: an n x z feature matrix on which Euclidean
//! nearest-neighbor matching runs, tagged with how it was built.

use crate::error::{Error, Result};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Construction method of a matching space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceMethod {
    Raw,
    Nn,
    Snn,
    L1,
    Rrf,
    Psm,
    Psmsq,
    OracleUnion,
    OracleIntersection,
}

impl fmt::Display for SpaceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SpaceMethod::Raw => "raw",
            SpaceMethod::Nn => "nn",
            SpaceMethod::Snn => "snn",
            SpaceMethod::L1 => "l1",
            SpaceMethod::Rrf => "rrf",
            SpaceMethod::Psm => "psm",
            SpaceMethod::Psmsq => "psmsq",
            SpaceMethod::OracleUnion => "oracle-union",
            SpaceMethod::OracleIntersection => "oracle-intersection",
        };
        f.write_str(s)
    }
}

/// Column variance below this is treated as zero when pruning.
pub const NEAR_ZERO_VARIANCE: f64 = 1e-8;
/// Absolute correlation above this counts as perfect.
pub const PERFECT_CORRELATION: f64 = 1.0 - 1e-10;

/// An n x z real matrix with provenance labels, pruned of degenerate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingSpace {
    pub z: Array2<f64>,
    pub method: SpaceMethod,
    /// One label per retained column (e.g. the source covariate or net unit).
    pub columns: Vec<String>,
}

impl MatchingSpace {
    /// Builds a space without pruning; the caller vouches for the columns.
    pub fn new(z: Array2<f64>, method: SpaceMethod, columns: Vec<String>) -> Result<Self> {
        if z.ncols() != columns.len() {
            return Err(Error::Validation(
                "column label count does not match width".into(),
            ));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite entry in matching space".into()));
        }
        Ok(MatchingSpace { z, method, columns })
    }

    /// Builds a space, dropping near-zero-variance columns and all but the
    /// first of any perfectly correlated group.
    pub fn new_pruned(z: Array2<f64>, method: SpaceMethod, columns: Vec<String>) -> Result<Self> {
        let keep = prune_columns(&z)?;
        if keep.is_empty() {
            return Err(Error::DegenerateEmbedding(format!(
                "method {method}: every column has near-zero variance"
            )));
        }
        let pruned = z.select(Axis(1), &keep);
        let labels = keep.iter().map(|&j| columns[j].clone()).collect();
        MatchingSpace::new(pruned, method, labels)
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn width(&self) -> usize {
        self.z.ncols()
    }
}

/// Indices of columns that survive pruning: variance above the near-zero
/// threshold and not perfectly correlated with an earlier kept column.
pub fn prune_columns(z: &Array2<f64>) -> Result<Vec<usize>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite entry in matching space".into()));
    }
    let n = z.nrows() as f64;
    let p = z.ncols();
    let mut kept: Vec<usize> = Vec::new();
    let mut stats: Vec<(f64, f64)> = Vec::new(); // (mean, sd) for kept columns
    for j in 0..p {
        let col = z.column(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        if var < NEAR_ZERO_VARIANCE {
            continue;
        }
        let sd = var.sqrt();
        let mut duplicate = false;
        for (pos, &kj) in kept.iter().enumerate() {
            let (mk, sk) = stats[pos];
            let cov = z
                .column(kj)
                .iter()
                .zip(col.iter())
                .map(|(a, b)| (a - mk) * (b - mean))
                .sum::<f64>()
                / (n - 1.0).max(1.0);
            let r = cov / (sk * sd);
            if r.abs() > PERFECT_CORRELATION {
                duplicate = true;
                break;
            }
        }
        if !duplicate {
            kept.push(j);
            stats.push((mean, sd));
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pruning_drops_constant_and_duplicate_columns() {
        // col0 fine, col1 constant, col2 duplicates col0, col3 = -2*col0 (also r = -1).
        let z = array![
            [1.0, 5.0, 1.0, -2.0],
            [2.0, 5.0, 2.0, -4.0],
            [3.0, 5.0, 3.0, -6.0]
        ];
        let keep = prune_columns(&z).unwrap();
        assert_eq!(keep, vec![0]);
    }

    #[test]
    fn degenerate_space_errors() {
        let z = array![[1.0], [1.0], [1.0]];
        let err = MatchingSpace::new_pruned(z, SpaceMethod::Nn, vec!["u0".into()]);
        assert!(matches!(err, Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn independent_columns_survive() {
        let z = array![[1.0, 0.0], [2.0, 1.5], [3.0, -0.5], [4.0, 2.5]];
        let s =
            MatchingSpace::new_pruned(z, SpaceMethod::Raw, vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(s.width(), 2);
        assert_eq!(s.columns, vec!["a", "b"]);
    }
}
