//! Exact nearest-neighbor matching with replacement, the ATT/ATUT point
//! estimators, matching standard errors with match-reuse counts, and the
//! empirical metric-condition checker.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use crate::space::MatchingSpace;
use ndarray::ArrayView1;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimand {
    Att,
    Atut,
}

/// One matched pair: a query unit and its opposite-status nearest neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    /// Row index of the query unit (treated for ATT, control for ATUT).
    pub query: usize,
    /// Row index of the matched unit.
    pub matched: usize,
    pub distance: f64,
}

/// Result of one matching run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub estimand: Estimand,
    pub pairs: Vec<MatchedPair>,
    pub estimate: f64,
    /// Matching variance; absent when a class is too small for the
    /// J-neighbor conditional-variance estimate.
    pub variance: Option<f64>,
    pub se: Option<f64>,
    pub ci95: Option<(f64, f64)>,
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Index (into `candidates`) of the nearest candidate to `query`; ties break
/// to the first (lowest-index) candidate.
fn nearest(space: &MatchingSpace, query: usize, candidates: &[usize]) -> (usize, f64) {
    let q = space.z.row(query);
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (pos, &c) in candidates.iter().enumerate() {
        let d = squared_distance(q, space.z.row(c));
        if d < best_d {
            best_d = d;
            best = pos;
        }
    }
    (best, best_d)
}

/// 1-NN matching with replacement under Euclidean distance on the space.
///
/// Exact brute-force search; ties break deterministically to the lowest row
/// index. The estimate averages treated-minus-matched outcome differences for
/// ATT and matched-minus-control differences for ATUT, so both report the
/// mean of Y(1) - Y(0) over their group. The variance slot is filled with the
/// default J = 2 matching variance when both classes are large enough.
pub fn nearest_neighbor_match(
    space: &MatchingSpace,
    ds: &Dataset,
    estimand: Estimand,
) -> Result<MatchResult> {
    if space.n() != ds.n() {
        return Err(Error::Validation(format!(
            "space has {} rows but dataset has {}",
            space.n(),
            ds.n()
        )));
    }
    let treated = ds.treated_indices();
    let control = ds.control_indices();
    let (queries, candidates) = match estimand {
        Estimand::Att => (&treated, &control),
        Estimand::Atut => (&control, &treated),
    };
    if queries.is_empty() {
        return Err(Error::Validation(format!(
            "{estimand:?} group is empty"
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Validation("no opposite-status units to match".into()));
    }
    let pairs: Vec<MatchedPair> = queries
        .par_iter()
        .map(|&q| {
            let (pos, d2) = nearest(space, q, candidates);
            MatchedPair {
                query: q,
                matched: candidates[pos],
                distance: d2.sqrt(),
            }
        })
        .collect();
    let mut sum = 0.0;
    for p in &pairs {
        let diff = ds.y[p.query] - ds.y[p.matched];
        sum += match estimand {
            Estimand::Att => diff,
            Estimand::Atut => -diff,
        };
    }
    let estimate = sum / pairs.len() as f64;
    let mut result = MatchResult {
        estimand,
        pairs,
        estimate,
        variance: None,
        se: None,
        ci95: None,
    };
    if treated.len() > DEFAULT_VARIANCE_NEIGHBORS && control.len() > DEFAULT_VARIANCE_NEIGHBORS {
        let v = abadie_imbens_variance(&result, ds, space, DEFAULT_VARIANCE_NEIGHBORS)?;
        result.set_variance(v);
    }
    Ok(result)
}

pub const DEFAULT_VARIANCE_NEIGHBORS: usize = 2;

impl MatchResult {
    fn set_variance(&mut self, v: f64) {
        let se = v.sqrt();
        self.variance = Some(v);
        self.se = Some(se);
        self.ci95 = Some((self.estimate - 1.96 * se, self.estimate + 1.96 * se));
    }

    /// Reuse count per row: how many times each unit served as a match.
    pub fn reuse_counts(&self, n: usize) -> Vec<usize> {
        let mut k = vec![0usize; n];
        for p in &self.pairs {
            k[p.matched] += 1;
        }
        k
    }

    /// CSV lines `(i, j, distance, y_i, y_j)` for audit.
    pub fn to_csv(&self, ds: &Dataset) -> String {
        let mut out = String::from("query,matched,distance,y_query,y_matched\n");
        for p in &self.pairs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.query, p.matched, p.distance, ds.y[p.query], ds.y[p.matched]
            ));
        }
        out
    }
}

/// Conditional-variance estimate at each unit: J same-group nearest neighbors
/// in the space, differenced against the unit's own outcome.
fn conditional_variances(
    ds: &Dataset,
    space: &MatchingSpace,
    group: &[usize],
    j_neighbors: usize,
) -> Vec<(usize, f64)> {
    group
        .par_iter()
        .map(|&i| {
            // J nearest same-group neighbors of i, excluding i itself.
            let q = space.z.row(i);
            let mut dists: Vec<(f64, usize)> = group
                .iter()
                .filter(|&&g| g != i)
                .map(|&g| (squared_distance(q, space.z.row(g)), g))
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            let jn = j_neighbors.min(dists.len());
            let mean_nbr: f64 =
                dists[..jn].iter().map(|&(_, g)| ds.y[g]).sum::<f64>() / jn as f64;
            let jf = jn as f64;
            let sigma2 = jf / (jf + 1.0) * (ds.y[i] - mean_nbr) * (ds.y[i] - mean_nbr);
            (i, sigma2)
        })
        .collect()
}

/// Matching-with-replacement variance for the group-average estimator:
/// query-side conditional variances plus squared reuse counts on the matched
/// side, normalized by the squared query-group size.
pub fn abadie_imbens_variance(
    result: &MatchResult,
    ds: &Dataset,
    space: &MatchingSpace,
    j_neighbors: usize,
) -> Result<f64> {
    if j_neighbors == 0 {
        return Err(Error::Validation("need at least one variance neighbor".into()));
    }
    let treated = ds.treated_indices();
    let control = ds.control_indices();
    let (queries, donors) = match result.estimand {
        Estimand::Att => (&treated, &control),
        Estimand::Atut => (&control, &treated),
    };
    if queries.len() < j_neighbors + 1 || donors.len() < j_neighbors + 1 {
        return Err(Error::Validation(format!(
            "a class with fewer than {} units cannot support {}-neighbor variance estimation",
            j_neighbors + 1,
            j_neighbors
        )));
    }
    let k = result.reuse_counts(ds.n());
    let nq = queries.len() as f64;
    let mut total = 0.0;
    for (i, s2) in conditional_variances(ds, space, queries, j_neighbors) {
        debug_assert_eq!(k[i], 0, "query units are never reused as matches");
        total += s2;
    }
    for (i, s2) in conditional_variances(ds, space, donors, j_neighbors) {
        let ki = k[i] as f64;
        total += ki * ki * s2;
    }
    Ok(total / (nq * nq))
}

/// Outcome of the empirical metric-condition check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricCheckReport {
    /// Smallest observed d(i,j) / |score_i - score_j| over the sampled pairs.
    pub min_ratio: f64,
    /// The constant the condition was checked against.
    pub c: f64,
    /// Whether min_ratio >= c.
    pub satisfied: bool,
    /// Number of pairs with a usable (nonzero) score difference.
    pub pairs_checked: usize,
    /// Up to ten sampled pairs violating the condition, worst first.
    pub violations: Vec<(usize, usize, f64)>,
}

/// Checks `d(x_i, x_j) >= C |score_i - score_j|` empirically over sampled
/// pairs (all pairs when the dataset is small). Pairs with a zero score
/// difference are excluded; if every pair has one, the ratio is undefined.
pub fn metric_condition_check(
    space: &MatchingSpace,
    ds: &Dataset,
    score: &[f64],
    c: f64,
    sample_pairs: usize,
    seed: u64,
) -> Result<MetricCheckReport> {
    if score.len() != ds.n() || space.n() != ds.n() {
        return Err(Error::Validation(
            "score and space must align with the dataset rows".into(),
        ));
    }
    if !(c > 0.0) {
        return Err(Error::Validation("the constant C must be positive".into()));
    }
    let n = ds.n();
    let all_pairs = n * (n - 1) / 2;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    if all_pairs <= sample_pairs {
        for i in 0..n {
            for j in (i + 1)..n {
                pairs.push((i, j));
            }
        }
    } else {
        let mut rng = seeded_rng(seed);
        for _ in 0..sample_pairs {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            pairs.push((i.min(j), i.max(j)));
        }
    }
    let mut min_ratio = f64::INFINITY;
    let mut checked = 0usize;
    let mut violations: Vec<(usize, usize, f64)> = Vec::new();
    for (i, j) in pairs {
        let ds_score = (score[i] - score[j]).abs();
        if ds_score < 1e-300 {
            continue;
        }
        checked += 1;
        let dist = squared_distance(space.z.row(i), space.z.row(j)).sqrt();
        let ratio = dist / ds_score;
        if ratio < min_ratio {
            min_ratio = ratio;
        }
        if ratio < c {
            violations.push((i, j, ratio));
        }
    }
    if checked == 0 {
        return Err(Error::UndefinedRatio);
    }
    violations.sort_by(|a, b| a.2.partial_cmp(&b.2).expect("finite ratios"));
    violations.truncate(10);
    Ok(MetricCheckReport {
        min_ratio,
        c,
        satisfied: min_ratio >= c,
        pairs_checked: checked,
        violations,
    })
}
