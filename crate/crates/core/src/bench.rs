//! Experiment orchestration: Monte-Carlo simulation tables, the two
//! real-data harnesses, the pooled-vs-split consistency demonstration, and
//! report aggregation.

use crate::dataset::{load_csv, standardize, CsvSchema, Dataset};
use crate::error::{Error, Result};
use crate::matching::{nearest_neighbor_match, Estimand};
use crate::net::{nn_matching_space, NetConfig};
use crate::parametric::{difference_in_means, fit_logit, ols_att, psm_matching_space};
use crate::rng::derive_seed;
use crate::siamese::{snn_matching_space, SnnConfig};
use crate::simgen::{
    counterexample_propensity, counterexample_tau, gen_ihdp_surface, oracle_matching_space,
    DgpKind, DgpSpec, OracleInfo, OracleMode,
};
use crate::space::{MatchingSpace, SpaceMethod};
use crate::varselect::{
    l1_matching_space, lasso_linear, lasso_logit, rrf_matching_space, rrf_train, rrf_train_cv,
    ForestTarget, RrfParams,
};
use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

/// Method identifiers used in reports and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    Nn,
    Snn,
    L1,
    Rrf,
    Psm,
    Psmsq,
    UOracle,
    IntOracle,
    Raw,
    Ols,
}

impl MethodTag {
    pub fn name(self) -> &'static str {
        match self {
            MethodTag::Nn => "nn",
            MethodTag::Snn => "snn",
            MethodTag::L1 => "l1",
            MethodTag::Rrf => "rrf",
            MethodTag::Psm => "psm",
            MethodTag::Psmsq => "psmsq",
            MethodTag::UOracle => "u-oracle",
            MethodTag::IntOracle => "int-oracle",
            MethodTag::Raw => "raw",
            MethodTag::Ols => "ols",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "nn" => MethodTag::Nn,
            "snn" => MethodTag::Snn,
            "l1" => MethodTag::L1,
            "rrf" => MethodTag::Rrf,
            "psm" => MethodTag::Psm,
            "psmsq" => MethodTag::Psmsq,
            "u-oracle" => MethodTag::UOracle,
            "int-oracle" => MethodTag::IntOracle,
            "raw" => MethodTag::Raw,
            "ols" => MethodTag::Ols,
            other => {
                return Err(Error::Validation(format!(
                    "unknown method '{other}' (expected one of nn, snn, l1, rrf, psm, psmsq, \
                     u-oracle, int-oracle, raw, ols)"
                )))
            }
        })
    }

    /// True for methods whose result depends on a training seed.
    pub fn is_stochastic(self) -> bool {
        matches!(self, MethodTag::Nn | MethodTag::Snn)
    }
}

/// A method plus its configuration. Seeds inside the configs are treated as
/// bases and re-derived per replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub tag: MethodTag,
    #[serde(default)]
    pub net_y: Option<NetConfig>,
    #[serde(default)]
    pub net_d: Option<NetConfig>,
    #[serde(default)]
    pub snn_y: Option<SnnConfig>,
    #[serde(default)]
    pub snn_d: Option<SnnConfig>,
    /// Cross-validation folds for the L1 method.
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    /// Multiplier on the CV-selected L1 penalty.
    #[serde(default = "default_scale")]
    pub penalty_scale: f64,
    /// Fixed forest penalty; when `rrf_grid` is non-empty it is ignored and
    /// the penalty is cross-validated over the grid instead.
    #[serde(default = "default_rrf_lambda")]
    pub rrf_lambda: f64,
    #[serde(default)]
    pub rrf_grid: Vec<f64>,
    #[serde(default)]
    pub rrf_params: RrfParams,
}

fn default_folds() -> usize {
    5
}
fn default_scale() -> f64 {
    1.0
}
fn default_rrf_lambda() -> f64 {
    1.0
}

impl MethodSpec {
    pub fn new(tag: MethodTag) -> Self {
        MethodSpec {
            tag,
            net_y: None,
            net_d: None,
            snn_y: None,
            snn_d: None,
            cv_folds: default_folds(),
            penalty_scale: default_scale(),
            rrf_lambda: default_rrf_lambda(),
            rrf_grid: Vec::new(),
            rrf_params: RrfParams::default(),
        }
    }

    /// One estimate on a standardized dataset. `seed` reseeds every
    /// stochastic component; `oracle` is required by the oracle methods.
    pub fn run(
        &self,
        ds: &Dataset,
        oracle: Option<&OracleInfo>,
        estimand: Estimand,
        seed: u64,
    ) -> Result<MethodRun> {
        if self.tag == MethodTag::Ols {
            let (estimate, se) = ols_att(ds)?;
            return Ok(MethodRun {
                estimate,
                se: Some(se),
            });
        }
        let space = self.matching_space(ds, oracle, estimand, seed)?;
        let result = nearest_neighbor_match(&space, ds, estimand)?;
        Ok(MethodRun {
            estimate: result.estimate,
            se: result.se,
        })
    }

    /// Builds this method's matching space on a standardized dataset.
    pub fn matching_space(
        &self,
        ds: &Dataset,
        oracle: Option<&OracleInfo>,
        estimand: Estimand,
        seed: u64,
    ) -> Result<MatchingSpace> {
        match self.tag {
            MethodTag::Nn => {
                let mut cfg_y = self
                    .net_y
                    .clone()
                    .unwrap_or_else(|| NetConfig::outcome_default(estimand, 0));
                let mut cfg_d = self
                    .net_d
                    .clone()
                    .unwrap_or_else(|| NetConfig::treatment_default(0));
                cfg_y.seed = derive_seed(seed, 1);
                cfg_d.seed = derive_seed(seed, 2);
                nn_matching_space(ds, &cfg_y, &cfg_d, estimand)
            }
            MethodTag::Snn => {
                let mut cfg_y = self
                    .snn_y
                    .clone()
                    .unwrap_or_else(|| SnnConfig::outcome_default(estimand, 0));
                let mut cfg_d = self
                    .snn_d
                    .clone()
                    .unwrap_or_else(|| SnnConfig::treatment_default(0));
                cfg_y.seed = derive_seed(seed, 3);
                cfg_d.seed = derive_seed(seed, 4);
                snn_matching_space(ds, &cfg_y, &cfg_d, estimand)
            }
            MethodTag::L1 => {
                let fy = lasso_linear(ds, None, self.cv_folds, derive_seed(seed, 5), self.penalty_scale)?;
                let fd = lasso_logit(ds, None, self.cv_folds, derive_seed(seed, 6), self.penalty_scale)?;
                l1_matching_space(ds, &fy, &fd)
            }
            MethodTag::Rrf => {
                let (fy, fd) = if self.rrf_grid.is_empty() {
                    (
                        rrf_train(ds, ForestTarget::Outcome, self.rrf_lambda, self.rrf_params, derive_seed(seed, 7))?,
                        rrf_train(ds, ForestTarget::Treatment, self.rrf_lambda, self.rrf_params, derive_seed(seed, 8))?,
                    )
                } else {
                    (
                        rrf_train_cv(ds, ForestTarget::Outcome, &self.rrf_grid, self.cv_folds, self.rrf_params, derive_seed(seed, 7))?,
                        rrf_train_cv(ds, ForestTarget::Treatment, &self.rrf_grid, self.cv_folds, self.rrf_params, derive_seed(seed, 8))?,
                    )
                };
                rrf_matching_space(ds, &fy, &fd)
            }
            MethodTag::Psm => {
                let fit = fit_logit(ds, false)?;
                psm_matching_space(ds, &fit)
            }
            MethodTag::Psmsq => {
                let fit = fit_logit(ds, true)?;
                psm_matching_space(ds, &fit)
            }
            MethodTag::UOracle | MethodTag::IntOracle => {
                let info = oracle.ok_or_else(|| {
                    Error::Validation(format!(
                        "method '{}' needs oracle support information, which this data \
                         generator does not expose",
                        self.tag.name()
                    ))
                })?;
                let mode = if self.tag == MethodTag::UOracle {
                    OracleMode::Union
                } else {
                    OracleMode::Intersection
                };
                oracle_matching_space(ds, info, mode)
            }
            MethodTag::Raw => MatchingSpace::new_pruned(
                ds.x.clone(),
                SpaceMethod::Raw,
                ds.names.clone(),
            ),
            MethodTag::Ols => Err(Error::Validation(
                "ols is a regression baseline; it has no matching space".into(),
            )),
        }
    }
}

/// One method evaluation: the point estimate and, for matching methods, the
/// matching standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MethodRun {
    pub estimate: f64,
    pub se: Option<f64>,
}

/// Per-method aggregate over replications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean: f64,
    /// Sample standard deviation (divisor R-1).
    pub sd: f64,
    /// Root mean squared error against the truth: because sd uses divisor
    /// R-1, rmse^2 = (mean - truth)^2 + sd^2 (R-1)/R.
    pub rmse: f64,
    pub replications: usize,
    pub failures: usize,
}

/// One replication's estimates (None where the method failed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub estimates: Vec<Option<f64>>,
}

/// Full simulation report, self-describing enough to replay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub dgp: DgpSpec,
    pub methods: Vec<String>,
    pub reps: usize,
    pub master_seed: u64,
    pub truth: f64,
    pub rows: Vec<MethodSummary>,
    pub records: Vec<RepRecord>,
    pub wall_clock_secs: f64,
}

fn summarize(method: &str, estimates: &[f64], truth: f64, failures: usize) -> MethodSummary {
    let r = estimates.len();
    let mean = estimates.iter().sum::<f64>() / r as f64;
    let sd = if r > 1 {
        (estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (r - 1) as f64).sqrt()
    } else {
        0.0
    };
    let rmse = (estimates.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / r as f64).sqrt();
    MethodSummary {
        method: method.to_string(),
        mean,
        sd,
        rmse,
        replications: r,
        failures,
    }
}

impl BenchReport {
    /// Aligned text table in the row layout of the simulation studies.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "");
        for row in &self.rows {
            let _ = write!(out, "{:>12}", row.method);
        }
        out.push('\n');
        for (label, f) in [
            ("Mean", &(|r: &MethodSummary| r.mean) as &dyn Fn(&MethodSummary) -> f64),
            ("SD", &|r: &MethodSummary| r.sd),
            ("RMSE", &|r: &MethodSummary| r.rmse),
        ] {
            let _ = write!(out, "{label:<8}");
            for row in &self.rows {
                let _ = write!(out, "{:>12.4}", f(row));
            }
            out.push('\n');
        }
        let failures: usize = self.rows.iter().map(|r| r.failures).sum();
        if failures > 0 {
            let _ = writeln!(out, "warning: {failures} replication failures excluded");
        }
        out
    }

    /// CSV of the per-method summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,mean,sd,rmse,replications,failures\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method, r.mean, r.sd, r.rmse, r.replications, r.failures
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs the Monte-Carlo study: per replication, generate data at a derived
/// seed, standardize, build each method's space, match, then aggregate
/// mean / SD / RMSE against the design's true effect.
pub fn run_simulation(
    dgp: &DgpSpec,
    methods: &[MethodSpec],
    reps: usize,
    master_seed: u64,
) -> Result<BenchReport> {
    if reps == 0 {
        return Err(Error::Validation("need at least one replication".into()));
    }
    if methods.is_empty() {
        return Err(Error::Validation("need at least one method".into()));
    }
    let has_oracle = matches!(dgp.kind, DgpKind::SparseLinear | DgpKind::SparseLinearSq);
    if !has_oracle {
        if let Some(m) = methods
            .iter()
            .find(|m| matches!(m.tag, MethodTag::UOracle | MethodTag::IntOracle))
        {
            return Err(Error::Validation(format!(
                "method '{}' is only valid for generators that expose oracle supports",
                m.tag.name()
            )));
        }
    }
    let truth = match dgp.kind {
        DgpKind::Counterexample => counterexample_true_att(),
        _ => dgp.beta0,
    };
    let start = Instant::now();
    let records: Vec<Result<RepRecord>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let seed = derive_seed(master_seed, rep as u64);
            let mut spec = dgp.clone();
            spec.seed = seed;
            let (raw, oracle) = spec.generate()?;
            let (ds, _) = standardize(&raw)?;
            let estimates = methods
                .iter()
                .enumerate()
                .map(|(mi, m)| {
                    m.run(&ds, oracle.as_ref(), Estimand::Att, derive_seed(seed, 100 + mi as u64))
                        .map(|r| r.estimate)
                        .ok()
                })
                .collect();
            Ok(RepRecord {
                rep,
                seed,
                estimates,
            })
        })
        .collect();
    let records: Vec<RepRecord> = records.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(methods.len());
    for (mi, m) in methods.iter().enumerate() {
        let values: Vec<f64> = records.iter().filter_map(|r| r.estimates[mi]).collect();
        let failures = reps - values.len();
        if failures * 20 > reps {
            return Err(Error::NonConvergence(format!(
                "method '{}' failed in {failures}/{reps} replications (> 5%)",
                m.tag.name()
            )));
        }
        if values.is_empty() {
            return Err(Error::NonConvergence(format!(
                "method '{}' produced no estimates",
                m.tag.name()
            )));
        }
        rows.push(summarize(m.tag.name(), &values, truth, failures));
    }
    Ok(BenchReport {
        dgp: dgp.clone(),
        methods: methods.iter().map(|m| m.tag.name().to_string()).collect(),
        reps,
        master_seed,
        truth,
        rows,
        records,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// True ATT of the single-covariate counter-example by Simpson quadrature of
/// tau(x) rho(x) / 2 over [-1, 1], normalized by the treated mass.
pub fn counterexample_true_att() -> f64 {
    let steps = 20_000;
    let h = 2.0 / steps as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..=steps {
        let x = -1.0 + i as f64 * h;
        let w = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let rho = counterexample_propensity(x);
        num += w * counterexample_tau(x) * rho * 0.5;
        den += w * rho * 0.5;
    }
    num / den
}

/// Pooled-vs-split consistency demonstration on the counter-example design.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub n: usize,
    pub seed: u64,
    pub att_true: f64,
    pub pooled_estimate: f64,
    pub pooled_bias: f64,
    pub split_estimate: f64,
    pub split_bias: f64,
}

impl ConsistencyReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "true ATT (quadrature): {:.4}", self.att_true);
        let _ = writeln!(
            out,
            "{:<22} {:>10} {:>10}",
            "outcome-net training", "estimate", "bias"
        );
        let _ = writeln!(
            out,
            "{:<22} {:>10.4} {:>10.4}",
            "pooled", self.pooled_estimate, self.pooled_bias
        );
        let _ = writeln!(
            out,
            "{:<22} {:>10.4} {:>10.4}",
            "control-only", self.split_estimate, self.split_bias
        );
        out
    }
}

fn demo_net_config(pooled: bool, seed: u64) -> NetConfig {
    NetConfig {
        hidden: vec![32, 1],
        activations: vec![crate::net::Activation::Relu, crate::net::Activation::Identity],
        epochs: 80,
        subsample: if pooled {
            crate::net::Subsample::Pooled
        } else {
            crate::net::Subsample::ControlOnly
        },
        seed,
        ..NetConfig::default()
    }
}

/// Trains one outcome net on pooled data and one on control-only data,
/// matches on each 1-D embedding, and reports both ATT estimates against the
/// quadrature truth.
pub fn consistency_demo(n: usize, seed: u64) -> Result<ConsistencyReport> {
    let spec = DgpSpec {
        kind: DgpKind::Counterexample,
        n,
        seed,
        ..DgpSpec::default()
    };
    let raw = crate::simgen::gen_counterexample(&spec)?;
    let (ds, _) = standardize(&raw)?;
    let att_true = counterexample_true_att();
    let run = |pooled: bool, stream: u64| -> Result<f64> {
        let cfg = demo_net_config(pooled, derive_seed(seed, stream));
        let net = crate::net::train(&ds, &cfg)?;
        let emb = crate::net::extract_embedding(&net, &ds.x)?;
        let space = MatchingSpace::new(emb, SpaceMethod::Nn, vec!["e0".into()])?;
        Ok(nearest_neighbor_match(&space, &ds, Estimand::Att)?.estimate)
    };
    let pooled_estimate = run(true, 11)?;
    let split_estimate = run(false, 12)?;
    Ok(ConsistencyReport {
        n,
        seed,
        att_true,
        pooled_estimate,
        pooled_bias: pooled_estimate - att_true,
        split_estimate,
        split_bias: split_estimate - att_true,
    })
}

/// One row of the observational-benchmark table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LalondeRow {
    pub method: String,
    pub estimate: f64,
    /// Estimate minus the experimental benchmark.
    pub difference: f64,
    pub se: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    /// Per-seed estimates for methods averaged over repeated runs.
    pub per_run: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LalondeReport {
    pub experimental_estimate: f64,
    pub experimental_se: f64,
    pub experimental_ci95: (f64, f64),
    pub rows: Vec<LalondeRow>,
    pub stochastic_reps: usize,
    pub master_seed: u64,
}

impl LalondeReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>12} {:>12} {:>12} {:>22}",
            "method", "estimate", "difference", "se", "95% CI"
        );
        let ci = self.experimental_ci95;
        let _ = writeln!(
            out,
            "{:<14} {:>12.2} {:>12.2} {:>12.2} {:>22}",
            "experimental",
            self.experimental_estimate,
            0.0,
            self.experimental_se,
            format!("({:.0}, {:.0})", ci.0, ci.1)
        );
        for r in &self.rows {
            let se = r.se.map_or("-".to_string(), |s| format!("{s:.2}"));
            let ci = r
                .ci95
                .map_or("-".to_string(), |c| format!("({:.0}, {:.0})", c.0, c.1));
            let _ = writeln!(
                out,
                "{:<14} {:>12.2} {:>12.2} {:>12} {:>22}",
                r.method, r.estimate, r.difference, se, ci
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,estimate,difference,se,ci_low,ci_high\n");
        let _ = writeln!(
            out,
            "experimental,{},0,{},{},{}",
            self.experimental_estimate,
            self.experimental_se,
            self.experimental_ci95.0,
            self.experimental_ci95.1
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method,
                r.estimate,
                r.difference,
                r.se.map_or(String::new(), |s| s.to_string()),
                r.ci95.map_or(String::new(), |c| c.0.to_string()),
                r.ci95.map_or(String::new(), |c| c.1.to_string()),
            );
        }
        out
    }
}

/// Experimental-vs-observational benchmark: the experimental file gives the
/// difference-in-means target; each method then estimates the ATT from the
/// composite file (treated units plus survey controls). Seed-dependent
/// methods are averaged over `stochastic_reps` runs and report the mean
/// estimate +- 1.96 x mean matching SE.
pub fn run_lalonde(
    experimental_path: &Path,
    composite_path: &Path,
    schema: &CsvSchema,
    methods: &[MethodSpec],
    stochastic_reps: usize,
    master_seed: u64,
) -> Result<LalondeReport> {
    let experimental = load_csv(experimental_path, schema)?;
    let (exp_est, exp_se) = difference_in_means(&experimental)?;
    let composite = load_csv(composite_path, schema)?;
    let (ds, _) = standardize(&composite)?;

    let mut rows = Vec::new();
    for (mi, m) in methods.iter().enumerate() {
        let runs = if m.tag.is_stochastic() { stochastic_reps.max(1) } else { 1 };
        let results: Vec<MethodRun> = (0..runs)
            .into_par_iter()
            .map(|r| {
                m.run(
                    &ds,
                    None,
                    Estimand::Att,
                    derive_seed(master_seed, (mi * 10_000 + r) as u64),
                )
            })
            .collect::<Result<_>>()?;
        let per_run: Vec<f64> = results.iter().map(|r| r.estimate).collect();
        let estimate = per_run.iter().sum::<f64>() / per_run.len() as f64;
        let ses: Vec<f64> = results.iter().filter_map(|r| r.se).collect();
        let se = if ses.is_empty() {
            None
        } else {
            Some(ses.iter().sum::<f64>() / ses.len() as f64)
        };
        let ci95 = se.map(|s| (estimate - 1.96 * s, estimate + 1.96 * s));
        rows.push(LalondeRow {
            method: m.tag.name().to_string(),
            estimate,
            difference: estimate - exp_est,
            se,
            ci95,
            per_run,
        });
    }
    Ok(LalondeReport {
        experimental_estimate: exp_est,
        experimental_se: exp_se,
        experimental_ci95: (exp_est - 1.96 * exp_se, exp_est + 1.96 * exp_se),
        rows,
        stochastic_reps,
        master_seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IhdpRow {
    pub method: String,
    pub avg_estimate: f64,
    pub avg_difference: f64,
    pub rmse: f64,
    pub per_surface: Vec<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IhdpReport {
    /// The construction forces the sample ATT to 4 on every surface.
    pub truth: f64,
    pub surfaces: usize,
    pub master_seed: u64,
    pub rows: Vec<IhdpRow>,
}

impl IhdpReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>12} {:>14} {:>10}",
            "method", "avg est.", "avg diff.", "rmse"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:>12.3} {:>14.3} {:>10.3}",
                r.method, r.avg_estimate, r.avg_difference, r.rmse
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,avg_estimate,avg_difference,rmse,surfaces,failures\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method,
                r.avg_estimate,
                r.avg_difference,
                r.rmse,
                r.per_surface.len(),
                r.failures
            );
        }
        out
    }
}

/// Simulated-response-surface benchmark: covariates and treatment come from a
/// file, outcomes are regenerated `surfaces` times, and every method is
/// scored against the forced sample ATT of 4.
pub fn run_ihdp(
    covariates_path: &Path,
    treatment_column: &str,
    surfaces: usize,
    methods: &[MethodSpec],
    master_seed: u64,
) -> Result<IhdpReport> {
    if surfaces == 0 {
        return Err(Error::Validation("need at least one surface".into()));
    }
    // Read the full numeric matrix, standardizing everything but treatment.
    let mut reader = csv::Reader::from_path(covariates_path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let treat_col = headers
        .iter()
        .position(|h| h == treatment_column)
        .ok_or_else(|| Error::Schema(format!("missing treatment column '{treatment_column}'")))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let mut row = Vec::with_capacity(headers.len());
        for (ci, h) in headers.iter().enumerate() {
            let raw = rec.get(ci).unwrap_or("").trim();
            row.push(raw.parse::<f64>().map_err(|e| Error::Parse {
                row: r + 2,
                col: h.clone(),
                msg: format!("'{raw}': {e}"),
            })?);
        }
        rows.push(row);
    }
    let n = rows.len();
    if n < 2 {
        return Err(Error::Validation("need at least two rows".into()));
    }
    let p = headers.len();
    let mut cov = ndarray::Array2::zeros((n, p));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            cov[[i, j]] = *v;
        }
    }
    // Standardize the non-treatment columns once, up front.
    for j in 0..p {
        if j == treat_col {
            continue;
        }
        let col = cov.column(j).to_owned();
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        cov.column_mut(j).mapv_inplace(|v| (v - mean) / sd);
    }

    let per_surface: Vec<Result<Vec<Option<f64>>>> = (0..surfaces)
        .into_par_iter()
        .map(|s| {
            let seed = derive_seed(master_seed, s as u64);
            let ds = gen_ihdp_surface(&cov, treat_col, seed)?;
            Ok(methods
                .iter()
                .enumerate()
                .map(|(mi, m)| {
                    m.run(&ds, None, Estimand::Att, derive_seed(seed, 100 + mi as u64))
                        .map(|r| r.estimate)
                        .ok()
                })
                .collect())
        })
        .collect();
    let per_surface: Vec<Vec<Option<f64>>> = per_surface.into_iter().collect::<Result<_>>()?;

    let truth = 4.0;
    let mut out_rows = Vec::new();
    for (mi, m) in methods.iter().enumerate() {
        let values: Vec<f64> = per_surface.iter().filter_map(|r| r[mi]).collect();
        let failures = surfaces - values.len();
        if values.is_empty() {
            return Err(Error::NonConvergence(format!(
                "method '{}' produced no estimates",
                m.tag.name()
            )));
        }
        let avg = values.iter().sum::<f64>() / values.len() as f64;
        let rmse =
            (values.iter().map(|v| (v - truth) * (v - truth)).sum::<f64>() / values.len() as f64)
                .sqrt();
        out_rows.push(IhdpRow {
            method: m.tag.name().to_string(),
            avg_estimate: avg,
            avg_difference: avg - truth,
            rmse,
            per_surface: values,
            failures,
        });
    }
    Ok(IhdpReport {
        truth,
        surfaces,
        master_seed,
        rows: out_rows,
    })
}

/// Drops rows from the treated group by a column predicate; used to mimic the
/// structural-imbalance preprocessing of observational benchmarks (e.g.
/// removing treated rows flagged by an indicator column).
pub fn drop_treated_where(
    cov: &ndarray::Array2<f64>,
    treat_col: usize,
    flag_col: usize,
) -> ndarray::Array2<f64> {
    let keep: Vec<usize> = (0..cov.nrows())
        .filter(|&i| !(cov[[i, treat_col]] == 1.0 && cov[[i, flag_col]] == 1.0))
        .collect();
    cov.select(Axis(0), &keep)
}
