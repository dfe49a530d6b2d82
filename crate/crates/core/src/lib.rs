//! Treatment-effect estimation by nearest-neighbor matching on learned
//! low-dimensional feature spaces.
//!
//! The crate builds matching spaces four ways — feedforward-net embeddings,
//! siamese-net embeddings, variable selection (L1 / regularized forests), and
//! propensity scores — runs exact 1-NN matching on them, and ships a
//! Monte-Carlo benchmark harness for simulated and real-data experiments.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod matching;
pub mod net;
pub mod parametric;
pub mod rng;
pub mod siamese;
pub mod simgen;
pub mod space;
pub mod varselect;

pub use bench::{
    consistency_demo, counterexample_true_att, run_ihdp, run_lalonde, run_simulation,
    BenchReport, ConsistencyReport, IhdpReport, LalondeReport, MethodRun, MethodSpec, MethodTag,
};
pub use dataset::{load_csv, merge_by_row_id, oversample_treated, split_by_treatment, standardize};
pub use dataset::{CsvSchema, Dataset, StandardizationParams, Truth};
pub use error::{Error, Result};
pub use matching::{
    abadie_imbens_variance, metric_condition_check, nearest_neighbor_match, Estimand, MatchResult,
    MatchedPair, MetricCheckReport,
};
pub use net::{extract_embedding, grad_check, nn_matching_space, predict, train};
pub use net::{Activation, InitKind, LossKind, NetConfig, NetKind, Subsample, Target, TrainedNet};
pub use parametric::{difference_in_means, fit_logit, ols_att, psm_matching_space, LogitFit};
pub use siamese::{
    contrastive_loss, outcome_pair_loss, pair_batch_loss, sample_pairs, snn_grad_check,
    snn_matching_space, train_snn, PairBatch, PairLoss, PairTarget, SnnConfig,
};
pub use simgen::{
    gen_counterexample, gen_ihdp_surface, gen_random_nn, gen_sparse_linear, gen_sparse_linear_sq,
    oracle_matching_space, DgpKind, DgpSpec, OracleInfo, OracleMode, RandomNnParams,
};
pub use space::{MatchingSpace, SpaceMethod};
pub use varselect::{
    kkt_residual_linear, l1_matching_space, lasso_linear, lasso_linear_at, lasso_logit,
    lasso_logit_at, rrf_matching_space, rrf_train, rrf_train_cv, ForestTarget, LassoFit, RrfFit,
    RrfParams,
};
