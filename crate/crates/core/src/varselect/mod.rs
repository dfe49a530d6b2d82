//! Variable-selection matching spaces: the L1 method (linear LASSO plus
//! L1 logit, union of supports) and the RRF method (penalized-gain forests
//! with importance-scaled features).

mod lasso;
mod rrf;

pub use lasso::{
    default_grid, kkt_residual_linear, lambda_max_linear, lambda_max_logit, lasso_linear,
    lasso_linear_at, lasso_logit, lasso_logit_at, LassoFit,
};
pub use rrf::{rrf_matching_space, rrf_train, rrf_train_cv, ForestTarget, RrfFit, RrfParams};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::space::{MatchingSpace, SpaceMethod};
use ndarray::Axis;

/// Matching space of the raw standardized columns at the union of the two
/// lasso supports, unscaled.
pub fn l1_matching_space(ds: &Dataset, fit_y: &LassoFit, fit_d: &LassoFit) -> Result<MatchingSpace> {
    if fit_y.beta.len() != ds.k() || fit_d.beta.len() != ds.k() {
        return Err(Error::Validation(
            "lasso fits do not match the dataset's covariates".into(),
        ));
    }
    let mut union: Vec<usize> = fit_y
        .support()
        .into_iter()
        .chain(fit_d.support())
        .collect();
    union.sort_unstable();
    union.dedup();
    if union.is_empty() {
        return Err(Error::EmptySupport(
            "both lasso supports are empty; weaken the penalty".into(),
        ));
    }
    let z = ds.x.select(Axis(1), &union);
    let labels = union.iter().map(|&j| ds.names[j].clone()).collect();
    MatchingSpace::new_pruned(z, SpaceMethod::L1, labels)
}
