//! Reusable oracles: finite-difference suites and statistical simulations.

mod gradcheck;
mod simulations;

pub use gradcheck::{
    check_full_model, gradcheck_suite, GradcheckReport, OpCheck, FULL_MODEL_CHECK, GRADCHECK_EPS, GRADCHECK_TOLERANCE,
};
pub use simulations::{auc_pair_count, delong_bootstrap_comparison, delong_null_rejection_rate, BootstrapComparison};
