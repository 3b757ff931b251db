//! Closed-form analysis of the binary toy and the reachability construction
//! for guided beam search.

pub mod normal;
pub mod reachability;
pub mod toy;

pub use normal::{inverse_normal_cdf, normal_cdf, z_quantile};
pub use reachability::{
    compute_lambda_star, enumerate_sequences, estimate_classifier_bounds, grid_scan, random_instance,
    reachability_record, verify_reachability, IdealizedClassifier, ReachabilityInstance, ReachabilityReport,
};
pub use toy::{
    delta_method_variance, discriminability_identity, mc_success_prob, n_min, practical_threshold, toy_posteriors,
    ToyParams,
};
