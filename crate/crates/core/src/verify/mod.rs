//! Distribution-level diagnostics: Wasserstein distances, context
//! injectivity/separability matrices, and reward-sensitivity analysis.
