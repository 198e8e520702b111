//! Split conformal prediction calibrated in a network's feature space.
//!
//! A trained network is cut into a feature extractor `f` and a head `g`.
//! Calibration scores measure how far `f(x)` must move before `g` reproduces
//! the observed response; their conformal quantile defines a feature ball
//! whose image under `g` is the prediction band.
//!
//! Modules, in pipeline order:
//!
//! - [`nn`]: dense ReLU networks, losses, input gradients and a seeded SGD
//!   trainer.
//! - [`data`]: matrices, synthetic generators, CSV loading, splitting and
//!   standardization.
//! - [`conformal`]: the quantile rule, vanilla split CP and CQR.
//! - [`feature`]: the surrogate-feature score, Feature CP and Feature CQR.
//! - [`bounds`]: sound output boxes for a feature ball.
//! - [`metrics`]: coverage, lengths and spread diagnostics.
//! - [`experiment`]: multi-seed runs, sweeps and result files.
//!
//! ```
//! use feature_cp::conformal::conformal_quantile;
//!
//! assert_eq!(conformal_quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.2)?, 5.0);
//! # Ok::<(), feature_cp::Error>(())
//! ```

pub mod bounds;
pub mod conformal;
pub mod data;
pub mod error;
pub mod experiment;
pub mod feature;
pub mod metrics;
pub mod nn;

pub use conformal::{Band, CalibrationRecord, OutputBand};
pub use error::{Error, Result};
pub use feature::{FeatureBand, FeatureNorm, SurrogateSearchConfig};
pub use nn::{Mlp, MlpSpec, SplitModel};

// The guide's code blocks run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/split-conformal.md")]
    mod split_conformal {}
    #[doc = include_str!("../../../book/src/surrogate-features.md")]
    mod surrogate_features {}
    #[doc = include_str!("../../../book/src/band-estimation.md")]
    mod band_estimation {}
    #[doc = include_str!("../../../book/src/feature-cqr.md")]
    mod feature_cqr {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
