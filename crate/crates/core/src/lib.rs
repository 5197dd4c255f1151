//! Private prediction with individually accounted kernel nearest neighbors.
//!
//! A store of labeled, unit-norm feature vectors answers classification
//! queries. Each query releases a noisy neighbor count and a noisy
//! kernel-weighted vote; only the examples that were actually selected pay
//! for it, out of a per-example Rényi-DP budget. Examples that run out are
//! retired, which keeps the whole query stream `(epsilon, delta)`-DP no
//! matter how many queries are asked.
//!
//! See the guide under `book/` for a walkthrough.

pub mod accounting;
pub mod baseline;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod io;
pub mod lsh;
pub mod mechanisms;
pub mod model;
pub mod presets;
pub mod synth;

pub use accounting::{budget_for_dp, rdp_to_dp, DpParams, RdpBudget};
pub use engine::{ExampleStore, QueryOutcome};
pub use error::{Error, Result};
pub use mechanisms::NoiseSource;
pub use model::{l2_normalize, EngineConfig, ExampleId, FeatureVector, KernelSpec, LabeledExample, Origin};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    mod kernels {}
    #[doc = include_str!("../../../book/src/accounting.md")]
    mod accounting {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/hashing.md")]
    mod hashing {}
    #[doc = include_str!("../../../book/src/baseline.md")]
    mod baseline {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
