//! Learned instrumental variables for counterfactual prediction.
//!
//! AutoIV trains an instrument representation and a confounder representation
//! from a block of candidate covariates with adversarial mutual-information
//! objectives, then hands them to a conventional IV estimator. The crate
//! carries everything needed for that pipeline: a small autodiff engine, the
//! networks and MI losses, synthetic benchmarks, downstream estimators and a
//! seeded experiment harness behind the `autoiv` binary.
//!
//! The guide in `book/` walks through each layer with runnable examples.

pub mod datagen;
pub mod downstream;
pub mod error;
pub mod harness;
pub mod mi;
pub mod nets;
pub mod numcore;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/mutual-information.md")]
    mod mutual_information {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/downstream.md")]
    mod downstream {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
