//! Linear group networks: convolutional layers whose filter banks are orbits
//! of learned linear actions on vectorised filters, built into an unrolled
//! sparse-coding network, plus tools to fit and inspect such actions.
//!
//! The book under `book/` walks through the pieces; its examples run as
//! doctests of this crate.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod export;
pub mod group;
pub mod linalg;
pub mod synthetic;
pub mod train;
pub mod unfolded;
pub mod vectorize;

pub use error::{LgnError, Result};
pub use lgn_tensor as tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/vectorization.md")]
    mod vectorization {}
    #[doc = include_str!("../../../book/src/group-actions.md")]
    mod group_actions {}
    #[doc = include_str!("../../../book/src/invertibility.md")]
    mod invertibility {}
    #[doc = include_str!("../../../book/src/unfolded-ista.md")]
    mod unfolded_ista {}
    #[doc = include_str!("../../../book/src/synthetic-probes.md")]
    mod synthetic_probes {}
    #[doc = include_str!("../../../book/src/spectral-analysis.md")]
    mod spectral_analysis {}
    #[doc = include_str!("../../../book/src/training-and-cli.md")]
    mod training_and_cli {}
}
