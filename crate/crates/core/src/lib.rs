//! Concealment of a binary speaker attribute in fixed-size speaker embeddings.
//!
//! An adversarially trained autoencoder removes the attribute from an internal code
//! and a decoder conditioned on a posterior `w` rebuilds the embedding; `w = 0.5`
//! yields protected embeddings. Around it sit the attribute classifier and its PAV
//! calibration, privacy metrics, an LDA/PLDA verification backend and the
//! [`pipeline`] that chains them. The guide in `book/` walks through each part.

pub mod ae;
pub mod asv;
pub mod calibration;
pub mod classifier;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
mod textio;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/autoencoder.md")]
    mod autoencoder {}
    #[doc = include_str!("../../../book/src/asv.md")]
    mod asv {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
