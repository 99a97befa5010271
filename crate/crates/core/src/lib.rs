//! Vision-centric transformer for audio-visual segmentation.
//!
//! Queries are derived from image features, prompted with learnable audio
//! prototypes, grouped over pixels with a straight-through Gumbel-softmax,
//! then refined by alternating audio and multi-scale visual cross-attention
//! before mask classification. Everything, including the autodiff engine,
//! lives in this crate.

pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};

// The book's code blocks run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/gumbel.md")]
    mod gumbel {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/queries.md")]
    mod queries {}
    #[doc = include_str!("../../../book/src/decoder.md")]
    mod decoder {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
