//! Probabilistic directed distance fields: exact geometric oracles, a
//! differentiable sinusoidal field with input derivatives, training,
//! rendering, composition, and extraction of derived representations.

pub mod compose;
pub mod error;
pub mod evaluator;
pub mod extract;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod renderer;
pub mod sampler;
pub mod trainer;
pub mod validators;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/field.md")]
    mod field {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/composition.md")]
    mod composition {}
    #[doc = include_str!("../../../book/src/extraction.md")]
    mod extraction {}
    #[doc = include_str!("../../../book/src/validation.md")]
    mod validation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
