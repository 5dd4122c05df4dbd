//! Meta-learning with per-task filter routing.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! four-block convolutional classifiers used for few-shot benchmarks
//! ([`backbone`]), episodic task sampling ([`episodes`]), batch-norm driven
//! filter selection ([`routing`]), MAML-style inner/outer loops
//! ([`meta`]) and the training/evaluation harness behind the `nrml` binary
//! ([`harness`]).
//!
//! The guide in `book/` walks through each piece; its code blocks are
//! compiled and run as doctests of this crate.

pub mod backbone;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod meta;
pub mod model;
pub mod params;
pub mod routing;
pub mod seed;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/backbone.md")]
    struct Backbones;
    #[doc = include_str!("../../../book/src/episodes.md")]
    struct Episodes;
    #[doc = include_str!("../../../book/src/routing.md")]
    struct Routing;
    #[doc = include_str!("../../../book/src/meta.md")]
    struct Meta;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
