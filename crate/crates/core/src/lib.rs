//! Batch off-policy actor-critic for learning treatment policies from
//! trajectory data.
//!
//! The pipeline is [`trajectory`] data, a hinge [`features`] basis for the
//! value function, logistic [`policy`] parameters, an importance-weighted
//! average-reward [`critic`], and an [`actor`] that maximizes the critic's
//! estimate under a stochasticity constraint. [`simenv`] holds generative
//! models, rollouts and the Monte Carlo harness.
//!
//! The guide in `book/` walks through each piece with runnable examples.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actor;
pub mod critic;
pub mod error;
pub mod features;
pub mod linalg;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod simenv;
pub mod trajectory;

pub use error::{Error, Result};

// Compiles and runs the guide's code blocks as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/critic.md")]
    mod critic {}
    #[doc = include_str!("../../../book/src/actor.md")]
    mod actor {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
