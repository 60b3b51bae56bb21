//! A desk-scale laboratory for contrastive preference optimization.
//!
//! This crate trains tiny `f64` autoregressive transformers on synthetic
//! corpora and compares likelihood training against preference objectives
//! that contrast the ground-truth continuation with cheap synthetic
//! negatives. Everything runs on one CPU core, every result is
//! bit-reproducible from `(config, corpus, seed)`, and every gradient is an
//! exact hand-derived reverse-mode pass validated by finite differences.
//!
//! The pieces, bottom to top:
//!
//! * [`model`]: the transformer (forward, exact backward, top-k sampling).
//! * [`objectives`]: likelihood, pairwise, and listwise contrastive losses
//!   over policy/reference log-ratios.
//! * [`negatives`]: four synthetic negative samplers and preference-group
//!   assembly.
//! * [`ranking`]: embedding-based cosine ordering of group candidates.
//! * [`eval`]: weight-space ensembling, reverse-KL and length-normalized
//!   NLL against an oracle, win rates, metric records.
//! * [`ebm`]: brute-force enumeration oracle for the KL-regularized reward
//!   maximization problem and its closed-form optimum.
//! * [`markov`], [`corpus`]: the synthetic data generator and file formats.
//! * [`optim`], [`train`]: AdamW and the training harness driven by the
//!   `cpolab` binary.

pub mod corpus;
pub mod ebm;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod markov;
pub mod model;
pub mod negatives;
pub mod objectives;
pub mod optim;
pub mod parallel;
pub mod policy;
pub mod ranking;
pub mod seeding;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};

// Every code block in the guide compiles and runs against the current API:
// each chapter is attached as a doc-tested module, so the book cannot drift
// out of sync with the crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/negatives.md")]
    mod negatives {}
    #[doc = include_str!("../../../book/src/ranking.md")]
    mod ranking {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/ebm.md")]
    mod ebm {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
