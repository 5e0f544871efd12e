//! Explainability toolkit for tiny text classifiers: a fully
//! introspectable reference transformer, analytic attribution methods
//! (attention-gradient, gradient-x-input, inverse-gradient), a chat
//! protocol for model self-explanations, conversions from every
//! explanation form into token saliency maps, and a perturbation-based
//! faithfulness harness, all reproducible bit-for-bit from a seed.

pub mod analytic;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod faithfulness;
pub mod saliency;
pub mod selfexplain;
pub mod seqmatch;
pub mod textsim;
pub mod tinylm;

pub use error::{Error, Result};
