//! Practical dataset distillation.
//!
//! Synthesizes small image sets from a pretrained classifier (DKKT loss:
//! primal classification + stationarity alignment with the trained weights)
//! combined with classwise distribution matching (MMD in random embedding
//! spaces), for the regime where only a small fraction of the training set
//! is accessible. Includes the evaluation harness (SAM training on the
//! synthetic set), frequency-domain analysis, and a classical SVM oracle
//! used to validate deep-support-vector extraction end to end.

pub mod analysis;
pub mod data;
pub mod dm;
pub mod engine;
pub mod eval;
pub mod kkt;
pub mod nn;
pub mod rng;
pub mod svm;
pub mod tensor;
