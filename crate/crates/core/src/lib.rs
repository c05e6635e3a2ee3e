//! Context-conditioned sequence recognition under imperfect history.
//!
//! A desk-scale laboratory: a synthetic session corpus whose acoustics are
//! ambiguous unless the textual history is consulted, a small transformer
//! recognizer with two composable low-rank adapters, and the training
//! recipes (teacher-error history, context dropout, preference optimization
//! on hard negatives) evaluated under oracle, predicted and adversarial
//! histories.

pub mod autodiff;
pub mod data;
pub mod decoding;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod training;
