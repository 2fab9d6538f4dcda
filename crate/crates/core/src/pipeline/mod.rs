//! A desk-scale end-to-end detector: autodiff, model, synthetic data,
//! training, evaluation and checkpoints.

pub mod autodiff;
pub mod assign;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod model;
pub mod train;
pub mod config;
