//! Episodic few-shot finetuning with distribution calibration and selected
//! sampling, plus a harness for ablation, convergence and shot-sweep runs.

pub mod backbone;
pub mod classifier;
pub mod dcm;
pub mod episodes;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod linalg;
pub mod optim;
pub mod sampling;
pub mod seed;

pub use error::{Error, Result};
