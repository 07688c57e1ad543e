//! Dynamic-depth recurrent networks: plain GRU, adaptive computation time
//! (ACT), and layer-flexible ACT (LFACT), with training and evaluation.

pub mod act;
pub mod cells;
pub mod config;
pub mod data;
pub mod error;
pub mod lfact;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod seq2seq;
pub mod training;

pub use error::{Error, Result};
