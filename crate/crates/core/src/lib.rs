//! Semantic correspondence by softmax matching over L2-normalized feature
//! correlations, with a learned softmax temperature.

pub mod autograd;
pub mod backbone;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod localizer;
pub mod matcher;
pub mod model;
pub mod objective;
pub mod optim;
pub mod point;
pub mod synthdata;
pub mod temperature;

pub use error::{Error, Result};
