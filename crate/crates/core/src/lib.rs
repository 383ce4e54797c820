//! Data-free knowledge distillation with generative pseudo replay.
//!
//! A frozen teacher is distilled into a smaller student using only synthetic
//! inputs. A novel-sample generator searches for inputs on which the two
//! disagree, while a small VAE learns the distribution of everything the
//! generator has produced so far and replays it to the student, which keeps
//! earlier knowledge from being overwritten as the generator drifts.
//!
//! Everything runs on a small fp64 reverse-mode autodiff engine ([`tape`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod replay;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
