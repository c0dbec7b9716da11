//! Diffusion-based prompt generation for frozen dual-encoder classifiers,
//! desk scale: a small f64 autodiff engine, surrogate CLIP-style encoders,
//! prompt learners, per-sample prompt overfitting, a diffusion transformer
//! over prompt space, few-step ODE samplers, and a synthetic generalization
//! benchmark.

pub mod bench;
pub mod checkpoint;
pub mod clip;
pub mod config;
pub mod dit;
pub mod error;
pub mod learner;
pub mod nn;
pub mod overfit;
pub mod sampler;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
