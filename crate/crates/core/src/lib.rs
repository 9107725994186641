//! Federated learning as approximate Bayesian inference.
//!
//! Clients hold likelihood factors `p_k(θ)`; the server maintains a mean-field
//! Gaussian approximation `q_global(θ)` of the posterior. Each round, sampled
//! clients run local approximate inference against a cavity distribution and
//! send natural-parameter deltas back, which the server folds in with a damped,
//! optionally adaptive update.
//!
//! Modules, bottom-up:
//!
//! * [`gaussian`]: natural-parameter Gaussian algebra.
//! * [`models`]: client likelihoods (logistic, MLP, Gaussian density clients).
//! * [`inference`]: tilted-distribution inference backends.
//! * [`optim`]: optimizers applied to natural-parameter deltas.
//! * [`protocol`]: cavities, client and server updates, strategies.
//! * [`simulator`]: multi-round driver and evaluation metrics.
//! * [`datagen`]: synthetic clients and datasets.
//! * [`config`]: experiment configuration files.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod datagen;
pub mod error;
pub mod gaussian;
pub mod inference;
pub mod models;
pub mod optim;
pub mod protocol;
pub mod seed;
pub mod simulator;

pub use error::{Error, Result};
pub use gaussian::{GaussianDelta, MeanFieldGaussian, MomentsView};
