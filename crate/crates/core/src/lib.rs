//! Semi-supervised fair classification on tabular data where the sensitive
//! attribute is unavailable with group-dependent probability.
//!
//! The crate bundles everything needed to train and evaluate the model at
//! desk scale:
//!
//! - [`autodiff`]: a small deterministic reverse-mode differentiation engine
//!   over dense `f64` tensors, with an explicit stop-gradient operation.
//! - [`dist`]: categorical / diagonal-Gaussian primitives, KL divergences,
//!   Dirichlet and Beta log densities, and the straight-through
//!   Gumbel-Softmax relaxation.
//! - [`obs`]: the learnable observation channels mapping latent group and
//!   label values to their (possibly unavailable) observations.
//! - [`risk`]: differentiable group-fairness metrics, the Monte Carlo risk
//!   estimator with its sample-complexity bound, and an exact enumeration
//!   oracle.
//! - [`ssvae`]: encoder/decoder networks, the extended ELBO, the auxiliary
//!   label imputer, and the fairness-regularized training objective.
//! - [`data`]: tabular dataset containers, a synthetic generator with a
//!   controllable group-label bias, the group-conditional masking simulator,
//!   and dataset splitting.
//! - [`train`]: the Adam training loop, evaluation, model selection, and
//!   test-time risk labeling.
//!
//! The crate is `no_std` compatible (with `alloc`); file formats and the CLI
//! live in the companion `fairvae` crate. All randomness flows in through
//! explicitly seeded streams ([`stream`]), never hidden global state.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod dist;
pub mod math;
pub mod obs;
pub mod risk;
pub mod ssvae;
pub mod stream;
pub mod train;

pub use autodiff::{Parameters, Tape, Tensor, Var};
pub use data::TabularDataset;
pub use risk::FairnessMetric;
pub use ssvae::SsVaeModel;
pub use train::TrainConfig;
