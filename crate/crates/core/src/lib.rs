//! Normalizing-flow generators for Boltzmann densities.
//!
//! The crate provides the pieces needed to train a flow against a target
//! density known only up to its partition function, and to diagnose why the
//! naive training objectives fail:
//!
//! * [`autodiff`] — tape-based reverse-mode differentiation with an explicit
//!   detach operator.
//! * [`flow`] — affine coupling flows with exact log-determinants.
//! * [`targets`] — the double-well family, per-term energy capping, and
//!   discrete spaces with exactly computable moments.
//! * [`losses`] — the data-dependent klz loss and the three data-free
//!   losses (klx, klz_df, masked L² with detached mean) plus ablations.
//! * [`estimators`] — self-normalized importance sampling, partition
//!   function and free-energy-difference estimation, effective sample size.
//! * [`pitfalls`] — executable demonstrations of the minibatch
//!   discretization failures and the variance-reducing stabilization.
//! * [`sampler`] — parallel-tempered Metropolis–Hastings reference data.
//! * [`trainer`] — pre-training / fine-tuning loops with deterministic
//!   metrics.
//! * [`config`] / [`cli`] — the experiment configuration format and the
//!   `boltzlab` command-line entry points.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod estimators;
pub mod flow;
pub mod gradcheck;
pub mod losses;
pub mod pitfalls;
pub mod sampler;
pub mod targets;
pub mod trainer;
