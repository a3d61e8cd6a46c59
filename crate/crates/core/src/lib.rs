//! Stochastic optimal control with signature-parameterized policies.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: truncated tensor algebra, shuffles and Lyndon coordinates.
//! * [`signature`]: signatures of time-augmented piecewise-linear paths.
//! * [`noise`]: exact fractional Brownian motion sampling.
//! * [`dynamics`]: controlled state simulation and Monte Carlo costs.
//! * [`policy`]: linear and deep signature controls.
//! * [`optim`]: reverse-mode gradients, Adam and the training loop.
//! * [`benchmark`]: the analytic tracking optimum and the TWAP value.
//! * [`linearize`]: the expected-signature quadratic program for execution.
//! * [`config`]: experiment configuration files.
//! * [`experiment`]: experiment runs and result tables.

pub mod benchmark;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod linearize;
pub mod noise;
pub mod optim;
pub mod policy;
pub mod quadrature;
pub mod signature;
pub mod tensor;

pub use error::{Error, Result};
