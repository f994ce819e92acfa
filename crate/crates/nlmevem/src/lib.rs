//! Variational EM for nonlinear mixed-effects models.
//!
//! The pieces fit together like this:
//!
//! 1. [`ad`] supplies a scalar abstraction ([`ad::Scalar`]) with three
//!    instantiations: plain `f64`, forward-mode dual numbers, and reverse-mode
//!    tape variables. Model code is written once, generically.
//! 2. [`ode`] integrates initial value problems with fixed-step RK4, generic
//!    over the scalar type, so solution sensitivities come out of the same
//!    code path that computes values. An adaptive RK45 (plain `f64`) serves
//!    as the accuracy reference for choosing step counts.
//! 3. [`model`] defines subjects, dosing, domain transforms, and the built-in
//!    model catalog.
//! 4. [`variational`] holds the per-subject Gaussian family in standardized
//!    space (prior mapped to N(0, I)).
//! 5. [`elbo`] evaluates the Monte Carlo ELBO and its gradient with respect
//!    to population parameters and all variational parameters jointly.
//! 6. [`optim`] provides L-BFGS (deterministic objective) and Adam
//!    (stochastic objective).
//! 7. [`fit`] wires 1-6 into the three fitting variants and empirical Bayes
//!    estimation.
//! 8. [`marginal`] cross-checks fits with importance sampling, Laplace,
//!    Gauss-Hermite, and closed-form marginal likelihoods.
//!
//! The crate is `no_std`-compatible (with `alloc`); the `std` feature (on by
//! default) switches `f64` math to std intrinsics and enables wall-clock
//! timing in fit traces. The optional `rayon` feature parallelizes ELBO
//! evaluation over subjects without changing results.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod ad;
pub mod elbo;
pub mod error;
pub mod fit;
pub mod linalg;
pub mod marginal;
pub mod model;
mod par;
pub mod ode;
pub mod optim;
pub mod rng;
pub mod variational;

pub use error::{Error, Result};
