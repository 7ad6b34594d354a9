//! # kel
//!
//! A numerical laboratory for degenerate stochastic Hamiltonian systems and
//! their distribution-dependent (McKean-Vlasov) variants. The state splits
//! into a noise-free block driven by a noisy one,
//!
//! ```text
//! dx1 = { A x1 + B x2 + b(x, mu) } dt
//! dx2 = Z(t, x, mu) dt + sigma(t, mu) dW,
//! ```
//!
//! and the crate verifies, at desk scale, the quantitative theory attached
//! to that structure:
//!
//! - closed-form contraction constants (kappa, twisted-metric coefficients)
//!   and structural conditions (Kalman index, dissipativity probes)
//!   ([`model`]);
//! - reproducible Euler-Maruyama integration of ensembles, interacting
//!   particle systems, and synchronous couplings ([`sde`]);
//! - exact Gaussian laws for linear instances, used as the oracle for
//!   entropy and W2 ([`gaussian`]);
//! - empirical W2 by exact assignment and debiased log-domain Sinkhorn
//!   ([`transport`]);
//! - sample-based relative entropy: k-NN estimator and a variational lower
//!   bound ([`entropy_est`]);
//! - weighted controllability Gramians and their small-time scaling
//!   ([`gramian`]);
//! - the composed experiments: entropy-bound margins, short-time scaling,
//!   coupling contraction, exponential ergodicity ([`experiments`]).
//!
//! Randomness is counter-based throughout: every (seed, particle, step)
//! triple maps to a fixed Gaussian cell, so results are bit-identical at any
//! worker count. The `kel` binary exposes the lab as subcommands; `selftest`
//! runs the acceptance suite.

pub mod cli;
pub mod entropy_est;
pub mod error;
pub mod experiments;
pub mod gaussian;
pub mod gramian;
pub mod linalg;
pub mod model;
pub mod plot;
pub mod rng;
pub mod sde;
pub mod selftest;
pub mod transport;

pub use error::{KelError, Result};
