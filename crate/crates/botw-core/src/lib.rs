//! Linear bandit simulation library.
//!
//! The crate is organized in four layers, each usable on its own:
//!
//! - [`geometry`]: arm-set validation, simplex distributions, small dense
//!   SPD linear algebra, and G-optimal experimental design via Frank-Wolfe.
//! - [`policy`]: entropy-regularized follow-the-regularized-leader over the
//!   arm simplex with a least-squares loss estimator, plus two baselines
//!   (fixed-rate exponential weights and the uniform policy).
//! - [`environment`]: loss generators (stochastic, adversarial, corrupted
//!   stochastic), gap profiles, and per-round regret accounting.
//! - [`harness`]: seeded single runs, parallel repetitions, horizon sweeps
//!   with log-log slope fits, trace invariant verification, and the CSV/JSON
//!   wire formats shared with the `botw` command-line tool.
//!
//! Every run is a pure function of its configuration and base seed: random
//! streams are keyed by (seed, repetition, round), so parallel and serial
//! execution produce byte-identical traces.

// Validation guards are written as `!(x <= bound)` on purpose: the negated
// form rejects NaN, which `x > bound` would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod environment;
pub mod geometry;
pub mod harness;
pub mod policy;
