//! Differentiable trajectory optimization: finite-horizon LQR and
//! box-constrained iLQR (box-DDP) solvers whose optimal solutions can be
//! differentiated with respect to cost and dynamics parameters at the price
//! of a single extra LQR solve, plus the imitation-learning / system-id
//! experiment logic built on top of them.
//!
//! Layout:
//! - [`core`]: shared problem/trajectory types and dense PD linear algebra
//! - [`lqr`]: Riccati solver and dual recovery
//! - [`lqr_diff`]: analytic derivatives of the LQR solution
//! - [`boxqp`]: projected-Newton box-constrained QP + active-set derivatives
//! - [`mpc`]: the box-DDP solver for nonconvex problems
//! - [`mpc_diff`]: fixed-point differentiation of the box-DDP solution
//! - [`envs`]: pendulum / cartpole / linear dynamics and goal costs
//! - [`imitation`]: datasets, losses, optimizers, training loops

pub mod boxqp;
pub mod core;
pub mod envs;
pub mod imitation;
pub mod lqr;
pub mod lqr_diff;
pub mod mpc;
pub mod mpc_diff;
