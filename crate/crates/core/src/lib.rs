//! Modular neural ODE force models.
//!
//! Learns second-order equations of motion of a charged particle from sampled
//! trajectories. Each additive force term (potential gradient, magnetic,
//! drag, generic) is its own small network, and physical structure such as
//! `∇·B = 0` or lattice periodicity is built into how the terms are composed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod eval;
pub mod experiments;
pub mod fields;
pub mod forces;
pub mod ode;
pub mod train;
pub mod truth;
pub mod vec3;
