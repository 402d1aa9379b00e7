//! Numerical core for learned advection–diffusion particle transport.
//!
//! Everything here is pure computation over `alloc` collections: analytical
//! flow fields and Euler–Maruyama particle transport ([`flow`]), a small
//! reverse-mode autodiff engine with dense, GRU and optimizer support
//! ([`nn`]), fixed-grid ODE/SDE steppers ([`integrate`]), a conditional
//! continuous normalizing flow ([`cnf`]), the variational SDE controller
//! layered on its frozen drift ([`vsde`]), and evaluation metrics
//! ([`eval`]). File formats, configuration and the command line live in
//! the companion `pivoflow` crate.
#![no_std]
// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod cnf;
pub mod error;
pub mod eval;
pub mod flow;
pub mod geom;
pub mod integrate;
pub mod nn;
pub mod rng;
pub mod vsde;

pub use error::{Error, Result};
pub use geom::Vec2;
