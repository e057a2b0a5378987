//! Potential theory, test-function constructions and simulation for
//! condensing zero-range processes driven by a (possibly non-reversible)
//! finite random walk.
//!
//! The crate is organised around a generic finite continuous-time chain
//! ([`chain::Chain`]) on which equilibrium potentials, capacities and flows
//! are computed. The zero-range process, its collapsed chains and its trace
//! on the valleys are all instances of it.

pub mod approx;
pub mod capacity;
pub mod chain;
pub mod collapse;
pub mod dynamics;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod linalg;
pub mod numeric;
pub mod walk;
pub mod zrp;

pub use error::{Error, Result};
