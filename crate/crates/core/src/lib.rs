//! Forward and inverse radiative transfer on simple magnetic systems.
//!
//! The crate is organised around a handful of layers. [`geometry`] traces
//! magnetic geodesics on the unit ball with a conformally flat metric,
//! [`phase_space`] discretizes the unit sphere bundle and its boundary,
//! [`transport`] builds the ray operators and solves the transport equation,
//! [`albedo`] assembles boundary-to-boundary maps, and the remaining modules
//! run reconstruction, gauge and stability experiments on top of them.

pub mod albedo;
pub mod error;
pub mod expr;
pub mod gauge;
pub mod geometry;
pub mod inversion;
pub mod par;
pub mod phase_space;
pub mod quadrature;
pub mod stability;
pub mod transport;

pub use error::{Error, Result};
pub use geometry::{MagneticSystem, PhasePoint, Vec3};
