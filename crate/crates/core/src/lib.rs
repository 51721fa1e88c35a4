//! Mass-action reaction networks with detailed balance, and the entropy
//! gradient structures they induce across the model hierarchy: the
//! macroscopic reaction-rate equation, the chemical master equation on a
//! truncated particle lattice, Liouville transport of measures over
//! concentration space, Fokker-Planck approximations at large volume, and
//! hybrid couplings between these levels.
//!
//! The crate is organized around [`network::ReactionNetwork`] as the single
//! source of truth. Stoichiometric structure and conservation laws are
//! computed exactly over the integers; the detailed-balance condition is
//! certified (or refuted with an explicit witness) before any of the
//! gradient-flow machinery is allowed to run.

pub mod cme;
pub mod error;
pub mod fpe;
pub mod hybrid;
pub mod io;
pub mod kernels;
pub mod network;
pub mod numerics;
pub mod rre;
pub mod scalar;
pub mod scalebridge;

pub use error::Error;
pub use scalar::Scalar;

/// Concrete scalar used by the solvers and drivers.
///
/// The scalar kernels in [`kernels`] are generic over [`Scalar`]; everything
/// with a tolerance contract is pinned to `f64`.
pub type Real = f64;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
