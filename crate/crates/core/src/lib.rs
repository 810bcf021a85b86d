//! LP-based two-stage best-arm identification for batched Bayesian
//! Bernoulli bandits.
//!
//! The prior, weight and bound code is generic over the scalar ([`scalar::Real`]);
//! the LP, policy and simulation layers run in `f64`. The aliases below fix the
//! scalar for everyday use.

pub mod bounds;
pub(crate) mod decomp;
pub mod error;
pub mod lp_model;
pub mod lp_solve;
pub mod policy;
pub mod prior;
pub mod quadrature;
pub mod scalar;
pub mod sim;
pub mod special;

pub use error::{Error, Result};

/// Prior over arm means in `f64`.
pub type Prior = prior::PriorSpec<f64>;
/// Terminal weight specification in `f64`.
pub type Weight = prior::WeightSpec<f64>;
/// Discrete prior atom in `f64`.
pub type PriorAtom = prior::Atom<f64>;
/// FC-variant bound values in `f64`.
pub type Thm5Bound = bounds::Thm5<f64>;
