//! Saddle-point search on force fields: shrinking-dimer dynamics, a
//! Gaussian-process surrogate that stands in for expensive forces, and
//! construction of solution landscapes from index-k saddles.

pub mod benchmarks;
pub mod dynamics;
pub mod error;
pub mod force;
pub mod gp;
pub mod landscape;
pub mod learner;
pub mod linalg;

pub use error::{Result, SaddleError};
pub use force::{dimer_hv, DimerEval, FnForce, ForceField, ForceOracle, OracleKind};
pub use linalg::{gram_schmidt, sym_eigen, DirectionFrame, EigenDecomposition, StateVector, SymmetricMatrix};
