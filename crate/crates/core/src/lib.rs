//! Numerical laboratory for symmetric stochastic differential games with a
//! shared noise source: particle solvers for the limiting conditional
//! McKean-Vlasov forward-backward system and for finite-player equilibrium
//! systems, executable displacement-monotonicity checkers, a linear-quadratic
//! closed-form benchmark, and a synchronous-coupling harness that measures
//! finite-population convergence rates.
//!
//! Everything numerical is generic over the scalar type through
//! [`num::Scalar`]; concrete `f64` aliases for the main data types live at
//! the crate root.

pub mod chaos;
pub mod cli;
pub mod error;
pub mod fbsde;
pub mod linalg;
pub mod measure;
pub mod mkv;
pub mod model;
pub mod monotone;
pub mod nplayer;
pub mod num;
pub mod riccati;
pub mod rng;
pub mod scenario;
pub mod svg;

pub use error::{MfgError, Result};
pub use num::Scalar;

/// `f64` aliases for the main data types.
pub type GameSpec64 = model::GameSpec<f64>;
pub type LqParams64 = riccati::LqParams<f64>;
pub type EmpiricalMeasure64 = measure::EmpiricalMeasure<f64>;
pub type MeasureFlow64 = measure::MeasureFlow<f64>;
pub type PathEnsemble64 = fbsde::PathEnsemble<f64>;
pub type SolverConfig64 = fbsde::SolverConfig<f64>;
pub type TimeGrid64 = fbsde::TimeGrid<f64>;
pub type RiccatiSolution64 = riccati::RiccatiSolution<f64>;
pub type MfeSolution64 = mkv::MfeSolution<f64>;
pub type NPlayerSolution64 = nplayer::NPlayerSolution<f64>;
pub type ChaosStudyResult64 = chaos::ChaosStudyResult<f64>;
