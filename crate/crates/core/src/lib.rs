//! Simulation of equity markets whose capitalizations are kept diverse by a
//! split-merge regulation rule, with the wealth, density and relative
//! arbitrage diagnostics used to study them.

pub mod error;
pub mod experiments;
pub mod model;
pub mod portfolios;
pub mod premodels;
pub mod regulation;
pub mod simulation;

pub use error::{Error, Result};
pub use model::{market_weights, CapitalizationVector, CovarianceMatrix, WeightVector};
pub use portfolios::PortfolioRule;
pub use premodels::{CoefficientEvaluator, GbmModel, GbmParams, LogPoleModel, LogPoleParams, Premodel};
pub use regulation::{RegulationEvent, RegulatorySet};
pub use simulation::{BrownianStream, RegulatedPath, SimConfig};
