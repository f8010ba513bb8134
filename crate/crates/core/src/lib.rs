//! Pricing and hedging of European options on GARCH-driven assets by local risk
//! minimization, with the measure changes it needs, exact lattice and quadrature
//! oracles, and a Monte Carlo hedging-error backtest.

// `!(x > 0.0)` comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod error;
pub mod hedging;
pub mod measure;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod simulate;

pub use backtest::{run_experiment, std_comparison, ExperimentConfig, HedgeReport, Scheme};
pub use error::{Error, Result};
pub use hedging::{Payoff, PayoffKind, Strategy};
pub use models::{GarchSpec, GarchState, Measure, Representation, Variant};
pub use oracle::{Asset, LatticeSpec, QuadratureSpec, Tree, TreeSpec};
pub use rng::StreamKey;
pub use simulate::{simulate, Innovations, PathSet};
