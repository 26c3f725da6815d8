//! Three-currency (nominal / real / corporate-credit) HJM term-structure engine.
//!
//! The crate is organized around the pipeline it implements:
//!
//! - [`marketdata`]: panel ingestion, date alignment, weekly sampling, and
//!   synthetic history generation.
//! - [`curves`]: zero/forward curve construction (business-day bootstrap,
//!   Svensson fit, flat-forward interpolation, duration-bucketed spreads).
//! - [`volarch`]: the shared-factor volatility architecture with closed-form
//!   HJM drift integrals, FX drift corrections, and the spread drift.
//! - [`calib`]: per-block PCA, parametric loading fits, factor-score
//!   correlations with nearest-correlation repair, and FX-vol identification.
//! - [`sim`]: Musiela-grid Monte Carlo of the joint system under the nominal
//!   pricing measure.
//! - [`diagnostics`]: martingale, triangle, smoothness, coverage, and
//!   out-of-sample reproduction checks.
//! - [`wedge`]: the within-issuer triangle-residual test with post-tax
//!   indifference benchmarks.

pub mod calib;
pub mod curves;
pub mod diagnostics;
pub mod marketdata;
pub mod sim;
pub mod volarch;
pub mod wedge;

mod linalg;

pub use calib::{CalibConfig, CalibrationOutput, ChiAdjustment, FactorScores, PcaResult};
pub use curves::{ForwardCurve, SvenssonParams, ZeroCurve};
pub use marketdata::{ConstituentPanel, CurvePanel, Family, PillarGrid, SeriesKind};
pub use sim::{SimConfig, SimInit, SimOutput, SimState};
pub use volarch::{AmplitudeMatrix, Block, BlockVolSpec, FxLoading, ShapeFamily};
pub use wedge::{IssuerAggregate, IssuerSeries, RegressionResult, WedgeReport};
