//! Kaczmarz row-action solvers and their stochastic-approximation variant for
//! online estimation of link-level moments from single-path probe
//! measurements, together with a seeded probe-delay simulator and the
//! diagnostics that relate a run to its closed-form limit.
//!
//! Module map:
//!
//! - [`linalg`]: measurement systems, row normalization, the closed-form
//!   projection limit and weighted norms.
//! - [`engine`]: cyclic Kaczmarz, the stochastic estimator, iterate averaging.
//! - [`lifting`]: multi-index enumeration and the lifted higher-moment system.
//! - [`network`]: network model, path selectors and trace generation.
//! - [`diagnostics`]: error trajectories, bias and contraction bounds.
//! - [`cli`]: the `sak` experiment harness.

pub mod cli;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod format;
pub mod lifting;
pub mod linalg;
pub mod network;

pub use engine::{run_cyclic, run_sak, EstimatorState, ProbeObservation, StepSchedule};
pub use error::{Error, Result};
pub use lifting::{LiftedSystem, MultiIndex};
pub use linalg::{normalize_rows, projection_solution, MeasurementSystem, WeightVector};
pub use network::{NetworkModel, RowSelector};
