//! Trace-driven discrete-event simulation of many devices sharing one edge
//! server in a two-stage inference cascade, with SLO-driven threshold
//! scheduling (`MultiTascPP`), a batch-size step baseline and a static
//! baseline.
//!
//! Layering, bottom-up: [`model`] and [`traces`] hold pure domain logic,
//! [`engine`] is the event kernel, [`device`], [`server`] and [`scheduler`]
//! are the actors, [`sim`] wires them together, and [`runner`] handles
//! scenarios, sweeps and output files.

pub mod device;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runner;
pub mod scenario;
pub mod scheduler;
pub mod server;
pub mod sim;
pub mod traces;

pub use error::{Error, Result};
pub use metrics::{RunReport, SweepReport, TimelineRow};
pub use runner::{run_scenario, run_sweep};
pub use scenario::ScenarioConfig;
pub use sim::{simulate, RunOutput, SimOptions};
