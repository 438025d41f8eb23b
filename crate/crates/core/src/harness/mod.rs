// SPDX-License-Identifier: Apache-2.0

//! Scenario driver, trace audits, metrics and the property suites.

pub mod adversary;
pub mod audit;
pub mod lifecycle;
pub mod metrics;
pub mod run;
pub mod scenario;
pub mod suite;

use thiserror::Error;

use crate::rmm::RmmError;
use crate::system_realm::SystemError;

pub use adversary::{ActionOutcome, AdversaryReport};
pub use audit::Finding;
pub use lifecycle::{run_lifecycle, LifecycleReport};
pub use metrics::{ContainerMetrics, Metrics};
pub use run::{run_scenario, Execution, RunOptions, RunReport};
pub use scenario::Scenario;
pub use suite::{run_suite, SuiteConfig, SuiteReport};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("scenario does not parse: {0}")]
    Parse(String),
    #[error("scenario is invalid: {0}")]
    Validation(String),
    #[error(transparent)]
    Rmm(#[from] RmmError),
    #[error(transparent)]
    System(#[from] SystemError),
}
