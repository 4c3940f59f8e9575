//! Workload harness, CSV reporting and the stress drivers behind the
//! acceptance run.

pub mod report;
pub mod verify;
pub mod workload;
