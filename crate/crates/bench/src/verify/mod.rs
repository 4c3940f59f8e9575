//! Stress drivers and oracles, parameterized so the same code runs at smoke
//! scale in tests and at full scale in the acceptance run.

pub mod containers;
pub mod counting;
pub mod lincheck;
pub mod pool;
pub mod retire;
pub mod swcopy;
