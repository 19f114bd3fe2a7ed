//! Dataset ingestion, scenario orchestration and result export for the
//! syncmesh simulator.

pub mod dataset;
pub mod export;
pub mod scenario;
pub mod snapshot;
