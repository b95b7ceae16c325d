//! Causal inference for bipartite interference: interventional units whose
//! treatments affect outcomes measured on a separate set of outcome units.

pub mod allocation;
pub mod data;
pub mod error;
pub mod geo;
pub mod interference;
pub mod io;
pub mod iptw;
pub mod oracle;
pub mod propensity;
pub mod rng;
pub mod simulation;

pub use allocation::{AllocationStrategy, AllocationVector};
pub use data::{BipartiteDataset, ClusterPartition, InterventionalUnit, OutcomeUnit};
pub use error::{Error, Result};
pub use geo::GeoPoint;
pub use interference::{InterferenceMap, KeyAssignment, StructureClass};
