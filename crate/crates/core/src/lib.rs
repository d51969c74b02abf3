//! Multi-agent test orchestration over a simulated three-tier system.

pub mod agents;
pub mod bus;
pub mod coverage;
pub mod domain;
pub mod parallel;
pub mod protocol;
pub mod reliability;
pub mod scenario;
pub mod sut;
