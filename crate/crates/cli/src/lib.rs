//! Support code for the `pbrl` binary: config assembly from flags and the
//! labeling HTTP service.

pub mod overrides;
pub mod server;
