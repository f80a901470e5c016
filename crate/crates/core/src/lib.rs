//! Globally optimal beamforming for rate-splitting multiple access.

pub mod audit;
pub mod baseline;
pub mod cli;
pub mod conic;
pub mod experiments;
pub mod model;
pub mod sitbb;
