//! Generator-unit model calibration from phasor measurement playback.

pub mod blockdyn;
pub mod datagen;
pub mod nn;
pub mod num;
pub mod pipeline;
pub mod playback;
pub mod sensitivity;

pub use num::Real;

pub type UnitModel64 = blockdyn::UnitModel<f64>;
pub type UnitModel32 = blockdyn::UnitModel<f32>;
pub type SimState64 = blockdyn::SimState<f64>;
pub type Trajectory64 = playback::Trajectory<f64>;
pub type Dataset64 = datagen::Dataset<f64>;
pub type Dataset32 = datagen::Dataset<f32>;
pub type Network64 = nn::Network<f64>;
pub type Network32 = nn::Network<f32>;
