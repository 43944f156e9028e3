//! Localization and tracking of multiple simultaneous sound sources from a
//! microphone-array recording.

pub mod beamformer;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod simulator;
pub mod tracker;
pub mod vec3;

pub use error::{Error, Result};
pub use vec3::Vec3;
