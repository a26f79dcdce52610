//! Photon-pair correlation analysis for binary single-photon camera frames.
//!
//! The pipeline runs from frames (recorded or simulated) through exact
//! integer coincidence statistics to the joint probability distribution of
//! detected pairs, position/momentum correlation widths, and an
//! entanglement-dimensionality witness.

pub mod epr;
pub mod error;
pub mod export;
pub mod fit;
pub mod frames;
pub mod jpd;
pub mod sim;
pub mod witness;

pub use error::{Error, Result};
pub use frames::{FrameSet, SensorGeometry};
pub use jpd::{accumulate, AccumStats};
pub use sim::{DetectorParams, Mode, Simulator, SourceParams};
