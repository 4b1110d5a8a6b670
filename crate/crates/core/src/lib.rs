//! Core library for self-supervised isotropic super-resolution of
//! anisotropic 3-D electron-microscopy volumes.
//!
//! The pipeline: load an anisotropic volume, synthesize (LR, GT) training
//! pairs from its own lateral planes, train a windowed-attention network
//! to undo the synthetic degradation, then sweep the trained model over
//! the axial planes of the cubically isotropized volume and restack.

pub mod checkpoint;
pub mod degrade;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod error;
pub mod io;
pub mod phantom;
pub mod reconstruct;
pub mod resample;
pub mod trainer;
pub mod volume;

pub use error::{CoreError, FailureClass, Result};
pub use volume::{AnisotropyRatio, Spacing, Volume};
