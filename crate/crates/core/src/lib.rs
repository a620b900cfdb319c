//! Control and analysis stack for a finger-pad inverted-Delta haptic display.
//!
//! The crate is organised bottom-up: [`geometry`] and [`kinematics`] describe
//! the mechanism, [`patterns`] holds the stimulus catalogue, [`render`] turns
//! stimuli into fixed-tick trajectories, [`protocol`] encodes servo frames,
//! [`sim`] plays frames through a virtual device and finger pad, and
//! [`experiment`] / [`stats`] run and analyse discrimination studies.

pub mod config;
pub mod experiment;
pub mod geometry;
pub mod kinematics;
pub mod patterns;
pub mod protocol;
pub mod render;
pub mod responder;
pub mod sim;
pub mod stats;

pub use geometry::{DeltaGeometry, ForceVector, JointAngles, Pose, TorqueTriple, WorkspaceSpec};
