//! Diffusion-based approximate model predictive control on a planar arm.

pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod evalharness;
pub mod kinematics;
pub mod nlp;
pub mod nn;
pub mod selection;

pub use error::{Error, Result};
pub use kinematics::{ArmModel, Obstacle, Pose2};
