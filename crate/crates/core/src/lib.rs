//! Turn sketch-and-text instructions drawn over scene images into
//! distributions over 3D end-effector trajectories.
//!
//! The flow is: annotate an image ([`instruction`]), ask a reasoning model for
//! keypoint descriptors and a pointing model for their pixels ([`models`]),
//! have the reasoning model draw one 2D trajectory per calibrated view, lift
//! the pair into per-timestep 3D Gaussians by ray casting ([`geometry`],
//! [`lifting`]), then attach an orientation and gripper schedule
//! ([`pipeline`]). Sampled trajectories can seed TD3+BC training ([`rl`]).

pub mod digest;
pub mod geometry;
pub mod instruction;
pub mod lifting;
pub mod models;
pub mod pipeline;
pub mod rl;
