//! Desk-scale semantic occupancy world model.
//!
//! The crate covers the full loop: procedural synthetic driving scenes with
//! ground-truth voxel grids and baked 2D labels, a multi-view unprojection
//! encoder producing per-voxel features, a state-conditioned forecasting
//! module, differentiable volume rendering of density/semantic/color fields
//! for 2D supervision, a two-stage training pipeline (rendering-supervised
//! pre-training, occupancy-supervised fine-tuning), and the evaluation
//! metric suite (mIoU, RayIoU, trajectory L2, collision rate).

pub mod autodiff;
pub mod camera;
pub mod ego;
pub mod error;
pub mod grid;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod nets;
pub mod occg;
pub mod pipeline;
pub mod pose;
pub mod ray;
pub mod render;
pub mod scene;
pub mod scenegen;

pub use error::{Error, Result};
