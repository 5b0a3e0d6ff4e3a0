//! Recovery of interacting hand and face meshes from single images, with
//! surface deformation at the contact region.
//!
//! The crate is organised bottom-up:
//!
//! - [`container`]: a tagged little-endian binary container used for model
//!   assets, datasets and checkpoints (bitwise-deterministic round trips).
//! - [`autodiff`]: a reverse-mode automatic differentiation engine over
//!   `f64` tensors (Wengert tape, enum ops, leading-axis broadcasting).
//! - [`meshcore`]: parametric hand/face models (blendshapes + linear blend
//!   skinning), keypoint regression, resampling, Procrustes alignment and
//!   Levenberg–Marquardt parameter fitting.
//! - [`interaction`]: point/triangle BVHs, generalized winding numbers,
//!   penetration reports, Chamfer distances and the contact/deformation/
//!   collision/touch loss family.
//! - [`camrender`]: pinhole camera, a z-buffer triangle rasterizer with
//!   per-pixel fragments, differentiable keypoint-depth sampling, the
//!   scale-invariant log-depth loss and PFM export.
//! - [`data`]: procedurally generated toy and full-resolution assets plus
//!   the synthetic labeled / pseudo-labeled ("wild") sample generators.
//! - [`network`]: the two-branch regressor (image backbone, token encoders,
//!   mesh branch, interaction branch, inverse-kinematics nets, pose
//!   discriminators, camera correction head).
//! - [`training`]: loss composition, adversarial updates, AdamW, the
//!   training step and configuration.
//! - [`metrics`]: evaluation protocol (vertex/joint errors, collision and
//!   plausibility statistics, contact classification).

pub mod autodiff;
pub mod camrender;
pub mod container;
pub mod data;
pub mod error;
pub mod interaction;
pub mod meshcore;
pub mod metrics;
pub mod network;
pub mod training;

pub use error::{Error, Result};
