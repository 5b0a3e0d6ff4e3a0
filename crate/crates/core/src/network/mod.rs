//! Two-branch interaction-aware regression network.
//!
//! An image proxy passes through a small strided convolution stack to 49
//! feature tokens, which a learned linear map upsamples to one token per
//! keypoint and coarse mesh vertex (tagged with zero-pose coordinates).
//! MeshNet regresses rough 3D geometry per token; InteractionNet
//! predicts per-vertex contact probabilities and a dense face
//! deformation field; two IK networks recover parametric pose, shape and
//! expression coefficients from the rough vertices; and two
//! discriminators score parameter vectors for the adversarial prior.
//! All parameters live in a named [`Params`] store so a fresh gradient
//! tape can be bound per step and checkpoints are self-describing.

mod backbone;
mod branches;
mod disc;
mod ik;
mod layers;
mod model;
mod params;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use backbone::{ConvBackbone, GRID_SIZE, INPUT_CHANNELS, INPUT_SIZE, N_FEATURE_TOKENS};
pub use branches::{
    InteractionNet, InteractionPrediction, MeshNet, RoughPrediction, TokenBuilder, TokenLayout,
};
pub use disc::{apply_camera_delta, CameraHead, Discriminator};
pub use ik::IkNet;
pub use layers::{kaiming_uniform, BatchNorm, EncoderStack, Linear, TransformerLayer};
pub use model::{
    checkpoint_container, load_checkpoint, open_checkpoint, read_checkpoint, save_checkpoint,
    HandFaceNet, NetOutput, CHECKPOINT_VERSION,
};
pub use params::{Forward, ParamId, Params};

/// Dimensions and switches for every sub-network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Backbone feature width H (last convolution's channel count).
    pub hidden: usize,
    /// Attention heads per transformer layer.
    pub heads: usize,
    /// Transformer layers per encoder stage.
    pub layers_per_block: usize,
    /// Feed-forward expansion factor inside each transformer layer.
    pub ffn_mult: usize,
    /// Fraction of tokens whose features are zeroed during training.
    pub mask_rate: f64,
    /// Hidden width of the IK networks.
    pub ik_hidden: usize,
    /// Feature widths of MeshNet's three encoder stages.
    pub mesh_dims: [usize; 3],
    /// Feature widths of InteractionNet's two encoder stages.
    pub interaction_dims: [usize; 2],
    /// Output channels of each backbone convolution (last = `hidden`).
    pub backbone_channels: Vec<usize>,
    /// Hand keypoint count (tokens and regressed outputs).
    pub hand_keypoints: usize,
    /// Face keypoint count.
    pub face_keypoints: usize,
    /// Coarse hand vertex token count.
    pub hand_tokens: usize,
    /// Coarse face vertex token count.
    pub face_tokens: usize,
    /// Full-resolution hand vertex count (contact head output).
    pub hand_vertices: usize,
    /// Full-resolution face vertex count (contact/deformation outputs).
    pub face_vertices: usize,
    /// Articulated hand joint count.
    pub hand_joints: usize,
    /// Hand shape coefficient count.
    pub hand_shape: usize,
    /// Articulated face joint count.
    pub face_joints: usize,
    /// Face shape coefficient count.
    pub face_shape: usize,
    /// Face expression coefficient count.
    pub face_expression: usize,
    /// Predict a weak-perspective camera correction; when off, the
    /// ground-truth camera is used unchanged.
    pub predict_camera: bool,
}

impl NetConfig {
    /// Desk-scale configuration matched to the toy parametric models.
    pub fn toy() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            layers_per_block: 1,
            ffn_mult: 2,
            mask_rate: 0.30,
            ik_hidden: 64,
            mesh_dims: [64, 32, 16],
            interaction_dims: [32, 32],
            backbone_channels: vec![4, 8, 12, 16, 64],
            hand_keypoints: 21,
            face_keypoints: 68,
            hand_tokens: 49,
            face_tokens: 42,
            hand_vertices: 195,
            face_vertices: 642,
            hand_joints: 16,
            hand_shape: 5,
            face_joints: 1,
            face_shape: 5,
            face_expression: 5,
            predict_camera: false,
        }
    }

    /// Full-fidelity configuration matched to the refined models.
    pub fn full() -> Self {
        Self {
            layers_per_block: 4,
            ik_hidden: 1024,
            hand_tokens: 195,
            face_tokens: 559,
            hand_vertices: 778,
            face_vertices: 5023,
            ..Self::toy()
        }
    }

    /// Token-role row ranges in declaration order.
    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            hand_keypoints: self.hand_keypoints,
            face_keypoints: self.face_keypoints,
            hand_vertices: self.hand_tokens,
            face_vertices: self.face_tokens,
        }
    }

    /// Total token count N.
    pub fn tokens(&self) -> usize {
        self.layout().total()
    }

    /// Packed parameter vector length for the hand.
    pub fn hand_param_dim(&self) -> usize {
        6 + 3 * self.hand_joints + self.hand_shape
    }

    /// Packed parameter vector length for the face.
    pub fn face_param_dim(&self) -> usize {
        6 + 3 * self.face_joints + self.face_shape + self.face_expression
    }

    /// Hand discriminator input width (joint rotations + shape).
    pub fn hand_disc_dim(&self) -> usize {
        3 * self.hand_joints + self.hand_shape
    }

    /// Face discriminator input width (pose + shape + expression).
    pub fn face_disc_dim(&self) -> usize {
        3 * self.face_joints + self.face_shape + self.face_expression
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::invalid(format!(
                "hidden dim {} must be divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        for d in self.mesh_dims.iter().chain(&self.interaction_dims) {
            if *d == 0 || d % self.heads != 0 {
                return Err(Error::invalid(format!(
                    "encoder dim {d} must be a positive multiple of {} heads",
                    self.heads
                )));
            }
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::invalid(format!(
                "mask rate {} outside [0, 1)",
                self.mask_rate
            )));
        }
        if self.layers_per_block == 0 || self.ffn_mult == 0 || self.ik_hidden == 0 {
            return Err(Error::invalid("layer counts and widths must be positive"));
        }
        match self.backbone_channels.last() {
            None => return Err(Error::invalid("backbone needs at least one convolution")),
            Some(&last) if last != self.hidden => {
                return Err(Error::invalid(format!(
                    "last backbone channel count {last} must equal hidden dim {}",
                    self.hidden
                )));
            }
            _ => {}
        }
        let counts = [
            self.hand_keypoints,
            self.face_keypoints,
            self.hand_tokens,
            self.face_tokens,
            self.hand_vertices,
            self.face_vertices,
            self.hand_joints,
            self.face_joints,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::invalid("token, keypoint and joint counts must be positive"));
        }
        if self.hand_tokens > self.hand_vertices || self.face_tokens > self.face_vertices {
            return Err(Error::invalid(
                "coarse token counts cannot exceed full vertex counts",
            ));
        }
        Ok(())
    }
}
