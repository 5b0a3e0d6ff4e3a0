//! Weakly supervised training: loss composition over labeled and
//! pseudo-labeled samples, adversarial parameter priors with alternating
//! updates, a decoupled-weight-decay Adam optimizer, and the step/run
//! drivers with line-delimited logging and checkpointing.
//!
//! Each optimization step runs every batch item through its own gradient
//! tape (the network is single-image), accumulates averaged generator
//! gradients, applies one generator update, and then one update per
//! discriminator on detached generator outputs against fresh draws from
//! the synthetic parameter prior.

mod assets;
mod losses;
mod optim;
mod run;
mod step;


pub use assets::{coarse_keypoint_regressor, models_for, TrainAssets};
pub use losses::{
    adversarial_losses, compute_interaction_loss, compute_mesh_loss, compute_wild_mesh_loss,
    discriminator_loss_t, generator_adversarial_t, keypoint_depth_loss_t, AdversarialLossValues,
    DepthLossInputs, InteractionInputs, InteractionLossBreakdown, MeshLossBreakdown,
    MeshPredictions,
};
pub use optim::{clip_gradients, AdamW, StepOutcome};
pub use run::{run_training, RunReport, TrainConfig};
pub use step::{SampleLoss, StepStats, Trainer};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Every constant entering the total training objective
/// `total = mesh·L_mesh + interaction·L_interaction + adversarial·L_adv + depth·L_depth`
/// together with the internal term weights of the mesh and interaction
/// compositions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Outer weight of the mesh recovery loss.
    pub mesh: f64,
    /// Outer weight of the interaction loss family.
    pub interaction: f64,
    /// Outer weight of the keypoint depth loss.
    pub depth: f64,
    /// Outer weight of the generator's adversarial term.
    pub adversarial: f64,
    /// Mesh-internal: reprojection term.
    pub mesh_reproj: f64,
    /// Mesh-internal: vertex term.
    pub mesh_vert: f64,
    /// Mesh-internal: keypoint term.
    pub mesh_key: f64,
    /// Mesh-internal: parameter regression term.
    pub mesh_params: f64,
    /// Interaction-internal: touch (contact-region Chamfer) term.
    pub inter_touch: f64,
    /// Interaction-internal: contact classification term.
    pub inter_contact: f64,
    /// Interaction-internal: collision term.
    pub inter_collision: f64,
    /// Interaction-internal: deformation field term.
    pub inter_deform: f64,
    /// Hand weight inside the vertex/keypoint terms.
    pub vert_hand: f64,
    /// Face weight inside the vertex/keypoint terms.
    pub vert_face: f64,
    /// Extra weight on the non-parametric (rough and mesh-regressed)
    /// vertex/keypoint sets relative to the parametric ones.
    pub nonparametric: f64,
    /// Hand weight of each reprojection term.
    pub reproj_hand: f64,
    /// Face weight of each reprojection term.
    pub reproj_face: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mesh: 12.5,
            interaction: 5.0,
            depth: 2.5,
            adversarial: 1.0,
            mesh_reproj: 1.0,
            mesh_vert: 4.0,
            mesh_key: 2.0,
            mesh_params: 2.0,
            inter_touch: 0.2,
            inter_contact: 0.6,
            inter_collision: 1.0,
            inter_deform: 6.0,
            vert_hand: 3.0,
            vert_face: 1.0,
            nonparametric: 4.0,
            reproj_hand: 4.0,
            reproj_face: 1.0,
        }
    }
}

impl LossWeights {
    /// Rejects negative weights.
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("mesh", self.mesh),
            ("interaction", self.interaction),
            ("depth", self.depth),
            ("adversarial", self.adversarial),
            ("mesh_reproj", self.mesh_reproj),
            ("mesh_vert", self.mesh_vert),
            ("mesh_key", self.mesh_key),
            ("mesh_params", self.mesh_params),
            ("inter_touch", self.inter_touch),
            ("inter_contact", self.inter_contact),
            ("inter_collision", self.inter_collision),
            ("inter_deform", self.inter_deform),
            ("vert_hand", self.vert_hand),
            ("vert_face", self.vert_face),
            ("nonparametric", self.nonparametric),
            ("reproj_hand", self.reproj_hand),
            ("reproj_face", self.reproj_face),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "loss weight '{name}' must be a nonnegative finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}
