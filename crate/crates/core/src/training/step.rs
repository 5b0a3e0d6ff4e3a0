//! One optimization step of the weakly supervised objective.
//!
//! Each step builds a fresh gradient tape per sample (fully labeled
//! samples and pseudo-labeled in-the-wild samples contribute different
//! loss terms — absent terms never enter the graph, so their gradients
//! are exactly zero), averages the collected gradients over the batch,
//! and applies one generator update. The discriminators are frozen during
//! the generator pass and then each receives one update of its own,
//! scoring the batch's detached parameter predictions against fresh draws
//! from the synthetic parameter prior; encoder isolation is structural
//! because the fakes enter that graph as constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{prior_face_coefficients, prior_hand_coefficients, Sample, SampleKind};
use crate::meshcore::{lbs_forward_t, ParametricModel};
use crate::network::{apply_camera_delta, Forward, HandFaceNet, ParamId, Params};
use crate::{Error, Result};

use super::assets::models_for;
use super::losses::{
    compute_interaction_loss, compute_mesh_loss, compute_wild_mesh_loss, generator_adversarial_t,
    discriminator_loss_t, keypoint_depth_loss_t, DepthLossInputs, InteractionInputs,
    MeshPredictions,
};
use super::optim::{AdamW, StepOutcome};
use super::run::TrainConfig;
use super::{LossWeights, TrainAssets};

/// Weighted loss contributions of a single sample's generator pass.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub kind: SampleKind,
    pub total: f64,
    pub mesh: f64,
    pub interaction: f64,
    pub adversarial: f64,
    pub depth: f64,
    /// Keypoints that were valid and covered by rendered geometry, when
    /// the depth term was evaluated.
    pub depth_valid: Option<usize>,
    pub touch_empty: bool,
    pub collision_empty: bool,
}

/// Batch-level record of one optimization step.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub samples: usize,
    /// Batch means of the weighted loss contributions.
    pub total: f64,
    pub mesh: f64,
    pub interaction: f64,
    pub adversarial: f64,
    pub depth: f64,
    pub disc_hand: f64,
    pub disc_face: f64,
    /// Samples whose depth term had fewer than two usable keypoints.
    pub depth_starved: usize,
    pub touch_empty: usize,
    pub collision_empty: usize,
    pub generator: StepOutcome,
    pub disc_hand_update: Option<StepOutcome>,
    pub disc_face_update: Option<StepOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum DiscKind {
    Hand,
    Face,
}

/// Owns everything one training run mutates: the network weights, the
/// optimizers, and the random stream for token masking and prior draws.
pub struct Trainer {
    pub net: HandFaceNet,
    pub params: Params,
    pub face: ParametricModel,
    pub hand: ParametricModel,
    pub assets: TrainAssets,
    pub weights: LossWeights,
    pub optimizer: AdamW,
    pub disc_optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub depth_on_labeled: bool,
    prior_amplitude: f64,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (face, hand) = models_for(&config.net)?;
        let (net, params) = HandFaceNet::build(&config.net, &face, &hand, config.seed)?;
        let assets = TrainAssets::new(&config.net, &face, &hand)?;
        let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay);
        optimizer.beta1 = config.beta1;
        optimizer.beta2 = config.beta2;
        optimizer.epsilon = config.epsilon;
        optimizer.clip_norm = config.clip_norm;
        let mut disc_optimizer = AdamW::new(config.disc_learning_rate, config.weight_decay);
        disc_optimizer.beta1 = config.beta1;
        disc_optimizer.beta2 = config.beta2;
        disc_optimizer.epsilon = config.epsilon;
        disc_optimizer.clip_norm = config.clip_norm;
        Ok(Self {
            net,
            params,
            face,
            hand,
            assets,
            weights: config.weights,
            optimizer,
            disc_optimizer,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            depth_on_labeled: config.depth_on_labeled,
            prior_amplitude: config.synth.pose_amplitude,
        })
    }

    /// Builds one sample's loss graph and collects generator gradients.
    /// The discriminators are frozen for the duration, so the returned
    /// gradients cover encoder/branch weights only. Also returns the
    /// detached packed parameter tails for the discriminator updates.
    pub(crate) fn generator_pass(
        &mut self,
        sample: &Sample,
    ) -> Result<(SampleLoss, Vec<(ParamId, Vec<f64>)>, Vec<f64>, Vec<f64>)> {
        self.params.set_frozen_prefix("disc_hand", true);
        self.params.set_frozen_prefix("disc_face", true);
        let result = self.generator_graph(sample);
        self.params.set_frozen_prefix("disc_hand", false);
        self.params.set_frozen_prefix("disc_face", false);
        result
    }

    fn generator_graph(
        &mut self,
        sample: &Sample,
    ) -> Result<(SampleLoss, Vec<(ParamId, Vec<f64>)>, Vec<f64>, Vec<f64>)> {
        let adversarial_on = self.weights.adversarial > 0.0;
        let kind = sample.kind();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut self.params, true);
        let output = self.net.forward(&mut fwd, &sample.image, Some(&mut self.rng))?;
        let (hand_vertices, _) = lbs_forward_t(fwd.tape, &self.hand, &output.hand_pose);
        let (face_vertices, _) = lbs_forward_t(fwd.tape, &self.face, &output.face_pose);
        let camera = match output.camera_delta {
            Some(delta) => apply_camera_delta(&sample.camera, fwd.tape.value(delta))?,
            None => sample.camera,
        };
        let preds = MeshPredictions {
            rough_hand_keypoints: output.rough.hand_keypoints,
            rough_face_keypoints: output.rough.face_keypoints,
            rough_hand_vertices: output.rough.hand_vertices,
            rough_face_vertices: output.rough.face_vertices,
            param_hand_vertices: hand_vertices,
            param_face_vertices: face_vertices,
            hand_params: output.hand_params,
            face_params: output.face_params,
        };
        let inter_inputs = InteractionInputs {
            hand_vertices,
            face_vertices,
            deformation: output.interaction.deformation,
            contact_hand: output.interaction.contact_hand,
            contact_face: output.interaction.contact_face,
        };

        let (mesh_total, inter_total, inter_bd, depth_term) = match (&sample.labeled, &sample.wild)
        {
            (Some(gt), _) => {
                let (mesh_total, _) = compute_mesh_loss(
                    fwd.tape,
                    &self.assets,
                    &self.face,
                    &self.hand,
                    &camera,
                    &preds,
                    gt,
                    &self.weights,
                )?;
                let (inter_total, inter_bd) = compute_interaction_loss(
                    fwd.tape,
                    &inter_inputs,
                    Some(&gt.annotation),
                    &self.face.faces,
                    &self.weights,
                )?;
                let depth_term = if self.depth_on_labeled {
                    let deformed = fwd.tape.add(face_vertices, output.interaction.deformation);
                    let to_z = |points3d: &[f64]| -> Vec<f64> {
                        points3d
                            .chunks_exact(3)
                            .map(|p| camera.world_to_camera([p[0], p[1], p[2]])[2])
                            .collect()
                    };
                    let hand_depths = to_z(&gt.hand_keypoints3d);
                    let face_depths = to_z(&gt.face_keypoints3d);
                    let inputs = DepthLossInputs {
                        hand_vertices,
                        face_vertices: deformed,
                        hand_triangles: &self.hand.faces,
                        face_triangles: &self.face.faces,
                        hand_keypoints2d: &gt.hand_keypoints2d.points,
                        face_keypoints2d: &gt.face_keypoints2d.points,
                        hand_depths: &hand_depths,
                        face_depths: &face_depths,
                        hand_valid: &gt.hand_keypoints2d.valid,
                        face_valid: &gt.face_keypoints2d.valid,
                    };
                    Some(keypoint_depth_loss_t(fwd.tape, &camera, &inputs)?)
                } else {
                    None
                };
                (mesh_total, inter_total, inter_bd, depth_term)
            }
            (None, Some(wild)) => {
                let (mesh_total, _) = compute_wild_mesh_loss(
                    fwd.tape,
                    &self.assets,
                    &self.face,
                    &self.hand,
                    &camera,
                    &preds,
                    wild,
                    &self.weights,
                );
                let (inter_total, inter_bd) = compute_interaction_loss(
                    fwd.tape,
                    &inter_inputs,
                    None,
                    &self.face.faces,
                    &self.weights,
                )?;
                let deformed = fwd.tape.add(face_vertices, output.interaction.deformation);
                let inputs = DepthLossInputs {
                    hand_vertices,
                    face_vertices: deformed,
                    hand_triangles: &self.hand.faces,
                    face_triangles: &self.face.faces,
                    hand_keypoints2d: &wild.hand_keypoints2d.points,
                    face_keypoints2d: &wild.face_keypoints2d.points,
                    hand_depths: &wild.hand_keypoint_depths,
                    face_depths: &wild.face_keypoint_depths,
                    hand_valid: &wild.hand_keypoints2d.valid,
                    face_valid: &wild.face_keypoints2d.valid,
                };
                let depth_term = Some(keypoint_depth_loss_t(fwd.tape, &camera, &inputs)?);
                (mesh_total, inter_total, inter_bd, depth_term)
            }
            (None, None) => return Err(Error::invalid("sample carries no supervision")),
        };

        let dh = fwd.tape.shape(output.hand_params)[1];
        let df = fwd.tape.shape(output.face_params)[1];
        let hand_tail = fwd.tape.slice_cols(output.hand_params, 6, dh);
        let face_tail = fwd.tape.slice_cols(output.face_params, 6, df);
        let hand_fake = fwd.tape.value(hand_tail).to_vec();
        let face_fake = fwd.tape.value(face_tail).to_vec();
        let adv_term = if adversarial_on {
            let ph = self.net.disc_hand.forward(&mut fwd, hand_tail)?;
            let pf = self.net.disc_face.forward(&mut fwd, face_tail)?;
            Some(generator_adversarial_t(fwd.tape, &[pf, ph]))
        } else {
            None
        };

        let mesh_w = fwd.tape.scale(mesh_total, self.weights.mesh);
        let inter_w = fwd.tape.scale(inter_total, self.weights.interaction);
        let mut total = fwd.tape.add(mesh_w, inter_w);
        let mut adversarial = 0.0;
        if let Some(t) = adv_term {
            let w = fwd.tape.scale(t, self.weights.adversarial);
            adversarial = fwd.tape.scalar_value(w);
            total = fwd.tape.add(total, w);
        }
        let mut depth = 0.0;
        let mut depth_valid = None;
        if let Some((t, n)) = depth_term {
            let w = fwd.tape.scale(t, self.weights.depth);
            depth = fwd.tape.scalar_value(w);
            depth_valid = Some(n);
            total = fwd.tape.add(total, w);
        }

        fwd.tape.backward(total);
        let loss = SampleLoss {
            kind,
            total: fwd.tape.scalar_value(total),
            mesh: fwd.tape.scalar_value(mesh_w),
            interaction: fwd.tape.scalar_value(inter_w),
            adversarial,
            depth,
            depth_valid,
            touch_empty: inter_bd.touch_empty,
            collision_empty: inter_bd.collision_empty,
        };
        let bound = fwd.finish();
        let grads = self.params.collect_gradients(&tape, &bound);
        Ok((loss, grads, hand_fake, face_fake))
    }

    /// Builds one discriminator's loss against fresh prior draws and
    /// collects its gradients. The fakes enter as constants, so only the
    /// discriminator's own weights appear in the result.
    pub(crate) fn discriminator_pass(
        &mut self,
        which: DiscKind,
        fakes: &[Vec<f64>],
    ) -> Result<(f64, Vec<(ParamId, Vec<f64>)>)> {
        if fakes.is_empty() {
            return Err(Error::invalid(
                "discriminator update needs at least one fake sample",
            ));
        }
        let dim = fakes[0].len();
        let b = fakes.len();
        let mut real = Vec::with_capacity(b * dim);
        for _ in 0..b {
            match which {
                DiscKind::Hand => real.extend(prior_hand_coefficients(
                    &self.hand,
                    self.prior_amplitude,
                    &mut self.rng,
                )?),
                DiscKind::Face => real.extend(prior_face_coefficients(
                    &self.face,
                    self.prior_amplitude,
                    &mut self.rng,
                )),
            }
        }
        if real.len() != b * dim {
            return Err(Error::shape(format!(
                "prior draw length {} does not match discriminator input width {dim}",
                real.len() / b
            )));
        }
        let mut fake = Vec::with_capacity(b * dim);
        for row in fakes {
            if row.len() != dim {
                return Err(Error::shape("ragged fake parameter batch"));
            }
            fake.extend_from_slice(row);
        }
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut self.params, true);
        let real_t = fwd.tape.constant(&[b, dim], real);
        let fake_t = fwd.tape.constant(&[b, dim], fake);
        let disc = match which {
            DiscKind::Hand => &self.net.disc_hand,
            DiscKind::Face => &self.net.disc_face,
        };
        let real_p = disc.forward(&mut fwd, real_t)?;
        let fake_p = disc.forward(&mut fwd, fake_t)?;
        let loss = discriminator_loss_t(fwd.tape, real_p, fake_p)?;
        fwd.tape.backward(loss);
        let value = fwd.tape.scalar_value(loss);
        let bound = fwd.finish();
        let grads = self.params.collect_gradients(&tape, &bound);
        Ok((value, grads))
    }

    /// One full optimization step over a batch: a generator update on the
    /// batch-averaged composite loss, then one update per discriminator
    /// when the adversarial weight is active.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::invalid("training step needs a nonempty batch"));
        }
        let b = batch.len() as f64;
        let mut accum: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        let mut hand_fakes = Vec::with_capacity(batch.len());
        let mut face_fakes = Vec::with_capacity(batch.len());
        let (mut total, mut mesh, mut interaction, mut adversarial, mut depth) =
            (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut depth_starved = 0;
        let mut touch_empty = 0;
        let mut collision_empty = 0;
        for sample in batch {
            let (loss, grads, hand_fake, face_fake) = self.generator_pass(sample)?;
            for (id, g) in grads {
                match &mut accum[id.index()] {
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(&g) {
                            *a += x;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            total += loss.total;
            mesh += loss.mesh;
            interaction += loss.interaction;
            adversarial += loss.adversarial;
            depth += loss.depth;
            if matches!(loss.depth_valid, Some(n) if n < 2) {
                depth_starved += 1;
            }
            if loss.touch_empty {
                touch_empty += 1;
            }
            if loss.collision_empty {
                collision_empty += 1;
            }
            hand_fakes.push(hand_fake);
            face_fakes.push(face_fake);
        }
        let grads: Vec<(ParamId, Vec<f64>)> = accum
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| {
                g.map(|mut g| {
                    for x in &mut g {
                        *x /= b;
                    }
                    (ParamId(i), g)
                })
            })
            .collect();
        let generator = self.optimizer.step(&mut self.params, grads);

        let (mut disc_hand, mut disc_face) = (0.0, 0.0);
        let mut disc_hand_update = None;
        let mut disc_face_update = None;
        if self.weights.adversarial > 0.0 {
            let (lh, gh) = self.discriminator_pass(DiscKind::Hand, &hand_fakes)?;
            disc_hand_update = Some(self.disc_optimizer.step(&mut self.params, gh));
            disc_hand = lh;
            let (lf, gf) = self.discriminator_pass(DiscKind::Face, &face_fakes)?;
            disc_face_update = Some(self.disc_optimizer.step(&mut self.params, gf));
            disc_face = lf;
        }

        Ok(StepStats {
            samples: batch.len(),
            total: total / b,
            mesh: mesh / b,
            interaction: interaction / b,
            adversarial: adversarial / b,
            depth: depth / b,
            disc_hand,
            disc_face,
            depth_starved,
            touch_empty,
            collision_empty,
            generator,
            disc_hand_update,
            disc_face_update,
        })
    }
}
