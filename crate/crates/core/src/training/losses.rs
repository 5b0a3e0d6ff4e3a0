//! Loss builders on the gradient tape: mesh recovery (reprojection,
//! vertices, keypoints, parameters), interaction (touch, contact,
//! collision, deformation), the adversarial generator/discriminator
//! objectives, and the rendered keypoint-depth loss.
//!
//! Conventions: vertex and keypoint discrepancies are mean-per-row L1
//! (the L1 norm of each row's residual, averaged over rows); parameter
//! discrepancies are mean absolute error per group, averaged over groups
//! with the root translation excluded; probabilities entering logarithms
//! are clamped to `[1e-7, 1 - 1e-7]`.

use crate::autodiff::{Tape, Tensor};
use crate::camrender::{
    keypoint_l1_t, project, project_t, rasterize_depth_fragments, sample_keypoint_depths_t,
    silog_from_samples_t, Camera, MeshRef,
};
use crate::data::{Keypoints2d, LabeledGt, WildGt};
use crate::interaction::{
    collision_loss_t, contact_bce_t, deformation_loss_t, touch_loss_t, DeformationLossOptions,
    InteractionAnnotation, BCE_EPSILON,
};
use crate::meshcore::{regress_keypoints, regress_keypoints_t, resample_mesh, ParametricModel};
use crate::{Error, Result};

use super::{LossWeights, TrainAssets};

/// Every predicted quantity entering the mesh recovery loss, as tape
/// handles: the rough branch's token-resolution geometry, the posed
/// parametric surfaces, and the packed parameter rows they came from.
#[derive(Debug, Clone, Copy)]
pub struct MeshPredictions {
    /// `[K_hand, 3]`
    pub rough_hand_keypoints: Tensor,
    /// `[K_face, 3]`
    pub rough_face_keypoints: Tensor,
    /// `[hand_tokens, 3]`
    pub rough_hand_vertices: Tensor,
    /// `[face_tokens, 3]`
    pub rough_face_vertices: Tensor,
    /// `[V_hand, 3]` posed parametric hand.
    pub param_hand_vertices: Tensor,
    /// `[V_face, 3]` posed parametric face (undeformed).
    pub param_face_vertices: Tensor,
    /// `[1, 6 + 3J_h + S_h]` packed hand parameters.
    pub hand_params: Tensor,
    /// `[1, 6 + 3J_f + S_f + E_f]` packed face parameters.
    pub face_params: Tensor,
}

/// Per-term values of one mesh loss evaluation (unweighted terms plus the
/// weighted total).
#[derive(Debug, Clone, Copy, Default)]
pub struct MeshLossBreakdown {
    pub reproj: f64,
    pub vert: f64,
    pub key: f64,
    pub params: f64,
    pub total: f64,
}

/// Mean-per-row L1 against a constant target.
fn mean_row_l1(tape: &mut Tape, pred: Tensor, target: &[f64]) -> Tensor {
    let shape = tape.shape(pred).to_vec();
    assert_eq!(
        shape.iter().product::<usize>(),
        target.len(),
        "L1 target cardinality mismatch"
    );
    let t = tape.constant(&shape, target.to_vec());
    let d = tape.sub(pred, t);
    let a = tape.abs(d);
    let rows = tape.sum_last(a);
    tape.mean_all(rows)
}

/// Keypoint indices usable as reprojection targets: marked valid and with
/// finite pixel coordinates.
fn usable_keypoint_rows(gt2d: &Keypoints2d) -> Vec<usize> {
    gt2d.points
        .chunks_exact(2)
        .enumerate()
        .filter(|(i, p)| gt2d.valid[*i] && p[0].is_finite() && p[1].is_finite())
        .map(|(i, _)| i)
        .collect()
}

/// Projects a 3-D target set into pixel targets with validity flags.
fn project_target(camera: &Camera, points3d: &[f64]) -> Keypoints2d {
    let proj = project(camera, points3d);
    Keypoints2d {
        points: proj.pixels,
        valid: proj.valid,
    }
}

/// Sum of mean-per-keypoint L1 reprojection losses over several predicted
/// `[K, 3]` sets against one 2-D target array, each scaled by `weight`,
/// restricted to valid keypoints.
fn reprojection_sets(
    tape: &mut Tape,
    camera: &Camera,
    sets: &[Tensor],
    gt2d: &Keypoints2d,
    weight: f64,
) -> Tensor {
    let keep = usable_keypoint_rows(gt2d);
    let mut total = tape.scalar(0.0);
    if keep.is_empty() {
        return total;
    }
    let kept: Vec<f64> = keep
        .iter()
        .flat_map(|&i| [gt2d.points[i * 2], gt2d.points[i * 2 + 1]])
        .collect();
    for &set in sets {
        let rows = tape.gather_rows(set, &keep);
        let l = keypoint_l1_t(tape, camera, rows, &kept);
        let w = tape.scale(l, weight);
        total = tape.add(total, w);
    }
    total
}

/// Grouped mean-absolute parameter error over a packed `[1, D]` row:
/// rotation-plus-joints as one group, shape as another, expression (when
/// present) as a third; groups are averaged and the root translation is
/// excluded.
fn grouped_param_l1(
    tape: &mut Tape,
    pred: Tensor,
    gt_packed: &[f64],
    joints: usize,
    shape_dim: usize,
    expr_dim: usize,
) -> Tensor {
    let d = gt_packed.len();
    assert_eq!(d, 6 + 3 * joints + shape_dim + expr_dim, "packed length mismatch");
    let gtc = tape.constant(&[1, d], gt_packed.to_vec());
    let diff = tape.sub(pred, gtc);
    let j3 = 3 * joints;
    let rot = tape.slice_cols(diff, 0, 3);
    let jnt = tape.slice_cols(diff, 6, 6 + j3);
    let pose = tape.concat(&[rot, jnt], 1);
    let mut groups = vec![pose];
    if shape_dim > 0 {
        groups.push(tape.slice_cols(diff, 6 + j3, 6 + j3 + shape_dim));
    }
    if expr_dim > 0 {
        groups.push(tape.slice_cols(diff, 6 + j3 + shape_dim, d));
    }
    let n = groups.len() as f64;
    let mut total = tape.scalar(0.0);
    for g in groups {
        let a = tape.abs(g);
        let m = tape.mean_all(a);
        total = tape.add(total, m);
    }
    tape.scale(total, 1.0 / n)
}

struct DerivedKeypoints {
    hand_mesh: Tensor,
    face_mesh: Tensor,
    hand_param: Tensor,
    face_param: Tensor,
}

/// Keypoint sets derived from vertex predictions: regressed from the
/// rough coarse vertices and from the posed parametric surfaces.
fn derived_keypoints(
    tape: &mut Tape,
    assets: &TrainAssets,
    face: &ParametricModel,
    hand: &ParametricModel,
    preds: &MeshPredictions,
) -> DerivedKeypoints {
    DerivedKeypoints {
        hand_mesh: regress_keypoints_t(tape, preds.rough_hand_vertices, &assets.hand_coarse_keypoints),
        face_mesh: regress_keypoints_t(tape, preds.rough_face_vertices, &assets.face_coarse_keypoints),
        hand_param: regress_keypoints_t(tape, preds.param_hand_vertices, &hand.keypoint_regressor),
        face_param: regress_keypoints_t(tape, preds.param_face_vertices, &face.keypoint_regressor),
    }
}

/// Full mesh recovery loss for a labeled sample:
/// `reproj + 4·vert + 2·key + 2·params` under the configured weights.
///
/// Targets: the rough face is supervised on the coarsened deformed
/// (observed) surface while the parametric face is supervised on the
/// undeformed surface it can actually represent; hand targets are the
/// posed ground-truth surface at both resolutions. The vertex term
/// weights hands 3, faces 1, and the rough sets an extra 4; the keypoint
/// term puts the extra 4 on the rough and mesh-regressed sets.
#[allow(clippy::too_many_arguments)]
pub fn compute_mesh_loss(
    tape: &mut Tape,
    assets: &TrainAssets,
    face: &ParametricModel,
    hand: &ParametricModel,
    camera: &Camera,
    preds: &MeshPredictions,
    gt: &LabeledGt,
    w: &LossWeights,
) -> Result<(Tensor, MeshLossBreakdown)> {
    let kp = derived_keypoints(tape, assets, face, hand, preds);

    let face_deformed = gt.face_vertices_deformed()?;
    let hand_coarse_gt = resample_mesh(&gt.hand_vertices, &assets.hand_sampling)?;
    let face_coarse_gt = resample_mesh(&face_deformed, &assets.face_sampling)?;
    let hand_mesh_kp_gt = regress_keypoints(&hand_coarse_gt, &assets.hand_coarse_keypoints)?;
    let face_mesh_kp_gt = regress_keypoints(&face_coarse_gt, &assets.face_coarse_keypoints)?;
    let face_param_kp_gt = regress_keypoints(&gt.face_vertices_undeformed, &face.keypoint_regressor)?;

    // Each keypoint set reprojects against the projection of its own 3-D
    // target (the stored 2-D arrays already are those projections for the
    // rough sets and the parametric hand), so a perfect prediction scores
    // zero despite the resolution gap of the mesh-regressed sets.
    let hand_mesh_2d = project_target(camera, &hand_mesh_kp_gt);
    let face_mesh_2d = project_target(camera, &face_mesh_kp_gt);
    let face_param_2d = project_target(camera, &face_param_kp_gt);
    let mut reproj = tape.scalar(0.0);
    for (set, target, weight) in [
        (preds.rough_hand_keypoints, &gt.hand_keypoints2d, w.reproj_hand),
        (kp.hand_mesh, &hand_mesh_2d, w.reproj_hand),
        (kp.hand_param, &gt.hand_keypoints2d, w.reproj_hand),
        (preds.rough_face_keypoints, &gt.face_keypoints2d, w.reproj_face),
        (kp.face_mesh, &face_mesh_2d, w.reproj_face),
        (kp.face_param, &face_param_2d, w.reproj_face),
    ] {
        let term = reprojection_sets(tape, camera, &[set], target, weight);
        reproj = tape.add(reproj, term);
    }

    let vh_rough = mean_row_l1(tape, preds.rough_hand_vertices, &hand_coarse_gt);
    let vf_rough = mean_row_l1(tape, preds.rough_face_vertices, &face_coarse_gt);
    let vh_param = mean_row_l1(tape, preds.param_hand_vertices, &gt.hand_vertices);
    let vf_param = mean_row_l1(tape, preds.param_face_vertices, &gt.face_vertices_undeformed);
    let mut vert = tape.scalar(0.0);
    for (term, weight) in [
        (vh_rough, w.vert_hand * w.nonparametric),
        (vf_rough, w.vert_face * w.nonparametric),
        (vh_param, w.vert_hand),
        (vf_param, w.vert_face),
    ] {
        let s = tape.scale(term, weight);
        vert = tape.add(vert, s);
    }

    let kh_rough = mean_row_l1(tape, preds.rough_hand_keypoints, &gt.hand_keypoints3d);
    let kf_rough = mean_row_l1(tape, preds.rough_face_keypoints, &gt.face_keypoints3d);
    let kh_mesh = mean_row_l1(tape, kp.hand_mesh, &hand_mesh_kp_gt);
    let kf_mesh = mean_row_l1(tape, kp.face_mesh, &face_mesh_kp_gt);
    let kh_param = mean_row_l1(tape, kp.hand_param, &gt.hand_keypoints3d);
    let kf_param = mean_row_l1(tape, kp.face_param, &face_param_kp_gt);
    let mut key = tape.scalar(0.0);
    for (term, weight) in [
        (kh_rough, w.nonparametric),
        (kf_rough, w.nonparametric),
        (kh_mesh, w.nonparametric),
        (kf_mesh, w.nonparametric),
        (kh_param, 1.0),
        (kf_param, 1.0),
    ] {
        let s = tape.scale(term, weight);
        key = tape.add(key, s);
    }

    let ph = grouped_param_l1(
        tape,
        preds.hand_params,
        &gt.hand_state.pack(),
        hand.n_joints(),
        hand.n_shape(),
        hand.n_expression(),
    );
    let pf = grouped_param_l1(
        tape,
        preds.face_params,
        &gt.face_state.pack(),
        face.n_joints(),
        face.n_shape(),
        face.n_expression(),
    );
    let params = tape.add(ph, pf);

    let mut total = tape.scalar(0.0);
    for (term, weight) in [
        (reproj, w.mesh_reproj),
        (vert, w.mesh_vert),
        (key, w.mesh_key),
        (params, w.mesh_params),
    ] {
        let s = tape.scale(term, weight);
        total = tape.add(total, s);
    }

    let breakdown = MeshLossBreakdown {
        reproj: tape.scalar_value(reproj),
        vert: tape.scalar_value(vert),
        key: tape.scalar_value(key),
        params: tape.scalar_value(params),
        total: tape.scalar_value(total),
    };
    Ok((total, breakdown))
}

/// Mesh loss restricted to what pseudo-labeled samples can supervise: the
/// reprojection term over all six predicted keypoint sets against the
/// noisy 2-D keypoints. The other terms are identically zero (absent from
/// the graph entirely, so their gradients vanish exactly).
pub fn compute_wild_mesh_loss(
    tape: &mut Tape,
    assets: &TrainAssets,
    face: &ParametricModel,
    hand: &ParametricModel,
    camera: &Camera,
    preds: &MeshPredictions,
    wild: &WildGt,
    w: &LossWeights,
) -> (Tensor, MeshLossBreakdown) {
    let kp = derived_keypoints(tape, assets, face, hand, preds);
    let hand_sets = [preds.rough_hand_keypoints, kp.hand_mesh, kp.hand_param];
    let face_sets = [preds.rough_face_keypoints, kp.face_mesh, kp.face_param];
    let rh = reprojection_sets(tape, camera, &hand_sets, &wild.hand_keypoints2d, w.reproj_hand);
    let rf = reprojection_sets(tape, camera, &face_sets, &wild.face_keypoints2d, w.reproj_face);
    let reproj = tape.add(rh, rf);
    let total = tape.scale(reproj, w.mesh_reproj);
    let breakdown = MeshLossBreakdown {
        reproj: tape.scalar_value(reproj),
        total: tape.scalar_value(total),
        ..MeshLossBreakdown::default()
    };
    (total, breakdown)
}

/// Predicted quantities entering the interaction loss, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct InteractionInputs {
    /// `[V_hand, 3]` posed parametric hand.
    pub hand_vertices: Tensor,
    /// `[V_face, 3]` posed parametric face before deformation.
    pub face_vertices: Tensor,
    /// `[V_face, 3]` predicted deformation field.
    pub deformation: Tensor,
    /// `[V_hand, 1]` predicted contact probabilities.
    pub contact_hand: Tensor,
    /// `[V_face, 1]` predicted contact probabilities.
    pub contact_face: Tensor,
}

/// Per-term values of one interaction loss evaluation, with the
/// degenerate-set flags of the touch and collision terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct InteractionLossBreakdown {
    pub touch: f64,
    pub contact: f64,
    pub collision: f64,
    pub deform: f64,
    pub total: f64,
    pub touch_empty: bool,
    pub collision_empty: bool,
}

/// Interaction loss `0.2·touch + 0.6·contact + collision + 6·deform`
/// under the configured weights, on the deformed predicted face surface.
///
/// Without an annotation (pseudo-labeled samples) only the touch and
/// collision terms — the self-supervised ones — enter the graph; contact
/// and deformation report zero and contribute no gradient.
pub fn compute_interaction_loss(
    tape: &mut Tape,
    inputs: &InteractionInputs,
    gt: Option<&InteractionAnnotation>,
    face_triangles: &[[usize; 3]],
    w: &LossWeights,
) -> Result<(Tensor, InteractionLossBreakdown)> {
    let deformed_face = tape.add(inputs.face_vertices, inputs.deformation);
    let hand_probs = tape.value(inputs.contact_hand).to_vec();
    let face_probs = tape.value(inputs.contact_face).to_vec();
    let (touch, touch_empty) = touch_loss_t(
        tape,
        inputs.hand_vertices,
        deformed_face,
        &hand_probs,
        &face_probs,
    );
    // Early in training the predicted face can be geometrically invalid
    // (self-inverted, no well-defined interior); penetration is then
    // undefined and the collision term degrades to the flagged zero it
    // uses for "nothing penetrates".
    let (collision, collision_empty) = match collision_loss_t(
        tape,
        inputs.hand_vertices,
        deformed_face,
        inputs.deformation,
        face_triangles,
    ) {
        Ok(pair) => pair,
        Err(Error::InvalidArgument(_)) | Err(Error::Numerical(_)) => (tape.scalar(0.0), true),
        Err(e) => return Err(e),
    };
    let (contact, deform) = match gt {
        Some(ann) => {
            let ch = contact_bce_t(tape, inputs.contact_hand, &ann.contact_label_hand)?;
            let cf = contact_bce_t(tape, inputs.contact_face, &ann.contact_label_face)?;
            let contact = tape.add(ch, cf);
            let deform = deformation_loss_t(
                tape,
                inputs.deformation,
                &ann.deformation.vectors,
                &DeformationLossOptions::default(),
            )?;
            (contact, deform)
        }
        None => (tape.scalar(0.0), tape.scalar(0.0)),
    };

    let mut total = tape.scalar(0.0);
    for (term, weight) in [
        (touch, w.inter_touch),
        (contact, w.inter_contact),
        (collision, w.inter_collision),
        (deform, w.inter_deform),
    ] {
        let s = tape.scale(term, weight);
        total = tape.add(total, s);
    }
    let breakdown = InteractionLossBreakdown {
        touch: tape.scalar_value(touch),
        contact: tape.scalar_value(contact),
        collision: tape.scalar_value(collision),
        deform: tape.scalar_value(deform),
        total: tape.scalar_value(total),
        touch_empty,
        collision_empty,
    };
    Ok((total, breakdown))
}

/// The three adversarial objectives on plain probability batches: the
/// generator minimizes `mean log(1 - D_F(fake)) + mean log(1 - D_H(fake))`
/// and each discriminator minimizes
/// `-mean log D(real) - mean log(1 - D(fake))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialLossValues {
    pub generator: f64,
    pub disc_hand: f64,
    pub disc_face: f64,
}

/// Reference (non-tape) evaluation of all three adversarial losses from
/// discriminator probability batches.
pub fn adversarial_losses(
    d_fake_hand: &[f64],
    d_fake_face: &[f64],
    d_real_hand: &[f64],
    d_real_face: &[f64],
) -> Result<AdversarialLossValues> {
    for (name, batch) in [
        ("fake hand", d_fake_hand),
        ("fake face", d_fake_face),
        ("real hand", d_real_hand),
        ("real face", d_real_face),
    ] {
        if batch.is_empty() {
            return Err(Error::invalid(format!(
                "adversarial losses need a nonempty {name} probability batch"
            )));
        }
    }
    let clamp = |p: f64| p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    let mean_log = |v: &[f64]| v.iter().map(|&p| clamp(p).ln()).sum::<f64>() / v.len() as f64;
    let mean_log1m =
        |v: &[f64]| v.iter().map(|&p| (1.0 - clamp(p)).ln()).sum::<f64>() / v.len() as f64;
    Ok(AdversarialLossValues {
        generator: mean_log1m(d_fake_face) + mean_log1m(d_fake_hand),
        disc_hand: -mean_log(d_real_hand) - mean_log1m(d_fake_hand),
        disc_face: -mean_log(d_real_face) - mean_log1m(d_fake_face),
    })
}

/// Generator-side adversarial term on the tape: the sum over
/// discriminators of `mean log(1 - D(fake))`, probabilities clamped
/// inside the logarithm. Minimizing drives the fakes toward scores of 1.
pub fn generator_adversarial_t(tape: &mut Tape, disc_fake_probs: &[Tensor]) -> Tensor {
    let mut total = tape.scalar(0.0);
    for &p in disc_fake_probs {
        let pc = tape.clamp(p, BCE_EPSILON, 1.0 - BCE_EPSILON);
        let neg = tape.neg(pc);
        let om = tape.add_scalar(neg, 1.0);
        let l = tape.log(om);
        let m = tape.mean_all(l);
        total = tape.add(total, m);
    }
    total
}

/// One discriminator's loss on the tape:
/// `-mean log D(real) - mean log(1 - D(fake))` over `[B, 1]` probability
/// columns. Errors on an empty batch on either side.
pub fn discriminator_loss_t(
    tape: &mut Tape,
    real_probs: Tensor,
    fake_probs: Tensor,
) -> Result<Tensor> {
    if tape.value(real_probs).is_empty() || tape.value(fake_probs).is_empty() {
        return Err(Error::invalid(
            "discriminator loss needs nonempty real and fake batches",
        ));
    }
    let rc = tape.clamp(real_probs, BCE_EPSILON, 1.0 - BCE_EPSILON);
    let lr = tape.log(rc);
    let mr = tape.mean_all(lr);
    let fc = tape.clamp(fake_probs, BCE_EPSILON, 1.0 - BCE_EPSILON);
    let nf = tape.neg(fc);
    let om = tape.add_scalar(nf, 1.0);
    let lf = tape.log(om);
    let mf = tape.mean_all(lf);
    let s = tape.add(mr, mf);
    Ok(tape.neg(s))
}

/// Geometry and targets for the rendered keypoint-depth loss.
#[derive(Debug, Clone, Copy)]
pub struct DepthLossInputs<'a> {
    /// `[V_hand, 3]` posed predicted hand.
    pub hand_vertices: Tensor,
    /// `[V_face, 3]` deformed predicted face.
    pub face_vertices: Tensor,
    pub hand_triangles: &'a [[usize; 3]],
    pub face_triangles: &'a [[usize; 3]],
    /// `K_h * 2` pixel positions at which to sample the rendered depth.
    pub hand_keypoints2d: &'a [f64],
    pub face_keypoints2d: &'a [f64],
    /// Target depths per keypoint (affine-corrupted pseudo depths or
    /// camera-space ground truth).
    pub hand_depths: &'a [f64],
    pub face_depths: &'a [f64],
    pub hand_valid: &'a [bool],
    pub face_valid: &'a [bool],
}

/// Scale-invariant log-depth loss between rendered predicted depths and
/// target keypoint depths: rasterizes the predicted meshes, samples the
/// depth map differentiably at the 2-D keypoints, and compares against
/// the targets jointly over hand and face (one shared scale ambiguity).
///
/// Returns the loss and the number of keypoints that were both valid and
/// covered by rendered geometry; fewer than two yields a constant zero.
pub fn keypoint_depth_loss_t(
    tape: &mut Tape,
    camera: &Camera,
    inputs: &DepthLossInputs<'_>,
) -> Result<(Tensor, usize)> {
    let hand_values = tape.value(inputs.hand_vertices).to_vec();
    let face_values = tape.value(inputs.face_vertices).to_vec();
    let meshes = [
        MeshRef { vertices: &hand_values, triangles: inputs.hand_triangles },
        MeshRef { vertices: &face_values, triangles: inputs.face_triangles },
    ];
    let (map, fragments) = rasterize_depth_fragments(camera, &meshes)?;
    let (_, hand_z) = project_t(tape, camera, inputs.hand_vertices);
    let (_, face_z) = project_t(tape, camera, inputs.face_vertices);
    let vertex_depths = [hand_z, face_z];
    let mut samples = sample_keypoint_depths_t(
        tape,
        &map,
        &fragments,
        &meshes,
        &vertex_depths,
        inputs.hand_keypoints2d,
    );
    samples.extend(sample_keypoint_depths_t(
        tape,
        &map,
        &fragments,
        &meshes,
        &vertex_depths,
        inputs.face_keypoints2d,
    ));
    let mut gt = inputs.hand_depths.to_vec();
    gt.extend_from_slice(inputs.face_depths);
    let mut valid = inputs.hand_valid.to_vec();
    valid.extend_from_slice(inputs.face_valid);
    Ok(silog_from_samples_t(tape, &samples, &gt, &valid))
}
