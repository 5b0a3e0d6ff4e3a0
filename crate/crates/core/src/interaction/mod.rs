//! Contact and penetration geometry between the hand and face surfaces,
//! plus the four interaction losses (touch, collision, contact
//! cross-entropy, deformation).
//!
//! Geometry runs in plain `f64` (winding numbers, BVH nearest-point
//! queries); each loss also has a tape counterpart (`*_t`) where the
//! discrete selections — nearest neighbors, contact masks, penetrating
//! sets — are made on current values and the loss is then assembled
//! differentiably through those fixed selections, which is exactly the
//! subgradient of the underlying min/threshold expressions away from
//! ties.

mod bvh;

pub use bvh::PointBvh;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::meshcore::DeformationField;

/// Probability clamp for the contact cross-entropy.
pub const BCE_EPSILON: f64 = 1e-7;
/// Predicted contact probabilities above this threshold select a vertex
/// into the touching subset.
pub const CONTACT_THRESHOLD: f64 = 0.5;

/// Per-sample interaction ground truth / prediction bundle: per-vertex
/// contact probabilities and binary labels for both meshes plus the face
/// deformation field.
#[derive(Debug, Clone)]
pub struct InteractionAnnotation {
    /// `[H]` in `[0, 1]`.
    pub contact_prob_hand: Vec<f64>,
    /// `[F]` in `[0, 1]`.
    pub contact_prob_face: Vec<f64>,
    /// `[H]`, each exactly 0.0 or 1.0.
    pub contact_label_hand: Vec<f64>,
    /// `[F]`, each exactly 0.0 or 1.0.
    pub contact_label_face: Vec<f64>,
    /// Face-resolution displacement field.
    pub deformation: DeformationField,
}

impl InteractionAnnotation {
    /// All-zero annotation for the given mesh cardinalities.
    pub fn zeros(hand_vertices: usize, face_vertices: usize) -> Self {
        InteractionAnnotation {
            contact_prob_hand: vec![0.0; hand_vertices],
            contact_prob_face: vec![0.0; face_vertices],
            contact_label_hand: vec![0.0; hand_vertices],
            contact_label_face: vec![0.0; face_vertices],
            deformation: DeformationField::zeros(face_vertices),
        }
    }

    /// Checks value ranges and that cardinalities match the active mesh
    /// resolutions.
    pub fn validate(&self, hand_vertices: usize, face_vertices: usize) -> Result<()> {
        if self.contact_prob_hand.len() != hand_vertices
            || self.contact_label_hand.len() != hand_vertices
        {
            return Err(Error::shape(format!(
                "hand contact arrays must have {hand_vertices} entries"
            )));
        }
        if self.contact_prob_face.len() != face_vertices
            || self.contact_label_face.len() != face_vertices
        {
            return Err(Error::shape(format!(
                "face contact arrays must have {face_vertices} entries"
            )));
        }
        if self.deformation.n_vertices() != face_vertices {
            return Err(Error::shape(format!(
                "deformation field must cover {face_vertices} face vertices"
            )));
        }
        for p in self.contact_prob_hand.iter().chain(&self.contact_prob_face) {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::invalid(format!("contact probability {p} outside [0, 1]")));
            }
        }
        for l in self.contact_label_hand.iter().chain(&self.contact_label_face) {
            if *l != 0.0 && *l != 1.0 {
                return Err(Error::invalid(format!("contact label {l} is not binary")));
            }
        }
        Ok(())
    }
}

/// Hand vertices found inside the face surface.
#[derive(Debug, Clone, Default)]
pub struct PenetrationReport {
    /// Penetrating hand-vertex indices, unique and ascending.
    pub indices: Vec<usize>,
    /// Penetration depth per reported vertex (meters, strictly positive):
    /// distance to the nearest face-mesh vertex.
    pub depths: Vec<f64>,
    /// The nearest face-surface point per reported vertex, `3 * len` flat.
    pub nearest_points: Vec<f64>,
}

impl PenetrationReport {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

/// A loss value plus a flag marking that a set the formula averages over
/// was empty (the value is then a defined 0 rather than an error).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlaggedLoss {
    pub value: f64,
    pub empty_set: bool,
}

impl FlaggedLoss {
    fn zero_empty() -> Self {
        FlaggedLoss {
            value: 0.0,
            empty_set: true,
        }
    }
}

// ---- winding numbers and mesh validation ----

/// Generalized winding number of `point` with respect to a triangle soup
/// (sum of signed solid angles over 4 pi). For a closed outward-oriented
/// surface this is ~1 inside and ~0 outside. Triangles seen exactly
/// edge-on contribute zero.
pub fn winding_number(point: [f64; 3], vertices: &[f64], triangles: &[[usize; 3]]) -> f64 {
    let mut total = 0.0;
    for t in triangles {
        let mut v = [[0.0f64; 3]; 3];
        for (k, &vi) in t.iter().enumerate() {
            v[k] = [
                vertices[vi * 3] - point[0],
                vertices[vi * 3 + 1] - point[1],
                vertices[vi * 3 + 2] - point[2],
            ];
        }
        let [a, b, c] = v;
        let la = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        let lb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
        let lc = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        let det = a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0]);
        if det == 0.0 {
            continue; // coplanar with the query point: zero solid angle
        }
        let dot_ab = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let dot_bc = b[0] * c[0] + b[1] * c[1] + b[2] * c[2];
        let dot_ca = c[0] * a[0] + c[1] * a[1] + c[2] * a[2];
        let denom = la * lb * lc + dot_ab * lc + dot_bc * la + dot_ca * lb;
        total += 2.0 * det.atan2(denom);
    }
    total / (4.0 * std::f64::consts::PI)
}

/// Verifies the triangle mesh is closed and consistently oriented: no
/// degenerate triangles, every undirected edge shared by exactly two
/// triangles in opposite directions, and positive enclosed volume.
pub fn validate_closed_mesh(n_vertices: usize, triangles: &[[usize; 3]], vertices: &[f64]) -> Result<()> {
    use std::collections::HashMap;
    if triangles.is_empty() {
        return Err(Error::invalid("mesh has no triangles"));
    }
    let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
    for (i, t) in triangles.iter().enumerate() {
        if t[0] == t[1] || t[1] == t[2] || t[2] == t[0] {
            return Err(Error::invalid(format!(
                "degenerate triangle {i} repeats a vertex: {t:?}"
            )));
        }
        for &vi in t {
            if vi >= n_vertices {
                return Err(Error::invalid(format!(
                    "triangle {i} references vertex {vi} >= {n_vertices}"
                )));
            }
        }
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            let count = directed.entry((a, b)).or_insert(0);
            *count += 1;
            if *count > 1 {
                return Err(Error::invalid(format!(
                    "inconsistent orientation: directed edge ({a}, {b}) appears twice"
                )));
            }
        }
    }
    for (&(a, b), _) in &directed {
        if !directed.contains_key(&(b, a)) {
            return Err(Error::invalid(format!(
                "mesh is not closed: boundary edge ({a}, {b}) has no opposite"
            )));
        }
    }
    let vol = crate::data::geometry::signed_volume(vertices, triangles);
    if vol <= 0.0 {
        return Err(Error::invalid(format!(
            "mesh encloses non-positive volume {vol}: triangles are inward-oriented"
        )));
    }
    Ok(())
}

/// Finds hand vertices strictly inside the face surface (generalized
/// winding number > 0.5). Depths and nearest points are measured to the
/// nearest face-mesh vertex.
pub fn detect_penetration(
    hand_vertices: &[f64],
    face_vertices: &[f64],
    face_triangles: &[[usize; 3]],
) -> Result<PenetrationReport> {
    if hand_vertices.len() % 3 != 0 || face_vertices.len() % 3 != 0 {
        return Err(Error::shape("vertex arrays must be flat N x 3"));
    }
    if !hand_vertices.iter().chain(face_vertices).all(|x| x.is_finite()) {
        return Err(Error::numerical("non-finite vertex coordinates"));
    }
    validate_closed_mesh(face_vertices.len() / 3, face_triangles, face_vertices)?;
    let bvh = PointBvh::build(face_vertices)?;
    let mut report = PenetrationReport::default();
    for (i, p) in hand_vertices.chunks_exact(3).enumerate() {
        let q = [p[0], p[1], p[2]];
        let w = winding_number(q, face_vertices, face_triangles);
        if w > 0.5 {
            let (j, dist) = bvh.nearest(q);
            if dist > 0.0 {
                report.indices.push(i);
                report.depths.push(dist);
                report
                    .nearest_points
                    .extend_from_slice(&face_vertices[j * 3..j * 3 + 3]);
            }
        }
    }
    Ok(report)
}

// ---- directed Chamfer distance ----

/// Mean distance from each point of `a` to its nearest point in `b`
/// (unsquared). Exact BVH acceleration; ties resolve to the lowest index.
/// Either set empty yields a defined 0 with the `empty_set` flag.
pub fn chamfer_directed(a: &[f64], b: &[f64]) -> FlaggedLoss {
    if a.is_empty() || b.is_empty() {
        return FlaggedLoss::zero_empty();
    }
    let bvh = PointBvh::build(b).expect("finite nonempty point set");
    let n = a.len() / 3;
    let mut sum = 0.0;
    for p in a.chunks_exact(3) {
        sum += bvh.nearest([p[0], p[1], p[2]]).1;
    }
    FlaggedLoss {
        value: sum / n as f64,
        empty_set: false,
    }
}

/// Tape version of [`chamfer_directed`]: nearest indices are chosen on
/// current values, then the mean distance is built differentiably through
/// those pairs (gradients flow into both point sets).
pub fn chamfer_directed_t(tape: &mut Tape, a: Tensor, b: Tensor) -> (Tensor, bool) {
    let sa = tape.shape(a).to_vec();
    let sb = tape.shape(b).to_vec();
    assert_eq!(sa.len(), 2, "chamfer operands must be [N, 3]");
    assert_eq!(sa[1], 3, "chamfer operands must be [N, 3]");
    assert_eq!(sb.get(1), Some(&3), "chamfer operands must be [N, 3]");
    if sa[0] == 0 || sb[0] == 0 {
        return (tape.scalar(0.0), true);
    }
    let bvh = PointBvh::build(tape.value(b)).expect("finite nonempty point set");
    let idx: Vec<usize> = tape
        .value(a)
        .chunks_exact(3)
        .map(|p| bvh.nearest([p[0], p[1], p[2]]).0)
        .collect();
    let sel = tape.gather_rows(b, &idx);
    let diff = tape.sub(a, sel);
    let dists = tape.l2_norm_rows(diff);
    (tape.mean_all(dists), false)
}

// ---- the four interaction losses ----

/// Indices of entries strictly above the contact threshold.
pub fn contact_subset(probs: &[f64]) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > CONTACT_THRESHOLD)
        .map(|(i, _)| i)
        .collect()
}

fn gather_points(vertices: &[f64], idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * 3);
    for &i in idx {
        out.extend_from_slice(&vertices[i * 3..i * 3 + 3]);
    }
    out
}

/// Touch loss: symmetric Chamfer between the predicted-contact vertex
/// subsets of the two meshes. Zero with a flag when either subset is
/// empty.
pub fn touch_loss(
    annotation: &InteractionAnnotation,
    hand_vertices: &[f64],
    face_vertices: &[f64],
) -> Result<FlaggedLoss> {
    annotation.validate(hand_vertices.len() / 3, face_vertices.len() / 3)?;
    let hs = contact_subset(&annotation.contact_prob_hand);
    let fs = contact_subset(&annotation.contact_prob_face);
    if hs.is_empty() || fs.is_empty() {
        return Ok(FlaggedLoss::zero_empty());
    }
    let hc = gather_points(hand_vertices, &hs);
    let fc = gather_points(face_vertices, &fs);
    let fwd = chamfer_directed(&fc, &hc);
    let bwd = chamfer_directed(&hc, &fc);
    Ok(FlaggedLoss {
        value: fwd.value + bwd.value,
        empty_set: false,
    })
}

/// Tape version of [`touch_loss`]. Contact subsets come from the plain
/// probability slices (selection is not differentiated).
pub fn touch_loss_t(
    tape: &mut Tape,
    hand_vertices: Tensor,
    face_vertices: Tensor,
    hand_probs: &[f64],
    face_probs: &[f64],
) -> (Tensor, bool) {
    let hs = contact_subset(hand_probs);
    let fs = contact_subset(face_probs);
    if hs.is_empty() || fs.is_empty() {
        return (tape.scalar(0.0), true);
    }
    let hc = tape.gather_rows(hand_vertices, &hs);
    let fc = tape.gather_rows(face_vertices, &fs);
    let (fwd, _) = chamfer_directed_t(tape, fc, hc);
    let (bwd, _) = chamfer_directed_t(tape, hc, fc);
    (tape.add(fwd, bwd), false)
}

/// Collision loss: directed Chamfer from hand vertices penetrating the
/// (deformed) face surface to the vertex set of the undeformed face
/// `V_f - d`. Zero with a flag when nothing penetrates.
pub fn collision_loss(
    hand_vertices: &[f64],
    face_vertices: &[f64],
    deformation: &DeformationField,
    face_triangles: &[[usize; 3]],
) -> Result<FlaggedLoss> {
    if face_vertices.len() != deformation.vectors.len() {
        return Err(Error::shape("deformation field must match face vertex count"));
    }
    let report = detect_penetration(hand_vertices, face_vertices, face_triangles)?;
    if report.is_empty() {
        return Ok(FlaggedLoss::zero_empty());
    }
    let pen = gather_points(hand_vertices, &report.indices);
    let undeformed: Vec<f64> = face_vertices
        .iter()
        .zip(&deformation.vectors)
        .map(|(&v, &d)| v - d)
        .collect();
    let cd = chamfer_directed(&pen, &undeformed);
    Ok(FlaggedLoss {
        value: cd.value,
        empty_set: false,
    })
}

/// Tape version of [`collision_loss`]: penetration is detected on current
/// values; the Chamfer target `V_f - d` stays differentiable in both the
/// face vertices and the deformation field.
pub fn collision_loss_t(
    tape: &mut Tape,
    hand_vertices: Tensor,
    face_vertices: Tensor,
    deformation: Tensor,
    face_triangles: &[[usize; 3]],
) -> Result<(Tensor, bool)> {
    let report = detect_penetration(
        tape.value(hand_vertices),
        tape.value(face_vertices),
        face_triangles,
    )?;
    if report.is_empty() {
        return Ok((tape.scalar(0.0), true));
    }
    let pen = tape.gather_rows(hand_vertices, &report.indices);
    let target = tape.sub(face_vertices, deformation);
    let (cd, _) = chamfer_directed_t(tape, pen, target);
    Ok((cd, false))
}

/// Mean binary cross-entropy of `probs` against binary `labels`, with
/// probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn contact_bce(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape(format!(
            "probs ({}) and labels ({}) must be nonempty equal-length arrays",
            probs.len(),
            labels.len()
        )));
    }
    let mut sum = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        if y != 0.0 && y != 1.0 {
            return Err(Error::invalid(format!("contact label {y} is not binary")));
        }
        let pc = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        sum -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    Ok(sum / probs.len() as f64)
}

/// Hand + face contact cross-entropy.
pub fn contact_bce_pair(
    hand_probs: &[f64],
    hand_labels: &[f64],
    face_probs: &[f64],
    face_labels: &[f64],
) -> Result<f64> {
    Ok(contact_bce(hand_probs, hand_labels)? + contact_bce(face_probs, face_labels)?)
}

/// Tape version of [`contact_bce`]. `probs` is a `[N]` tensor; labels are
/// plain constants.
pub fn contact_bce_t(tape: &mut Tape, probs: Tensor, labels: &[f64]) -> Result<Tensor> {
    let n = tape.value(probs).len();
    if n != labels.len() || n == 0 {
        return Err(Error::shape(format!(
            "probs ({n}) and labels ({}) must be nonempty equal-length arrays",
            labels.len()
        )));
    }
    for &y in labels {
        if y != 0.0 && y != 1.0 {
            return Err(Error::invalid(format!("contact label {y} is not binary")));
        }
    }
    let shape = tape.shape(probs).to_vec();
    let pc = tape.clamp(probs, BCE_EPSILON, 1.0 - BCE_EPSILON);
    let log_p = tape.log(pc);
    let neg_pc = tape.neg(pc);
    let one_minus = tape.add_scalar(neg_pc, 1.0);
    let log_q = tape.log(one_minus);
    let y = tape.constant(&shape, labels.to_vec());
    let y_inv = tape.constant(&shape, labels.iter().map(|&v| 1.0 - v).collect());
    let pos = tape.mul(y, log_p);
    let negt = tape.mul(y_inv, log_q);
    let s = tape.add(pos, negt);
    let mean = tape.mean_all(s);
    Ok(tape.neg(mean))
}

// ---- deformation loss ----

/// Which field's magnitudes select the large-deformation set `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LargeSetMembership {
    /// Default: `L = { i : |pred_i| > threshold }`.
    Predicted,
    /// Alternative: membership from the ground-truth field.
    GroundTruth,
}

/// Constants of the deformation loss; defaults: adaptive weight 5000,
/// large-deformation penalty 100, threshold 3 cm, predicted membership.
#[derive(Debug, Clone, Copy)]
pub struct DeformationLossOptions {
    pub adaptive_weight: f64,
    pub large_penalty: f64,
    pub large_threshold: f64,
    pub membership: LargeSetMembership,
}

impl Default for DeformationLossOptions {
    fn default() -> Self {
        DeformationLossOptions {
            adaptive_weight: 5000.0,
            large_penalty: 100.0,
            large_threshold: 0.03,
            membership: LargeSetMembership::Predicted,
        }
    }
}

fn row_norms(field: &[f64]) -> Vec<f64> {
    field
        .chunks_exact(3)
        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
        .collect()
}

/// Deformation loss with explicit constants:
/// `sum_i (1 + mu |gt_i|) |pred_i - gt_i|^2  +  lambda * sum_{i in L} |pred_i|`
/// where by default `L = { i : |pred_i| > threshold }`.
pub fn deformation_loss_with(
    pred: &DeformationField,
    gt: &DeformationField,
    opts: &DeformationLossOptions,
) -> Result<f64> {
    if pred.vectors.len() != gt.vectors.len() {
        return Err(Error::shape(format!(
            "deformation fields differ in cardinality: {} vs {}",
            pred.n_vertices(),
            gt.n_vertices()
        )));
    }
    let gt_norms = row_norms(&gt.vectors);
    let pred_norms = row_norms(&pred.vectors);
    let mut main = 0.0;
    for i in 0..gt_norms.len() {
        let mut e2 = 0.0;
        for d in 0..3 {
            let e = pred.vectors[i * 3 + d] - gt.vectors[i * 3 + d];
            e2 += e * e;
        }
        main += (1.0 + opts.adaptive_weight * gt_norms[i]) * e2;
    }
    let member = match opts.membership {
        LargeSetMembership::Predicted => &pred_norms,
        LargeSetMembership::GroundTruth => &gt_norms,
    };
    let mut reg = 0.0;
    for (i, &m) in member.iter().enumerate() {
        if m > opts.large_threshold {
            reg += pred_norms[i];
        }
    }
    Ok(main + opts.large_penalty * reg)
}

/// [`deformation_loss_with`] under the default constants.
pub fn deformation_loss(pred: &DeformationField, gt: &DeformationField) -> Result<f64> {
    deformation_loss_with(pred, gt, &DeformationLossOptions::default())
}

/// Tape version: `pred` is a `[V, 3]` tensor, ground truth is constant.
/// Set membership is fixed from current values (exact subgradient away
/// from the threshold).
pub fn deformation_loss_t(
    tape: &mut Tape,
    pred: Tensor,
    gt: &[f64],
    opts: &DeformationLossOptions,
) -> Result<Tensor> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 2 || shape[1] != 3 || shape[0] * 3 != gt.len() {
        return Err(Error::shape(format!(
            "predicted field {shape:?} must be [V, 3] matching ground truth of {} values",
            gt.len()
        )));
    }
    let v = shape[0];
    let gt_norms = row_norms(gt);
    let weights: Vec<f64> = gt_norms.iter().map(|&n| 1.0 + opts.adaptive_weight * n).collect();
    let gt_t = tape.constant(&[v, 3], gt.to_vec());
    let diff = tape.sub(pred, gt_t);
    let sq = tape.mul(diff, diff);
    let row_sq = tape.sum_last(sq);
    let w = tape.constant(&[v], weights);
    let weighted = tape.mul(row_sq, w);
    let mut total = tape.sum_all(weighted);
    let member_norms = match opts.membership {
        LargeSetMembership::Predicted => row_norms(tape.value(pred)),
        LargeSetMembership::GroundTruth => gt_norms,
    };
    let sel: Vec<usize> = member_norms
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > opts.large_threshold)
        .map(|(i, _)| i)
        .collect();
    if !sel.is_empty() {
        let rows = tape.gather_rows(pred, &sel);
        let norms = tape.l2_norm_rows(rows);
        let s = tape.sum_all(norms);
        let scaled = tape.scale(s, opts.large_penalty);
        total = tape.add(total, scaled);
    }
    Ok(total)
}
