//! Synthetic sample generation: posed hand-on-face scenes with
//! self-consistent contact labels, surface deformations, cameras, image
//! proxies, and (for the weakly supervised split) corrupted
//! pseudo-ground-truth signals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camrender::{project, rasterize_depth, Camera, MeshRef};
use crate::interaction::{InteractionAnnotation, PointBvh};
use crate::meshcore::{
    apply_deformation, lbs_forward, regress_keypoints, rodrigues, DeformationField,
    ParametricModel, PoseState,
};
use crate::{Error, Result};

/// Side length of the square image proxy.
pub const IMAGE_SIZE: usize = 224;
/// Image channels: normalized depth, silhouette, contact heat.
pub const IMAGE_CHANNELS: usize = 3;

/// Dataset synthesis parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Base RNG seed; sample `i` uses `seed + i`.
    pub seed: u64,
    /// Scales every random pose/shape magnitude. Zero places the hand far
    /// from the face in a rest pose.
    pub pose_amplitude: f64,
    /// Contact label distance threshold (meters).
    pub contact_threshold: f64,
    /// Radius of the deformation neighborhood around touching geometry.
    pub deform_radius: f64,
    /// Baseline compliance of the face surface (fraction of penetration
    /// depth turned into displacement).
    pub stiffness_base: f64,
    /// Extra compliance on the front of the face (soft tissue) relative
    /// to the stiff cranial region.
    pub stiffness_front_gain: f64,
    /// Focal length range (pixels).
    pub focal_range: (f64, f64),
    /// Principal point jitter (pixels).
    pub center_jitter: f64,
    /// Pseudo-2D-keypoint noise sigma (pixels).
    pub wild_keypoint_sigma: f64,
    /// Global affine depth scale range for pseudo depths.
    pub wild_depth_scale_range: (f64, f64),
    /// Multiplicative log-normal noise sigma on pseudo depths.
    pub wild_depth_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            pose_amplitude: 1.0,
            contact_threshold: 0.004,
            deform_radius: 0.012,
            stiffness_base: 0.25,
            stiffness_front_gain: 0.75,
            focal_range: (280.0, 320.0),
            center_jitter: 4.0,
            wild_keypoint_sigma: 2.0,
            wild_depth_scale_range: (0.5, 2.0),
            wild_depth_sigma: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.contact_threshold > 0.0) {
            return Err(Error::invalid("contact_threshold must be positive"));
        }
        if self.pose_amplitude < 0.0
            || self.deform_radius < 0.0
            || self.wild_keypoint_sigma < 0.0
            || self.wild_depth_sigma < 0.0
            || self.center_jitter < 0.0
        {
            return Err(Error::invalid("noise and amplitude parameters must be nonnegative"));
        }
        if !(self.focal_range.0 > 0.0 && self.focal_range.1 >= self.focal_range.0) {
            return Err(Error::invalid("focal_range must be a positive, ordered interval"));
        }
        if !(self.wild_depth_scale_range.0 > 0.0
            && self.wild_depth_scale_range.1 >= self.wild_depth_scale_range.0)
        {
            return Err(Error::invalid("wild_depth_scale_range must be a positive, ordered interval"));
        }
        if self.stiffness_base < 0.0 || self.stiffness_front_gain < 0.0 {
            return Err(Error::invalid("stiffness profile must be nonnegative"));
        }
        Ok(())
    }
}

/// 2D keypoints with per-point validity (in front of the camera and
/// inside the image bounds).
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2d {
    /// `K*2` pixel coordinates.
    pub points: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Complete ground truth carried by labeled samples.
#[derive(Debug, Clone)]
pub struct LabeledGt {
    pub hand_state: PoseState,
    pub face_state: PoseState,
    /// Posed hand surface, `V_h*3`.
    pub hand_vertices: Vec<f64>,
    /// Posed face surface before deformation, `V_f*3`.
    pub face_vertices_undeformed: Vec<f64>,
    /// `21*3`, on the posed hand.
    pub hand_keypoints3d: Vec<f64>,
    /// `68*3`, on the deformed face surface.
    pub face_keypoints3d: Vec<f64>,
    pub hand_keypoints2d: Keypoints2d,
    pub face_keypoints2d: Keypoints2d,
    /// Contact labels/probabilities and the deformation field.
    pub annotation: InteractionAnnotation,
}

impl LabeledGt {
    /// Deformed (observed) face surface.
    pub fn face_vertices_deformed(&self) -> Result<Vec<f64>> {
        apply_deformation(&self.face_vertices_undeformed, &self.annotation.deformation)
    }
}

/// Pseudo ground truth carried by wild samples: noisy 2D keypoints and
/// affine-invariant keypoint depths. No 3D fields exist here by design.
#[derive(Debug, Clone)]
pub struct WildGt {
    pub hand_keypoints2d: Keypoints2d,
    pub face_keypoints2d: Keypoints2d,
    /// `21` per-keypoint depths, valid where the 2D keypoint is.
    pub hand_keypoint_depths: Vec<f64>,
    /// `68` per-keypoint depths.
    pub face_keypoint_depths: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Labeled,
    Wild,
}

/// One dataset element. Exactly one of `labeled` / `wild` is present.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `224*224*3` channel-last image proxy in `[0, 1]`.
    pub image: Vec<f64>,
    pub camera: Camera,
    pub labeled: Option<LabeledGt>,
    pub wild: Option<WildGt>,
}

impl Sample {
    pub fn kind(&self) -> SampleKind {
        if self.labeled.is_some() {
            SampleKind::Labeled
        } else {
            SampleKind::Wild
        }
    }

    /// Checks every structural invariant against the generating models.
    pub fn validate(&self, face: &ParametricModel, hand: &ParametricModel) -> Result<()> {
        if self.labeled.is_some() == self.wild.is_some() {
            return Err(Error::invalid("sample must be exactly one of labeled or wild"));
        }
        if self.image.len() != IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS {
            return Err(Error::shape("image proxy must be 224x224x3"));
        }
        if !self.image.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("image proxy contains non-finite values"));
        }
        self.camera.validate()?;
        let check_kp2 = |kp: &Keypoints2d, n: usize, what: &str| -> Result<()> {
            if kp.points.len() != n * 2 || kp.valid.len() != n {
                return Err(Error::shape(format!("{what}: expected {n} 2D keypoints")));
            }
            for (i, p) in kp.points.chunks_exact(2).enumerate() {
                if kp.valid[i]
                    && !(p[0].is_finite()
                        && p[1].is_finite()
                        && (0.0..=IMAGE_SIZE as f64).contains(&p[0])
                        && (0.0..=IMAGE_SIZE as f64).contains(&p[1]))
                {
                    return Err(Error::invalid(format!(
                        "{what}: keypoint {i} marked valid but outside image bounds"
                    )));
                }
            }
            Ok(())
        };
        if let Some(gt) = &self.labeled {
            if !gt.hand_state.matches(hand) || !gt.face_state.matches(face) {
                return Err(Error::shape("ground-truth states do not match the models"));
            }
            if !gt.hand_state.all_finite() || !gt.face_state.all_finite() {
                return Err(Error::invalid("ground-truth states contain non-finite values"));
            }
            if gt.hand_vertices.len() != hand.template.len()
                || gt.face_vertices_undeformed.len() != face.template.len()
            {
                return Err(Error::shape("ground-truth vertex cardinality mismatch"));
            }
            if gt.hand_keypoints3d.len() != hand.n_keypoints() * 3
                || gt.face_keypoints3d.len() != face.n_keypoints() * 3
            {
                return Err(Error::shape("ground-truth keypoint cardinality mismatch"));
            }
            check_kp2(&gt.hand_keypoints2d, hand.n_keypoints(), "hand 2D keypoints")?;
            check_kp2(&gt.face_keypoints2d, face.n_keypoints(), "face 2D keypoints")?;
            gt.annotation.validate(hand.n_vertices(), face.n_vertices())?;
            for d in gt.annotation.deformation.vectors.chunks_exact(3) {
                let m = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if m > 0.05 + 1e-9 {
                    return Err(Error::invalid(format!("deformation magnitude {m} exceeds 5 cm cap")));
                }
            }
        }
        if let Some(wild) = &self.wild {
            check_kp2(&wild.hand_keypoints2d, hand.n_keypoints(), "pseudo hand 2D keypoints")?;
            check_kp2(&wild.face_keypoints2d, face.n_keypoints(), "pseudo face 2D keypoints")?;
            if wild.hand_keypoint_depths.len() != hand.n_keypoints()
                || wild.face_keypoint_depths.len() != face.n_keypoints()
            {
                return Err(Error::shape("pseudo depth cardinality mismatch"));
            }
            let depths = wild
                .hand_keypoint_depths
                .iter()
                .zip(&wild.hand_keypoints2d.valid)
                .chain(wild.face_keypoint_depths.iter().zip(&wild.face_keypoints2d.valid));
            for (&z, &ok) in depths {
                if ok && !(z.is_finite() && z > 0.0) {
                    return Err(Error::invalid("valid pseudo depth must be finite and positive"));
                }
            }
        }
        Ok(())
    }
}

fn sample_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Standard normal via Box-Muller (deterministic given the stream).
fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
        }
    }
    out
}

fn mat3_apply(m: &[f64; 9], v: [f64; 3]) -> [f64; 3] {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

/// Rotation matrix back to an axis-angle vector (inverse of `rodrigues`
/// up to the 2-pi wrap).
pub fn axis_angle_from_rotation(m: &[f64; 9]) -> [f64; 3] {
    let tr = m[0] + m[4] + m[8];
    let cos = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
    let angle = cos.acos();
    if angle < 1e-12 {
        return [0.0, 0.0, 0.0];
    }
    if angle < std::f64::consts::PI - 1e-6 {
        let s = 2.0 * angle.sin();
        return [
            (m[7] - m[5]) / s * angle,
            (m[2] - m[6]) / s * angle,
            (m[3] - m[1]) / s * angle,
        ];
    }
    // Near pi: recover the axis from the symmetric part.
    let xx = ((m[0] + 1.0) / 2.0).max(0.0).sqrt();
    let yy = ((m[4] + 1.0) / 2.0).max(0.0).sqrt();
    let zz = ((m[8] + 1.0) / 2.0).max(0.0).sqrt();
    let mut axis = [xx, yy, zz];
    // Fix relative signs using the off-diagonal sums.
    if xx >= yy && xx >= zz {
        axis[1] = axis[1].copysign(m[1] + m[3]);
        axis[2] = axis[2].copysign(m[2] + m[6]);
    } else if yy >= zz {
        axis[0] = axis[0].copysign(m[1] + m[3]);
        axis[2] = axis[2].copysign(m[5] + m[7]);
    } else {
        axis[0] = axis[0].copysign(m[2] + m[6]);
        axis[1] = axis[1].copysign(m[5] + m[7]);
    }
    let axis = normalize3(axis);
    [axis[0] * angle, axis[1] * angle, axis[2] * angle]
}

fn mean_point(vertices: &[f64]) -> [f64; 3] {
    let n = (vertices.len() / 3) as f64;
    let mut c = [0.0; 3];
    for p in vertices.chunks_exact(3) {
        c[0] += p[0];
        c[1] += p[1];
        c[2] += p[2];
    }
    [c[0] / n, c[1] / n, c[2] / n]
}

fn project_keypoints(camera: &Camera, points3d: &[f64]) -> Keypoints2d {
    let proj = project(camera, points3d);
    let valid = proj
        .valid
        .iter()
        .zip(proj.pixels.chunks_exact(2))
        .map(|(&ok, p)| {
            ok && (0.0..=camera.width as f64).contains(&p[0])
                && (0.0..=camera.height as f64).contains(&p[1])
        })
        .collect();
    Keypoints2d { points: proj.pixels, valid }
}

fn random_face_state(face: &ParametricModel, amp: f64, rng: &mut ChaCha8Rng) -> PoseState {
    let mut s = PoseState::zero(face);
    for d in 0..3 {
        s.root_rotation[d] = amp * sample_range(rng, -0.25, 0.25);
    }
    s.root_translation = [
        amp * sample_range(rng, -0.03, 0.03),
        amp * sample_range(rng, -0.03, 0.03),
        0.6 + amp * sample_range(rng, -0.05, 0.05),
    ];
    for c in s.shape.iter_mut().chain(s.expression.iter_mut()) {
        *c = amp * sample_range(rng, -0.8, 0.8);
    }
    s
}

/// Finger curls plus the root transform placing the hand's leading
/// surface near (or into) the face along approach direction `dir`
/// (pointing from the face outward). `surface_dist` is the face support
/// distance along `dir` from `face_center`, so the closest approach
/// between the surfaces is the sampled standoff regardless of pose,
/// shape, or expression.
fn random_hand_state(
    hand: &ParametricModel,
    amp: f64,
    face_center: [f64; 3],
    dir: [f64; 3],
    surface_dist: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PoseState> {
    let mut s = PoseState::zero(hand);
    for k in 0..5 {
        let curls = [
            amp * sample_range(rng, 0.0, 0.9),
            amp * sample_range(rng, 0.0, 1.1),
            amp * sample_range(rng, 0.0, 0.7),
        ];
        for (j, &c) in curls.iter().enumerate() {
            let joint = 1 + 3 * k + j;
            s.joint_rotations[joint * 3] = c; // curl about +x
        }
        s.joint_rotations[(1 + 3 * k) * 3 + 2] = amp * sample_range(rng, -0.12, 0.12); // splay
    }
    for c in s.shape.iter_mut() {
        *c = amp * sample_range(rng, -0.8, 0.8);
    }

    // Surface standoff; amp = 0 parks the hand far away.
    let offset = if amp > 0.0 { sample_range(rng, -0.015, 0.02) } else { 0.10 };

    // Point the finger axis (+y) at the face, with a roll about it.
    let fingers_to = normalize3([-dir[0], -dir[1], -dir[2]]);
    let y = [0.0, 1.0, 0.0];
    let mut axis = cross3(y, fingers_to);
    let axis_len = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let angle = fingers_to[1].clamp(-1.0, 1.0).acos();
    if axis_len < 1e-9 {
        axis = [1.0, 0.0, 0.0];
    } else {
        axis = normalize3(axis);
    }
    let align = rodrigues(&[axis[0] * angle, axis[1] * angle, axis[2] * angle]);
    let roll = amp.min(1.0) * sample_range(rng, -std::f64::consts::PI, std::f64::consts::PI);
    let rot = mat3_mul(&align, &rodrigues(&[0.0, roll, 0.0]));
    s.root_rotation = axis_angle_from_rotation(&rot);

    // Pose once at the origin and find the support point along the
    // approach: the hand vertex that leads toward the face. Placing it at
    // the standoff target makes the closest-approach distance `offset`
    // regardless of curl, roll, or shape.
    let (posed, _) = lbs_forward(hand, &s)?;
    let mut support = [0.0; 3];
    let mut best = f64::NEG_INFINITY;
    for p in posed.chunks_exact(3) {
        let d = p[0] * fingers_to[0] + p[1] * fingers_to[1] + p[2] * fingers_to[2];
        if d > best {
            best = d;
            support = [p[0], p[1], p[2]];
        }
    }
    let reach = surface_dist + offset;
    let target = [
        face_center[0] + dir[0] * reach,
        face_center[1] + dir[1] * reach,
        face_center[2] + dir[2] * reach,
    ];
    s.root_translation = [
        target[0] - support[0],
        target[1] - support[1],
        target[2] - support[2],
    ];
    Ok(s)
}

/// Deformation of the face surface induced by nearby/penetrating hand
/// geometry: inward displacement proportional to penetration depth times
/// a per-vertex compliance, with a short-range proximity bulge, capped at
/// 5 cm and zero outside the contact neighborhood.
fn deformation_field(
    face_vertices: &[f64],
    face_center: [f64; 3],
    front_dir: [f64; 3],
    hand_vertices: &[f64],
    config: &SynthConfig,
) -> Result<DeformationField> {
    let bvh = PointBvh::build(hand_vertices)?;
    let mut d = DeformationField::zeros(face_vertices.len() / 3);
    for (i, p) in face_vertices.chunks_exact(3).enumerate() {
        let rel = [p[0] - face_center[0], p[1] - face_center[1], p[2] - face_center[2]];
        let r = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt().max(1e-9);
        let outward = [rel[0] / r, rel[1] / r, rel[2] / r];
        let (hi, dist) = bvh.nearest([p[0], p[1], p[2]]);
        if dist >= 2.0 * config.deform_radius {
            continue;
        }
        let h = &hand_vertices[hi * 3..hi * 3 + 3];
        let hr = ((h[0] - face_center[0]).powi(2)
            + (h[1] - face_center[1]).powi(2)
            + (h[2] - face_center[2]).powi(2))
        .sqrt();
        let penetration = (r - hr).max(0.0);
        let proximity = (config.deform_radius - dist).max(0.0);
        let frontness =
            (outward[0] * front_dir[0] + outward[1] * front_dir[1] + outward[2] * front_dir[2]).max(0.0);
        let compliance = config.stiffness_base + config.stiffness_front_gain * frontness;
        let mag = (compliance * (penetration + 0.5 * proximity)).min(0.05);
        if mag > 0.0 {
            d.vectors[i * 3] = -outward[0] * mag;
            d.vectors[i * 3 + 1] = -outward[1] * mag;
            d.vectors[i * 3 + 2] = -outward[2] * mag;
        }
    }
    Ok(d)
}

fn contact_labels(from_vertices: &[f64], to_vertices: &[f64], threshold: f64) -> Result<Vec<f64>> {
    let bvh = PointBvh::build(to_vertices)?;
    Ok(from_vertices
        .chunks_exact(3)
        .map(|p| {
            let (_, dist) = bvh.nearest([p[0], p[1], p[2]]);
            if dist <= threshold {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

/// Geometry-derived stand-in for an RGB image: normalized depth,
/// silhouette, and a contact-heat splat channel.
fn render_image_proxy(
    camera: &Camera,
    hand_vertices: &[f64],
    hand_faces: &[[usize; 3]],
    face_vertices: &[f64],
    face_faces: &[[usize; 3]],
    contact_points: &[[f64; 3]],
) -> Result<Vec<f64>> {
    let map = rasterize_depth(
        camera,
        &[
            MeshRef { vertices: hand_vertices, triangles: hand_faces },
            MeshRef { vertices: face_vertices, triangles: face_faces },
        ],
    )?;
    let (w, h) = (IMAGE_SIZE, IMAGE_SIZE);
    let mut image = vec![0.0; w * h * IMAGE_CHANNELS];
    for row in 0..h {
        for col in 0..w {
            let z = map.at(row, col);
            let base = (row * w + col) * IMAGE_CHANNELS;
            if z.is_finite() {
                image[base] = (1.5 - z).clamp(0.0, 1.0);
                image[base + 1] = 1.0;
            }
        }
    }
    const SIGMA: f64 = 2.0;
    const WINDOW: isize = 4;
    for p in contact_points {
        let (px, _, ok) = camera.project_point(*p);
        if !ok {
            continue;
        }
        let (cu, cv) = (px[0], px[1]);
        let (c0, r0) = (cu.floor() as isize, cv.floor() as isize);
        for dr in -WINDOW..=WINDOW {
            for dc in -WINDOW..=WINDOW {
                let (rr, cc) = (r0 + dr, c0 + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let du = cc as f64 + 0.5 - cu;
                let dv = rr as f64 + 0.5 - cv;
                let wgt = (-(du * du + dv * dv) / (2.0 * SIGMA * SIGMA)).exp();
                let idx = (rr as usize * w + cc as usize) * IMAGE_CHANNELS + 2;
                image[idx] = (image[idx] + wgt).min(1.0);
            }
        }
    }
    Ok(image)
}

/// Draws hand coefficients (joint rotations and shape) from the same
/// prior the synthesizer poses hands with, in discriminator layout:
/// packed parameters without the root transform.
pub fn prior_hand_coefficients(
    hand: &ParametricModel,
    amp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let state = random_hand_state(hand, amp, [0.0; 3], [0.0, 0.0, 1.0], 0.0, rng)?;
    Ok(state.pack()[6..].to_vec())
}

/// Face counterpart of [`prior_hand_coefficients`]: joint rotations,
/// shape and expression coefficients.
pub fn prior_face_coefficients(
    face: &ParametricModel,
    amp: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let state = random_face_state(face, amp, rng);
    state.pack()[6..].to_vec()
}

/// Generates one fully labeled sample. Retries degenerate placements
/// (geometry behind the camera) up to 100 times.
pub fn synth_sample(
    face: &ParametricModel,
    hand: &ParametricModel,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    config.validate()?;
    let amp = config.pose_amplitude;
    for _attempt in 0..100 {
        let f = sample_range(rng, config.focal_range.0, config.focal_range.1);
        let camera = Camera::pinhole(
            f,
            f,
            IMAGE_SIZE as f64 / 2.0 + sample_range(rng, -config.center_jitter, config.center_jitter),
            IMAGE_SIZE as f64 / 2.0 + sample_range(rng, -config.center_jitter, config.center_jitter),
            IMAGE_SIZE,
            IMAGE_SIZE,
        );

        let face_state = random_face_state(face, amp, rng);
        let (face_undeformed, _) = lbs_forward(face, &face_state)?;
        let face_center = mean_point(&face_undeformed);
        let front_dir = normalize3(mat3_apply(&rodrigues(&face_state.root_rotation), [0.0, 0.0, 1.0]));

        // Approach direction: from the face outward, biased toward the camera.
        let dir = normalize3([
            sample_range(rng, -0.8, 0.8),
            sample_range(rng, -0.8, 0.8),
            -sample_range(rng, 0.35, 1.0),
        ]);
        let surface_dist = face_undeformed
            .chunks_exact(3)
            .map(|p| {
                (p[0] - face_center[0]) * dir[0]
                    + (p[1] - face_center[1]) * dir[1]
                    + (p[2] - face_center[2]) * dir[2]
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let hand_state = random_hand_state(hand, amp, face_center, dir, surface_dist, rng)?;
        let (hand_vertices, _) = lbs_forward(hand, &hand_state)?;

        // Degenerate placement: geometry at or behind the camera plane.
        let min_z = hand_vertices
            .chunks_exact(3)
            .chain(face_undeformed.chunks_exact(3))
            .map(|p| p[2])
            .fold(f64::INFINITY, f64::min);
        if min_z < 0.05 {
            continue;
        }

        let deformation =
            deformation_field(&face_undeformed, face_center, front_dir, &hand_vertices, config)?;
        let face_deformed = apply_deformation(&face_undeformed, &deformation)?;

        let contact_label_hand = contact_labels(&hand_vertices, &face_deformed, config.contact_threshold)?;
        let contact_label_face = contact_labels(&face_deformed, &hand_vertices, config.contact_threshold)?;
        let annotation = InteractionAnnotation {
            contact_prob_hand: contact_label_hand.clone(),
            contact_prob_face: contact_label_face.clone(),
            contact_label_hand,
            contact_label_face,
            deformation,
        };

        let hand_keypoints3d = regress_keypoints(&hand_vertices, &hand.keypoint_regressor)?;
        let face_keypoints3d = regress_keypoints(&face_deformed, &face.keypoint_regressor)?;
        let hand_keypoints2d = project_keypoints(&camera, &hand_keypoints3d);
        let face_keypoints2d = project_keypoints(&camera, &face_keypoints3d);

        let contact_points: Vec<[f64; 3]> = annotation
            .contact_label_hand
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1.0)
            .map(|(i, _)| [hand_vertices[i * 3], hand_vertices[i * 3 + 1], hand_vertices[i * 3 + 2]])
            .chain(
                annotation
                    .contact_label_face
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == 1.0)
                    .map(|(i, _)| {
                        [face_deformed[i * 3], face_deformed[i * 3 + 1], face_deformed[i * 3 + 2]]
                    }),
            )
            .collect();
        let image = render_image_proxy(
            &camera,
            &hand_vertices,
            &hand.faces,
            &face_deformed,
            &face.faces,
            &contact_points,
        )?;

        let sample = Sample {
            image,
            camera,
            labeled: Some(LabeledGt {
                hand_state,
                face_state,
                hand_vertices,
                face_vertices_undeformed: face_undeformed,
                hand_keypoints3d,
                face_keypoints3d,
                hand_keypoints2d,
                face_keypoints2d,
                annotation,
            }),
            wild: None,
        };
        sample.validate(face, hand)?;
        return Ok(sample);
    }
    Err(Error::numerical("failed to place a visible scene in 100 attempts"))
}

/// Derives a weakly supervised sample from a labeled one: keeps the image
/// and camera, strips every 3D/contact/parameter field, and replaces the
/// supervision with noisy 2D keypoints and affine-invariant keypoint
/// depths (`a * z` with multiplicative noise).
pub fn make_wild_sample(
    labeled: &Sample,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let gt = labeled
        .labeled
        .as_ref()
        .ok_or_else(|| Error::invalid("wild samples derive from labeled samples"))?;
    let scale = sample_range(
        rng,
        config.wild_depth_scale_range.0,
        config.wild_depth_scale_range.1,
    );
    let mut corrupt_kp = |kp: &Keypoints2d| -> Keypoints2d {
        let points = kp
            .points
            .iter()
            .map(|&c| c + config.wild_keypoint_sigma * randn(rng))
            .collect();
        Keypoints2d { points, valid: kp.valid.clone() }
    };
    let hand_keypoints2d = corrupt_kp(&gt.hand_keypoints2d);
    let face_keypoints2d = corrupt_kp(&gt.face_keypoints2d);
    let mut corrupt_depths = |points3d: &[f64]| -> Vec<f64> {
        points3d
            .chunks_exact(3)
            .map(|p| {
                let z = labeled.camera.world_to_camera([p[0], p[1], p[2]])[2];
                scale * z * (config.wild_depth_sigma * randn(rng)).exp()
            })
            .collect()
    };
    let hand_keypoint_depths = corrupt_depths(&gt.hand_keypoints3d);
    let face_keypoint_depths = corrupt_depths(&gt.face_keypoints3d);
    Ok(Sample {
        image: labeled.image.clone(),
        camera: labeled.camera,
        labeled: None,
        wild: Some(WildGt {
            hand_keypoints2d,
            face_keypoints2d,
            hand_keypoint_depths,
            face_keypoint_depths,
        }),
    })
}

/// Synthesizes a reproducible mixed dataset: `n_labeled` labeled samples
/// followed by `n_wild` wild ones. Sample `i` always draws from its own
/// stream seeded `config.seed + i`, so datasets are bitwise reproducible
/// and samples could be generated in parallel.
pub fn synth_dataset(
    face: &ParametricModel,
    hand: &ParametricModel,
    config: &SynthConfig,
    n_labeled: usize,
    n_wild: usize,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(n_labeled + n_wild);
    for i in 0..n_labeled + n_wild {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64));
        let labeled = synth_sample(face, hand, config, &mut rng)?;
        if i < n_labeled {
            out.push(labeled);
        } else {
            out.push(make_wild_sample(&labeled, config, &mut rng)?);
        }
    }
    Ok(out)
}
