//! Procedural parametric assets: an articulated hand and a blendshape
//! head, each at two resolutions (toy and full). Both are closed,
//! consistently oriented multi-component meshes with joint regressors,
//! one-hot skinning, smooth analytic blendshape bases, keypoint
//! regressors, and row-stochastic resolution-sampling matrices.

use super::geometry::{box_mesh, icosphere, signed_volume, split_edges, subdivide_mesh};
use crate::meshcore::{MatrixF64, ParametricModel, SamplingMatrix};

// ---- hand layout (meters) ----

const PALM_HALF_X: f64 = 0.04;
const PALM_HALF_Y: f64 = 0.04;
const PALM_HALF_Z: f64 = 0.01;
const FINGER_HALF_W: f64 = 0.006;
const SEG_HALF_LEN: f64 = 0.0125;
const SEG0_CENTER_Y: f64 = 0.0545; // spans [0.042, 0.067]
const SEG1_CENTER_Y: f64 = 0.0815; // spans [0.069, 0.094]
const TIP_CENTER_Y: f64 = 0.107; // box spans [0.096, 0.118]
const TIP_HALF_LEN: f64 = 0.011;
const TIP_APEX_Y: f64 = 0.123;

const FACE_RADIUS: f64 = 0.09;

/// Toy-hand vertex/triangle counts: palm plate 70/136, ten finger
/// segments 8/12 each, five capped tips 9/14 each.
pub const TOY_HAND_VERTICES: usize = 195;
pub const TOY_HAND_TRIANGLES: usize = 326;
pub const FULL_HAND_VERTICES: usize = 778;
pub const TOY_FACE_VERTICES: usize = 642;
pub const FULL_FACE_VERTICES: usize = 5023;
pub const HAND_JOINTS: usize = 16;
pub const HAND_KEYPOINTS: usize = 21;
pub const FACE_KEYPOINTS: usize = 68;
pub const HAND_SHAPE_DIM: usize = 5;
pub const FACE_SHAPE_DIM: usize = 5;
pub const FACE_EXPRESSION_DIM: usize = 5;

fn finger_x(k: usize) -> f64 {
    -0.032 + 0.016 * k as f64
}

/// Closed rectangular plate: two 5x7 vertex grids joined by a rim.
fn palm_plate() -> (Vec<f64>, Vec<[usize; 3]>) {
    const NX: usize = 5;
    const NY: usize = 7;
    let coord = |i: usize, n: usize, half: f64| -half + 2.0 * half * i as f64 / (n - 1) as f64;
    let mut verts = Vec::with_capacity(2 * NX * NY * 3);
    for &z in &[PALM_HALF_Z, -PALM_HALF_Z] {
        for iy in 0..NY {
            for ix in 0..NX {
                verts.push(coord(ix, NX, PALM_HALF_X));
                verts.push(coord(iy, NY, PALM_HALF_Y));
                verts.push(z);
            }
        }
    }
    let top = |ix: usize, iy: usize| iy * NX + ix;
    let bot = |ix: usize, iy: usize| NX * NY + iy * NX + ix;
    let mut tris = Vec::with_capacity(136);
    for iy in 0..NY - 1 {
        for ix in 0..NX - 1 {
            let (a, b, c, d) = (top(ix, iy), top(ix + 1, iy), top(ix + 1, iy + 1), top(ix, iy + 1));
            tris.push([a, b, c]);
            tris.push([a, c, d]);
            let (a, b, c, d) = (bot(ix, iy), bot(ix + 1, iy), bot(ix + 1, iy + 1), bot(ix, iy + 1));
            tris.push([a, c, b]);
            tris.push([a, d, c]);
        }
    }
    // Boundary loop counter-clockwise seen from +z; rim quads face outward.
    let mut boundary = Vec::with_capacity(2 * (NX + NY) - 4);
    for ix in 0..NX - 1 {
        boundary.push((ix, 0));
    }
    for iy in 0..NY - 1 {
        boundary.push((NX - 1, iy));
    }
    for ix in (1..NX).rev() {
        boundary.push((ix, NY - 1));
    }
    for iy in (1..NY).rev() {
        boundary.push((0, iy));
    }
    for w in 0..boundary.len() {
        let (px, py) = boundary[w];
        let (qx, qy) = boundary[(w + 1) % boundary.len()];
        let (tp, tq) = (top(px, py), top(qx, qy));
        let (bp, bq) = (bot(px, py), bot(qx, qy));
        tris.push([tp, bp, bq]);
        tris.push([tp, bq, tq]);
    }
    (verts, tris)
}

/// Finger-tip segment: a box whose distal (+y) face is replaced by a
/// four-triangle fan to an apex vertex.
fn tip_box(center: [f64; 3], half: [f64; 3], apex_y: f64) -> (Vec<f64>, Vec<[usize; 3]>) {
    let (mut verts, tris) = box_mesh(center, half);
    // +y face corners are the box indices with bit 1 set: {2, 3, 6, 7}.
    let mut tris: Vec<[usize; 3]> = tris
        .into_iter()
        .filter(|t| !t.iter().all(|&i| matches!(i, 2 | 3 | 6 | 7)))
        .collect();
    verts.extend_from_slice(&[center[0], apex_y, center[2]]);
    let apex = 8;
    let rim = [2usize, 6, 7, 3]; // counter-clockwise seen from outside (+y)
    for w in 0..4 {
        tris.push([rim[w], rim[(w + 1) % 4], apex]);
    }
    (verts, tris)
}

fn append_mesh(
    verts: &mut Vec<f64>,
    tris: &mut Vec<[usize; 3]>,
    part: (Vec<f64>, Vec<[usize; 3]>),
) -> usize {
    let base = verts.len() / 3;
    verts.extend(part.0);
    tris.extend(part.1.into_iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
    base
}

/// Joint index a vertex at `p` is rigidly bound to, decided by position
/// (works identically for the base mesh and its refinements, because all
/// inserted vertices stay inside their component's y-band).
fn hand_bound_joint(p: &[f64]) -> usize {
    let (x, y) = (p[0], p[1]);
    if y < 0.041 {
        return 0; // palm -> wrist
    }
    let k = (((x + 0.032) / 0.016).round() as isize).clamp(0, 4) as usize;
    if y < 0.068 {
        1 + 3 * k // proximal segment -> knuckle joint
    } else if y < 0.095 {
        2 + 3 * k // middle segment -> mid joint
    } else {
        3 + 3 * k // tip -> distal joint
    }
}

/// Smooth per-vertex shape displacement fields for the hand: overall
/// scale, finger length, palm width, thickness, finger splay.
fn hand_shape_fields(p: &[f64]) -> [[f64; 3]; HAND_SHAPE_DIM] {
    let (x, y, z) = (p[0], p[1], p[2]);
    let along = ((y - 0.03) / 0.09).clamp(0.0, 1.0); // 0 on palm, 1 at tips
    [
        [0.08 * x, 0.08 * y, 0.08 * z],
        [0.0, 0.12 * (y - 0.03).max(0.0), 0.0],
        [0.10 * x * (1.0 - along), 0.0, 0.0],
        [0.0, 0.0, 0.30 * z],
        [0.10 * x * along, 0.0, 0.0],
    ]
}

/// Evenly spread selection of `to` source indices out of `from`.
fn stride_indices(from: usize, to: usize) -> Vec<usize> {
    assert!(to <= from);
    (0..to).map(|i| i * from / to).collect()
}

fn selector_matrix(indices: &[usize], from: usize) -> SamplingMatrix {
    let mut m = MatrixF64::zeros(indices.len(), from);
    for (r, &i) in indices.iter().enumerate() {
        m.data[r * from + i] = 1.0;
    }
    SamplingMatrix { from, to: indices.len(), matrix: m }
}

fn basis_from_fields<const K: usize>(
    template: &[f64],
    fields: impl Fn(&[f64]) -> [[f64; 3]; K],
) -> MatrixF64 {
    let v = template.len() / 3;
    let mut m = MatrixF64::zeros(K, 3 * v);
    for (vi, p) in template.chunks_exact(3).enumerate() {
        let f = fields(p);
        for (s, row) in f.iter().enumerate() {
            m.data[s * 3 * v + vi * 3..s * 3 * v + vi * 3 + 3].copy_from_slice(row);
        }
    }
    m
}

fn build_hand(full: bool) -> ParametricModel {
    let mut verts = Vec::new();
    let mut tris = Vec::new();
    append_mesh(&mut verts, &mut tris, palm_plate());
    let mut finger_bases = Vec::new();
    for k in 0..5 {
        let x = finger_x(k);
        let half = [FINGER_HALF_W, SEG_HALF_LEN, FINGER_HALF_W];
        let base = append_mesh(&mut verts, &mut tris, box_mesh([x, SEG0_CENTER_Y, 0.0], half));
        append_mesh(&mut verts, &mut tris, box_mesh([x, SEG1_CENTER_Y, 0.0], half));
        append_mesh(
            &mut verts,
            &mut tris,
            tip_box([x, TIP_CENTER_Y, 0.0], [FINGER_HALF_W, TIP_HALF_LEN, FINGER_HALF_W], TIP_APEX_Y),
        );
        finger_bases.push(base);
    }
    debug_assert_eq!(verts.len() / 3, TOY_HAND_VERTICES);
    debug_assert_eq!(tris.len(), TOY_HAND_TRIANGLES);

    if full {
        let (v2, t2) = subdivide_mesh(&verts, &tris);
        let (v3, t3) = split_edges(&v2, &t2, FULL_HAND_VERTICES - v2.len() / 3);
        verts = v3;
        tris = t3;
        debug_assert_eq!(verts.len() / 3, FULL_HAND_VERTICES);
    }
    let v = verts.len() / 3;

    // Joints: 0 = wrist at the palm base edge; per finger k the knuckle,
    // mid, and distal joints regress from the proximal face corners of the
    // matching segment. All referenced vertices live in the base mesh
    // prefix, so the same rows serve both resolutions.
    let mut joint_regressor = MatrixF64::zeros(HAND_JOINTS, v);
    for ix in 0..5 {
        joint_regressor.data[ix] = 0.1; // top grid row at y = -PALM_HALF_Y
        joint_regressor.data[35 + ix] = 0.1; // bottom grid row
    }
    // Proximal (-y) corners of a box are local indices {0, 1, 4, 5}.
    let proximal = [0usize, 1, 4, 5];
    for k in 0..5 {
        let base = finger_bases[k];
        for (seg, joint) in [(0usize, 1 + 3 * k), (8, 2 + 3 * k), (16, 3 + 3 * k)] {
            for &c in &proximal {
                joint_regressor.data[joint * v + base + seg + c] = 0.25;
            }
        }
    }
    let mut parents = vec![None; HAND_JOINTS];
    for k in 0..5 {
        parents[1 + 3 * k] = Some(0);
        parents[2 + 3 * k] = Some(1 + 3 * k);
        parents[3 + 3 * k] = Some(2 + 3 * k);
    }

    let mut skin = MatrixF64::zeros(v, HAND_JOINTS);
    for (vi, p) in verts.chunks_exact(3).enumerate() {
        skin.data[vi * HAND_JOINTS + hand_bound_joint(p)] = 1.0;
    }

    // Keypoints: wrist, then knuckle/mid/distal/tip per finger (21).
    let mut keypoint_regressor = MatrixF64::zeros(HAND_KEYPOINTS, v);
    keypoint_regressor.data[..v].copy_from_slice(joint_regressor.row(0));
    for k in 0..5 {
        for j in 0..3 {
            let row = 1 + 4 * k + j;
            let joint = 1 + 3 * k + j;
            keypoint_regressor.data[row * v..(row + 1) * v]
                .copy_from_slice(joint_regressor.row(joint));
        }
        let apex = finger_bases[k] + 16 + 8;
        keypoint_regressor.data[(4 + 4 * k) * v + apex] = 1.0;
    }

    let sampling = if full {
        vec![selector_matrix(&(0..TOY_HAND_VERTICES).collect::<Vec<_>>(), v)]
    } else {
        vec![selector_matrix(&stride_indices(v, 49), v)]
    };

    let model = ParametricModel {
        name: if full { "full_hand".into() } else { "toy_hand".into() },
        shape_basis: basis_from_fields(&verts, hand_shape_fields),
        expression_basis: MatrixF64::zeros(0, 3 * v),
        template: verts,
        faces: tris,
        joint_regressor,
        parents,
        skin_weights: skin,
        keypoint_regressor,
        sampling,
    };
    debug_assert!(model.validate().is_ok());
    model
}

/// Smooth radial displacement field on the head sphere.
fn face_field(p: &[f64], freq: f64, dir: [f64; 3], phase: f64, amp: f64, front_only: bool) -> [f64; 3] {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-12);
    let u = [p[0] / r, p[1] / r, p[2] / r];
    let mut a = amp * (freq * (u[0] * dir[0] + u[1] * dir[1] + u[2] * dir[2]) + phase).sin();
    if front_only {
        a *= u[2].max(0.0);
    }
    [a * u[0], a * u[1], a * u[2]]
}

fn face_shape_fields(p: &[f64]) -> [[f64; 3]; FACE_SHAPE_DIM] {
    let s3 = 1.0 / 3.0f64.sqrt();
    [
        face_field(p, 3.0, [1.0, 0.0, 0.0], 0.0, 0.006, false),
        face_field(p, 4.0, [0.0, 1.0, 0.0], 0.7, 0.006, false),
        face_field(p, 5.0, [0.0, 0.0, 1.0], 1.4, 0.006, false),
        face_field(p, 6.0, [s3, s3, s3], 2.1, 0.006, false),
        face_field(p, 7.0, [s3, -s3, s3], 2.8, 0.006, false),
    ]
}

fn face_expression_fields(p: &[f64]) -> [[f64; 3]; FACE_EXPRESSION_DIM] {
    let s2 = 1.0 / 2.0f64.sqrt();
    [
        face_field(p, 2.0, [0.0, s2, s2], 0.3, 0.008, true),
        face_field(p, 3.0, [s2, 0.0, s2], 1.0, 0.008, true),
        face_field(p, 4.0, [0.0, -s2, s2], 1.7, 0.008, true),
        face_field(p, 5.0, [-s2, 0.0, s2], 2.4, 0.008, true),
        face_field(p, 6.0, [0.0, 0.0, 1.0], 3.1, 0.008, true),
    ]
}

fn build_face(full: bool) -> ParametricModel {
    let (verts, tris) = if full {
        let (v4, t4) = icosphere(4, FACE_RADIUS);
        split_edges(&v4, &t4, FULL_FACE_VERTICES - v4.len() / 3)
    } else {
        icosphere(3, FACE_RADIUS)
    };
    let v = verts.len() / 3;
    debug_assert_eq!(v, if full { FULL_FACE_VERTICES } else { TOY_FACE_VERTICES });

    // Single root joint at the centroid of the base-resolution sphere.
    let mut joint_regressor = MatrixF64::zeros(1, v);
    for c in 0..TOY_FACE_VERTICES {
        joint_regressor.data[c] = 1.0 / TOY_FACE_VERTICES as f64;
    }
    let mut skin = MatrixF64::zeros(v, 1);
    skin.data.fill(1.0);

    // Landmarks: 68 vertices spread over the front (+z) of the base
    // sphere, shared verbatim between resolutions.
    let front: Vec<usize> = (0..TOY_FACE_VERTICES)
        .filter(|&i| verts[i * 3 + 2] > 0.3 * FACE_RADIUS)
        .collect();
    assert!(front.len() >= FACE_KEYPOINTS, "front region too sparse: {}", front.len());
    let picks: Vec<usize> = stride_indices(front.len(), FACE_KEYPOINTS)
        .into_iter()
        .map(|i| front[i])
        .collect();
    let mut keypoint_regressor = MatrixF64::zeros(FACE_KEYPOINTS, v);
    for (r, &i) in picks.iter().enumerate() {
        keypoint_regressor.data[r * v + i] = 1.0;
    }

    let sampling = if full {
        vec![selector_matrix(&stride_indices(v, 559), v)]
    } else {
        vec![
            selector_matrix(&(0..162).collect::<Vec<_>>(), v),
            selector_matrix(&(0..42).collect::<Vec<_>>(), v),
        ]
    };

    let model = ParametricModel {
        name: if full { "full_face".into() } else { "toy_face".into() },
        shape_basis: basis_from_fields(&verts, face_shape_fields),
        expression_basis: basis_from_fields(&verts, face_expression_fields),
        template: verts,
        faces: tris,
        joint_regressor,
        parents: vec![None],
        skin_weights: skin,
        keypoint_regressor,
        sampling,
    };
    debug_assert!(model.validate().is_ok());
    model
}

/// The toy asset pair `(face, hand)` used throughout training-scale tests.
pub fn make_toy_models() -> (ParametricModel, ParametricModel) {
    (build_face(false), build_hand(false))
}

/// Full-fidelity pair `(face, hand)` with the published vertex counts.
pub fn make_full_models() -> (ParametricModel, ParametricModel) {
    (build_face(true), build_hand(true))
}

/// Total enclosed volume; exposed for orientation checks on the assets.
pub fn model_volume(model: &ParametricModel) -> f64 {
    signed_volume(&model.template, &model.faces)
}
