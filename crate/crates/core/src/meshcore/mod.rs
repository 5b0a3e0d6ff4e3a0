//! Parametric hand/face models: blendshapes + linear blend skinning (LBS),
//! keypoint regression, resolution resampling, Procrustes alignment and a
//! Levenberg–Marquardt parameter fitter.
//!
//! Skinning is evaluated in *displacement form*: each joint contributes
//! `w_j * ((R_j - I)(v - j_j) + delta_j)` added onto the blendshaped
//! vertex, where `delta_j` is the posed-minus-rest joint displacement,
//! itself accumulated through `(R_parent - I)` products down the tree.
//! Algebraically this equals the textbook weighted-transform sum (skin
//! weights partition unity), but the identity pose cancels *exactly*: a
//! zero pose returns the template bitwise instead of up to rounding.
//!
//! Two implementations share this structure: a plain `f64` path (used by
//! data synthesis and the LM fitter) and a tape path over
//! [`crate::autodiff`] for training.

mod fit;

pub use fit::{fit_parameters_lm, FitOptions, FitResult, FitTarget};

use crate::autodiff::{matmul_nn, Tape, Tensor};
use crate::container::Container;
use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`, the workhorse for regressors and
/// sampling maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixF64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixF64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self * other`, plain dense product.
    pub fn matmul(&self, other: &MatrixF64) -> MatrixF64 {
        assert_eq!(self.cols, other.rows, "matmul dims");
        let mut out = MatrixF64::zeros(self.rows, other.cols);
        matmul_nn(&self.data, &other.data, self.rows, self.cols, other.cols, &mut out.data);
        out
    }

    /// `self * v` for a flat `[cols x k]` block; returns `[rows x k]`.
    pub fn apply(&self, v: &[f64], k: usize) -> Vec<f64> {
        assert_eq!(v.len(), self.cols * k, "apply dims");
        let mut out = vec![0.0; self.rows * k];
        matmul_nn(&self.data, v, self.rows, self.cols, k, &mut out);
        out
    }
}

/// A resolution-changing linear map (row-stochastic) between two vertex
/// sets of the same model.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMatrix {
    /// Source vertex count (columns).
    pub from: usize,
    /// Target vertex count (rows).
    pub to: usize,
    pub matrix: MatrixF64,
}

/// A skinned blendshape model (hand or face).
#[derive(Debug, Clone)]
pub struct ParametricModel {
    pub name: String,
    /// Rest template, `V*3` flat (meters).
    pub template: Vec<f64>,
    /// Triangles as vertex index triples.
    pub faces: Vec<[usize; 3]>,
    /// `J x V`: rest joint locations as weighted vertex combinations.
    pub joint_regressor: MatrixF64,
    /// Parent joint per joint; exactly one `None` root.
    pub parents: Vec<Option<usize>>,
    /// `V x J`, rows nonnegative summing to 1.
    pub skin_weights: MatrixF64,
    /// `S x V*3`: per-coefficient vertex offset fields.
    pub shape_basis: MatrixF64,
    /// `E x V*3` (E = 0 for the hand).
    pub expression_basis: MatrixF64,
    /// `K x V` keypoint extraction weights.
    pub keypoint_regressor: MatrixF64,
    /// Maps between resolutions of this mesh (e.g. rough <-> full).
    pub sampling: Vec<SamplingMatrix>,
}

impl ParametricModel {
    pub fn n_vertices(&self) -> usize {
        self.template.len() / 3
    }
    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }
    pub fn n_shape(&self) -> usize {
        self.shape_basis.rows
    }
    pub fn n_expression(&self) -> usize {
        self.expression_basis.rows
    }
    pub fn n_keypoints(&self) -> usize {
        self.keypoint_regressor.rows
    }

    /// Finds the sampling matrix mapping `from` vertices to `to` vertices.
    pub fn sampling_between(&self, from: usize, to: usize) -> Option<&SamplingMatrix> {
        self.sampling.iter().find(|s| s.from == from && s.to == to)
    }

    /// Joints in topological order (parents before children).
    pub fn topo_order(&self) -> Vec<usize> {
        let j = self.n_joints();
        let mut order = Vec::with_capacity(j);
        let mut placed = vec![false; j];
        while order.len() < j {
            let before = order.len();
            for i in 0..j {
                if placed[i] {
                    continue;
                }
                let ready = match self.parents[i] {
                    None => true,
                    Some(p) => placed[p],
                };
                if ready {
                    placed[i] = true;
                    order.push(i);
                }
            }
            assert!(order.len() > before, "parent array has a cycle");
        }
        order
    }

    /// Validates every structural invariant; returns a descriptive error on
    /// the first violation.
    pub fn validate(&self) -> Result<()> {
        let v = self.n_vertices();
        let j = self.n_joints();
        if self.template.len() != 3 * v || v == 0 {
            return Err(Error::shape("template must be a nonempty V*3 array"));
        }
        if !self.template.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("template contains non-finite values"));
        }
        for (i, f) in self.faces.iter().enumerate() {
            for &vi in f {
                if vi >= v {
                    return Err(Error::invalid(format!("face {i} references vertex {vi} >= {v}")));
                }
            }
        }
        if self.joint_regressor.rows != j || self.joint_regressor.cols != v {
            return Err(Error::shape("joint_regressor must be J x V"));
        }
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::invalid(format!("expected exactly one root joint, found {roots}")));
        }
        for (i, p) in self.parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= j {
                    return Err(Error::invalid(format!("joint {i} parent {p} out of range")));
                }
            }
        }
        // Cycle check: walk up from every joint.
        for start in 0..j {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = self.parents[cur] {
                cur = p;
                steps += 1;
                if steps > j {
                    return Err(Error::invalid("parent array contains a cycle"));
                }
            }
        }
        if self.skin_weights.rows != v || self.skin_weights.cols != j {
            return Err(Error::shape("skin_weights must be V x J"));
        }
        for r in 0..v {
            let row = self.skin_weights.row(r);
            if row.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                return Err(Error::invalid(format!("skin weight row {r} has negative or non-finite entries")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("skin weight row {r} sums to {sum}, not 1")));
            }
        }
        if self.shape_basis.cols != 3 * v && self.shape_basis.rows > 0 {
            return Err(Error::shape("shape_basis must be S x V*3"));
        }
        if self.expression_basis.cols != 3 * v && self.expression_basis.rows > 0 {
            return Err(Error::shape("expression_basis must be E x V*3"));
        }
        if self.keypoint_regressor.cols != v {
            return Err(Error::shape("keypoint_regressor must be K x V"));
        }
        for s in &self.sampling {
            if s.matrix.rows != s.to || s.matrix.cols != s.from {
                return Err(Error::shape("sampling matrix dims disagree with from/to"));
            }
            for r in 0..s.matrix.rows {
                let row = s.matrix.row(r);
                if row.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                    return Err(Error::invalid("sampling matrix has negative or non-finite entries"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!(
                        "sampling matrix row {r} sums to {sum}, not 1 (must be row-stochastic)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Serializes into a [`Container`] (format-versioned by the container
    /// itself; chunk names are the schema).
    pub fn to_container(&self) -> Result<Container> {
        let v = self.n_vertices();
        let mut c = Container::new();
        c.push_u8("model_name", vec![self.name.len()], self.name.as_bytes().to_vec())?;
        c.push_f64("template", vec![v, 3], self.template.clone())?;
        let faces_flat: Vec<i64> = self.faces.iter().flatten().map(|&x| x as i64).collect();
        c.push_i64("faces", vec![self.faces.len(), 3], faces_flat)?;
        c.push_f64(
            "joint_regressor",
            vec![self.joint_regressor.rows, self.joint_regressor.cols],
            self.joint_regressor.data.clone(),
        )?;
        let parents: Vec<i64> = self.parents.iter().map(|p| p.map_or(-1, |x| x as i64)).collect();
        c.push_i64("parents", vec![parents.len()], parents)?;
        c.push_f64(
            "skin_weights",
            vec![self.skin_weights.rows, self.skin_weights.cols],
            self.skin_weights.data.clone(),
        )?;
        c.push_f64(
            "shape_basis",
            vec![self.shape_basis.rows, self.shape_basis.cols],
            self.shape_basis.data.clone(),
        )?;
        c.push_f64(
            "expression_basis",
            vec![self.expression_basis.rows, self.expression_basis.cols],
            self.expression_basis.data.clone(),
        )?;
        c.push_f64(
            "keypoint_regressor",
            vec![self.keypoint_regressor.rows, self.keypoint_regressor.cols],
            self.keypoint_regressor.data.clone(),
        )?;
        c.push_i64("n_sampling", vec![1], vec![self.sampling.len() as i64])?;
        for (i, s) in self.sampling.iter().enumerate() {
            c.push_f64(format!("sampling_{i}"), vec![s.to, s.from], s.matrix.data.clone())?;
        }
        Ok(c)
    }

    /// Deserializes and validates.
    pub fn from_container(c: &Container) -> Result<Self> {
        let (_, name_bytes) = c.get_u8("model_name")?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| Error::format("model_name is not UTF-8"))?;
        let (tdims, template) = c.get_f64("template")?;
        if tdims.len() != 2 || tdims[1] != 3 {
            return Err(Error::format("template must have dims [V, 3]"));
        }
        let (fdims, faces_flat) = c.get_indices("faces")?;
        if fdims.len() != 2 || fdims[1] != 3 {
            return Err(Error::format("faces must have dims [T, 3]"));
        }
        let faces: Vec<[usize; 3]> = faces_flat.chunks(3).map(|f| [f[0], f[1], f[2]]).collect();
        let (jdims, jreg) = c.get_f64("joint_regressor")?;
        let (pdims, parents_raw) = c.get_i64("parents")?;
        if pdims.len() != 1 {
            return Err(Error::format("parents must be 1-D"));
        }
        let parents: Vec<Option<usize>> = parents_raw
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        let (sdims, skin) = c.get_f64("skin_weights")?;
        let (shdims, shape) = c.get_f64("shape_basis")?;
        let (exdims, expr) = c.get_f64("expression_basis")?;
        let (kdims, kreg) = c.get_f64("keypoint_regressor")?;
        let (_, n_sampling) = c.get_i64("n_sampling")?;
        let n_sampling = n_sampling.first().copied().unwrap_or(0).max(0) as usize;
        let mut sampling = Vec::with_capacity(n_sampling);
        for i in 0..n_sampling {
            let (dims, data) = c.get_f64(&format!("sampling_{i}"))?;
            if dims.len() != 2 {
                return Err(Error::format(format!("sampling_{i} must be 2-D")));
            }
            sampling.push(SamplingMatrix {
                from: dims[1],
                to: dims[0],
                matrix: MatrixF64::new(dims[0], dims[1], data.to_vec()),
            });
        }
        let need_2d = |dims: &[usize], what: &str| -> Result<(usize, usize)> {
            if dims.len() != 2 {
                return Err(Error::format(format!("{what} must be 2-D")));
            }
            Ok((dims[0], dims[1]))
        };
        let (jr, jc) = need_2d(jdims, "joint_regressor")?;
        let (sr, sc) = need_2d(sdims, "skin_weights")?;
        let (shr, shc) = need_2d(shdims, "shape_basis")?;
        let (exr, exc) = need_2d(exdims, "expression_basis")?;
        let (kr, kc) = need_2d(kdims, "keypoint_regressor")?;
        let model = ParametricModel {
            name,
            template: template.to_vec(),
            faces,
            joint_regressor: MatrixF64::new(jr, jc, jreg.to_vec()),
            parents,
            skin_weights: MatrixF64::new(sr, sc, skin.to_vec()),
            shape_basis: MatrixF64::new(shr, shc, shape.to_vec()),
            expression_basis: MatrixF64::new(exr, exc, expr.to_vec()),
            keypoint_regressor: MatrixF64::new(kr, kc, kreg.to_vec()),
            sampling,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container()?.write_to(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::read_from(path)?)
    }
}

/// Pose/shape/expression coefficients for one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseState {
    /// Axis-angle (radians).
    pub root_rotation: [f64; 3],
    /// Meters.
    pub root_translation: [f64; 3],
    /// `J*3` axis-angle triples.
    pub joint_rotations: Vec<f64>,
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
}

impl PoseState {
    /// All-zero state sized for `model`.
    pub fn zero(model: &ParametricModel) -> Self {
        PoseState {
            root_rotation: [0.0; 3],
            root_translation: [0.0; 3],
            joint_rotations: vec![0.0; model.n_joints() * 3],
            shape: vec![0.0; model.n_shape()],
            expression: vec![0.0; model.n_expression()],
        }
    }

    pub fn matches(&self, model: &ParametricModel) -> bool {
        self.joint_rotations.len() == model.n_joints() * 3
            && self.shape.len() == model.n_shape()
            && self.expression.len() == model.n_expression()
    }

    /// Packs into a flat parameter vector:
    /// `[root_rot, root_trans, joint_rots, shape, expression]`.
    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(6 + self.joint_rotations.len() + self.shape.len() + self.expression.len());
        out.extend_from_slice(&self.root_rotation);
        out.extend_from_slice(&self.root_translation);
        out.extend_from_slice(&self.joint_rotations);
        out.extend_from_slice(&self.shape);
        out.extend_from_slice(&self.expression);
        out
    }

    pub fn unpack(model: &ParametricModel, x: &[f64]) -> Result<Self> {
        let j3 = model.n_joints() * 3;
        let want = 6 + j3 + model.n_shape() + model.n_expression();
        if x.len() != want {
            return Err(Error::shape(format!("packed state length {} != {want}", x.len())));
        }
        Ok(PoseState {
            root_rotation: [x[0], x[1], x[2]],
            root_translation: [x[3], x[4], x[5]],
            joint_rotations: x[6..6 + j3].to_vec(),
            shape: x[6 + j3..6 + j3 + model.n_shape()].to_vec(),
            expression: x[6 + j3 + model.n_shape()..].to_vec(),
        })
    }

    /// Wraps every axis-angle to magnitude `< pi` (shortest equivalent
    /// rotation).
    pub fn canonicalize(&mut self) {
        canonicalize_axis_angle(&mut self.root_rotation);
        for chunk in self.joint_rotations.chunks_mut(3) {
            let mut r = [chunk[0], chunk[1], chunk[2]];
            canonicalize_axis_angle(&mut r);
            chunk.copy_from_slice(&r);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.root_rotation.iter().all(|x| x.is_finite())
            && self.root_translation.iter().all(|x| x.is_finite())
            && self.joint_rotations.iter().all(|x| x.is_finite())
            && self.shape.iter().all(|x| x.is_finite())
            && self.expression.iter().all(|x| x.is_finite())
    }
}

fn canonicalize_axis_angle(r: &mut [f64; 3]) {
    let a = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if a == 0.0 {
        return;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let wrapped = a - two_pi * (a / two_pi).round();
    if wrapped == a {
        return;
    }
    let s = wrapped / a;
    r[0] *= s;
    r[1] *= s;
    r[2] *= s;
}

/// Per-vertex displacement field on the face surface.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    /// `V*3` flat, meters.
    pub vectors: Vec<f64>,
}

impl DeformationField {
    pub fn zeros(n_vertices: usize) -> Self {
        Self {
            vectors: vec![0.0; n_vertices * 3],
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.vectors.len() / 3
    }
}

// ---- rotation helpers (plain path, 3x3 row-major, column-vector action) ----

const ANGLE_GUARD: f64 = 1e-24;

/// Axis-angle to rotation matrix (Rodrigues), with the squared-norm guard
/// `alpha = sqrt(|r|^2 + 1e-24)` so the zero rotation maps to the exact
/// identity and gradients stay finite there.
pub fn rodrigues(r: &[f64; 3]) -> [f64; 9] {
    let alpha = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + ANGLE_GUARD).sqrt();
    let (kx, ky, kz) = (r[0] / alpha, r[1] / alpha, r[2] / alpha);
    let c = alpha.cos();
    let s = alpha.sin();
    let omc = 1.0 - c;
    [
        c + kx * kx * omc,
        kx * ky * omc - kz * s,
        kx * kz * omc + ky * s,
        ky * kx * omc + kz * s,
        c + ky * ky * omc,
        ky * kz * omc - kx * s,
        kz * kx * omc - ky * s,
        kz * ky * omc + kx * s,
        c + kz * kz * omc,
    ]
}

fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
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

fn mat3_minus_identity(m: &[f64; 9]) -> [f64; 9] {
    let mut out = *m;
    out[0] -= 1.0;
    out[4] -= 1.0;
    out[8] -= 1.0;
    out
}

// ---- forward kinematics (plain path) ----

/// Evaluates the model: blendshapes, joint tree, skinning, global root.
/// Returns `(vertices V*3, joints J*3)`.
pub fn lbs_forward(model: &ParametricModel, state: &PoseState) -> Result<(Vec<f64>, Vec<f64>)> {
    if !state.matches(model) {
        return Err(Error::shape(format!(
            "state dims (J={}, S={}, E={}) do not match model '{}' (J={}, S={}, E={})",
            state.joint_rotations.len() / 3,
            state.shape.len(),
            state.expression.len(),
            model.name,
            model.n_joints(),
            model.n_shape(),
            model.n_expression()
        )));
    }
    let v = model.n_vertices();
    let j = model.n_joints();

    // 1. Blendshaped rest vertices.
    let mut shaped = model.template.clone();
    add_basis_offsets(&mut shaped, &model.shape_basis, &state.shape);
    add_basis_offsets(&mut shaped, &model.expression_basis, &state.expression);

    // 2. Rest joints.
    let joints_rest = model.joint_regressor.apply(&shaped, 3);

    // 3. Joint tree: global rotations and posed-minus-rest displacements.
    let mut rot_g = vec![[0.0f64; 9]; j];
    let mut delta = vec![[0.0f64; 3]; j];
    for &ji in &model.topo_order() {
        let r_local = rodrigues(&[
            state.joint_rotations[ji * 3],
            state.joint_rotations[ji * 3 + 1],
            state.joint_rotations[ji * 3 + 2],
        ]);
        match model.parents[ji] {
            None => {
                rot_g[ji] = r_local;
                delta[ji] = [0.0; 3];
            }
            Some(p) => {
                rot_g[ji] = mat3_mul(&rot_g[p], &r_local);
                let d = [
                    joints_rest[ji * 3] - joints_rest[p * 3],
                    joints_rest[ji * 3 + 1] - joints_rest[p * 3 + 1],
                    joints_rest[ji * 3 + 2] - joints_rest[p * 3 + 2],
                ];
                let moved = mat3_apply(&mat3_minus_identity(&rot_g[p]), d);
                delta[ji] = [
                    moved[0] + delta[p][0],
                    moved[1] + delta[p][1],
                    moved[2] + delta[p][2],
                ];
            }
        }
    }

    // 4. Skinning in displacement form.
    let mut skinned = shaped.clone();
    for ji in 0..j {
        let rm = mat3_minus_identity(&rot_g[ji]);
        let jx = [joints_rest[ji * 3], joints_rest[ji * 3 + 1], joints_rest[ji * 3 + 2]];
        let dj = delta[ji];
        if rm.iter().all(|&x| x == 0.0) && dj.iter().all(|&x| x == 0.0) {
            continue; // joint at rest contributes nothing
        }
        for vi in 0..v {
            let w = model.skin_weights.at(vi, ji);
            if w == 0.0 {
                continue;
            }
            let rel = [
                shaped[vi * 3] - jx[0],
                shaped[vi * 3 + 1] - jx[1],
                shaped[vi * 3 + 2] - jx[2],
            ];
            let m = mat3_apply(&rm, rel);
            skinned[vi * 3] += w * (m[0] + dj[0]);
            skinned[vi * 3 + 1] += w * (m[1] + dj[1]);
            skinned[vi * 3 + 2] += w * (m[2] + dj[2]);
        }
    }

    // 5. Global root transform, also in displacement form.
    let r_root = rodrigues(&state.root_rotation);
    let rm = mat3_minus_identity(&r_root);
    let t = state.root_translation;
    let mut verts = skinned;
    for vi in 0..v {
        let p = [verts[vi * 3], verts[vi * 3 + 1], verts[vi * 3 + 2]];
        let m = mat3_apply(&rm, p);
        verts[vi * 3] += m[0] + t[0];
        verts[vi * 3 + 1] += m[1] + t[1];
        verts[vi * 3 + 2] += m[2] + t[2];
    }
    let mut joints = Vec::with_capacity(j * 3);
    for ji in 0..j {
        let p = [
            joints_rest[ji * 3] + delta[ji][0],
            joints_rest[ji * 3 + 1] + delta[ji][1],
            joints_rest[ji * 3 + 2] + delta[ji][2],
        ];
        let m = mat3_apply(&rm, p);
        joints.push(p[0] + m[0] + t[0]);
        joints.push(p[1] + m[1] + t[1]);
        joints.push(p[2] + m[2] + t[2]);
    }
    Ok((verts, joints))
}

fn add_basis_offsets(shaped: &mut [f64], basis: &MatrixF64, coeffs: &[f64]) {
    debug_assert_eq!(basis.rows, coeffs.len());
    for (row, &c) in coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        for (o, &b) in shaped.iter_mut().zip(basis.row(row)) {
            *o += c * b;
        }
    }
}

/// `undeformed + d`, the deformed face surface.
pub fn apply_deformation(undeformed: &[f64], d: &DeformationField) -> Result<Vec<f64>> {
    if undeformed.len() != d.vectors.len() {
        return Err(Error::shape(format!(
            "deformation cardinality {} != vertex cardinality {}",
            d.vectors.len() / 3,
            undeformed.len() / 3
        )));
    }
    Ok(undeformed.iter().zip(&d.vectors).map(|(&a, &b)| a + b).collect())
}

/// `regressor * vertices`: extracts keypoints from a vertex set.
pub fn regress_keypoints(vertices: &[f64], regressor: &MatrixF64) -> Result<Vec<f64>> {
    if vertices.len() != regressor.cols * 3 {
        return Err(Error::shape(format!(
            "regressor expects {} vertices, got {}",
            regressor.cols,
            vertices.len() / 3
        )));
    }
    Ok(regressor.apply(vertices, 3))
}

/// Applies a resolution-changing sampling matrix to a vertex set.
pub fn resample_mesh(vertices: &[f64], sampling: &SamplingMatrix) -> Result<Vec<f64>> {
    if vertices.len() != sampling.from * 3 {
        return Err(Error::shape(format!(
            "sampling expects {} source vertices, got {}",
            sampling.from,
            vertices.len() / 3
        )));
    }
    Ok(sampling.matrix.apply(vertices, 3))
}

// ---- differentiable path ----

/// Pose parameters as tape tensors (each may be a tracked leaf or derived
/// from the network).
#[derive(Debug, Clone, Copy)]
pub struct PoseTensors {
    /// `[3]`
    pub root_rotation: Tensor,
    /// `[3]`
    pub root_translation: Tensor,
    /// `[J, 3]`
    pub joint_rotations: Tensor,
    /// `[S]`
    pub shape: Tensor,
    /// `[E]` (may be empty)
    pub expression: Tensor,
}

impl PoseTensors {
    /// Loads a concrete state as tracked or untracked leaves.
    pub fn from_state(tape: &mut Tape, model: &ParametricModel, state: &PoseState, tracked: bool) -> Self {
        PoseTensors {
            root_rotation: tape.leaf(&[3], state.root_rotation.to_vec(), tracked),
            root_translation: tape.leaf(&[3], state.root_translation.to_vec(), tracked),
            joint_rotations: tape.leaf(&[model.n_joints(), 3], state.joint_rotations.clone(), tracked),
            shape: tape.leaf(&[model.n_shape()], state.shape.clone(), tracked),
            expression: tape.leaf(&[model.n_expression()], state.expression.clone(), tracked),
        }
    }
}

/// Differentiable Rodrigues: `[3]` axis-angle to `[3, 3]` rotation matrix.
/// Uses the same `sqrt(|r|^2 + 1e-24)` guard as the plain path.
pub fn rodrigues_t(tape: &mut Tape, r: Tensor) -> Tensor {
    assert_eq!(tape.shape(r), &[3], "rodrigues_t expects [3]");
    let sq = tape.square(r);
    let ssq = tape.sum_all(sq);
    let guarded = tape.add_scalar(ssq, ANGLE_GUARD);
    let alpha = tape.sqrt(guarded);
    let k = tape.div(r, alpha);
    let c = tape.cos(alpha);
    let s = tape.sin(alpha);
    let negc = tape.neg(c);
    let omc = tape.add_scalar(negc, 1.0);
    let kx = tape.slice_rows(k, 0, 1);
    let ky = tape.slice_rows(k, 1, 2);
    let kz = tape.slice_rows(k, 2, 3);

    let prod = |tape: &mut Tape, a: Tensor, b: Tensor| -> Tensor { tape.mul(a, b) };
    let kxkx = prod(tape, kx, kx);
    let kyky = prod(tape, ky, ky);
    let kzkz = prod(tape, kz, kz);
    let kxky = prod(tape, kx, ky);
    let kxkz = prod(tape, kx, kz);
    let kykz = prod(tape, ky, kz);
    let sx = prod(tape, kx, s);
    let sy = prod(tape, ky, s);
    let sz = prod(tape, kz, s);

    let diag = |tape: &mut Tape, kk: Tensor| -> Tensor {
        let m = tape.mul(kk, omc);
        tape.add(m, c)
    };
    let off = |tape: &mut Tape, kk: Tensor, sv: Tensor, plus: bool| -> Tensor {
        let m = tape.mul(kk, omc);
        if plus {
            tape.add(m, sv)
        } else {
            tape.sub(m, sv)
        }
    };
    let r00 = diag(tape, kxkx);
    let r01 = off(tape, kxky, sz, false);
    let r02 = off(tape, kxkz, sy, true);
    let r10 = off(tape, kxky, sz, true);
    let r11 = diag(tape, kyky);
    let r12 = off(tape, kykz, sx, false);
    let r20 = off(tape, kxkz, sy, false);
    let r21 = off(tape, kykz, sx, true);
    let r22 = diag(tape, kzkz);
    let flat = tape.concat(&[r00, r01, r02, r10, r11, r12, r20, r21, r22], 0);
    tape.reshape(flat, &[3, 3])
}

/// Differentiable LBS mirroring [`lbs_forward`]. Returns `([V,3], [J,3])`.
///
/// Row-vector convention on the tape: points transform as `p * R^T`, so
/// matrices built by [`rodrigues_t`] act identically to the plain path.
pub fn lbs_forward_t(
    tape: &mut Tape,
    model: &ParametricModel,
    pose: &PoseTensors,
) -> (Tensor, Tensor) {
    let v = model.n_vertices();
    let j = model.n_joints();
    assert_eq!(tape.shape(pose.joint_rotations), &[j, 3], "joint_rotations shape");

    // 1. Blendshaped rest vertices.
    let template = tape.constant(&[v, 3], model.template.clone());
    let mut shaped = template;
    if model.n_shape() > 0 {
        let basis = tape.constant(&[model.n_shape(), 3 * v], model.shape_basis.data.clone());
        let coeff = tape.reshape(pose.shape, &[1, model.n_shape()]);
        let offs = tape.matmul(coeff, basis);
        let offs = tape.reshape(offs, &[v, 3]);
        shaped = tape.add(shaped, offs);
    }
    if model.n_expression() > 0 {
        let basis = tape.constant(&[model.n_expression(), 3 * v], model.expression_basis.data.clone());
        let coeff = tape.reshape(pose.expression, &[1, model.n_expression()]);
        let offs = tape.matmul(coeff, basis);
        let offs = tape.reshape(offs, &[v, 3]);
        shaped = tape.add(shaped, offs);
    }

    // 2. Rest joints.
    let jreg = tape.constant(&[j, v], model.joint_regressor.data.clone());
    let joints_rest = tape.matmul(jreg, shaped);

    // 3. Joint tree in displacement form.
    let identity3 = tape.constant(&[3, 3], MatrixF64::identity(3).data);
    let mut rot_g: Vec<Option<Tensor>> = vec![None; j];
    let mut delta: Vec<Option<Tensor>> = vec![None; j];
    for &ji in &model.topo_order() {
        let r_local_aa = tape.slice_rows(pose.joint_rotations, ji, ji + 1);
        let r_local_aa = tape.reshape(r_local_aa, &[3]);
        let r_local = rodrigues_t(tape, r_local_aa);
        match model.parents[ji] {
            None => {
                rot_g[ji] = Some(r_local);
                delta[ji] = Some(tape.constant(&[1, 3], vec![0.0; 3]));
            }
            Some(p) => {
                let rp = rot_g[p].unwrap();
                rot_g[ji] = Some(tape.matmul(rp, r_local));
                let jc = tape.slice_rows(joints_rest, ji, ji + 1);
                let jp = tape.slice_rows(joints_rest, p, p + 1);
                let d = tape.sub(jc, jp);
                let rm = tape.sub(rp, identity3);
                let rmt = tape.transpose(rm);
                let moved = tape.matmul(d, rmt);
                let dp = delta[p].unwrap();
                delta[ji] = Some(tape.add(moved, dp));
            }
        }
    }

    // 4. Skinning in displacement form.
    let mut skinned = shaped;
    for ji in 0..j {
        // Per-joint weight column expanded to [V, 3].
        let mut wcol = Vec::with_capacity(v * 3);
        for vi in 0..v {
            let w = model.skin_weights.at(vi, ji);
            wcol.extend_from_slice(&[w, w, w]);
        }
        let wcol = tape.constant(&[v, 3], wcol);
        let jrow = tape.slice_rows(joints_rest, ji, ji + 1);
        let jrow3 = tape.reshape(jrow, &[3]);
        let rel = tape.sub(shaped, jrow3);
        let rg = rot_g[ji].unwrap();
        let rm = tape.sub(rg, identity3);
        let rmt = tape.transpose(rm);
        let moved = tape.matmul(rel, rmt);
        let dj = delta[ji].unwrap();
        let dj3 = tape.reshape(dj, &[3]);
        let contrib = tape.add(moved, dj3);
        let weighted = tape.mul(contrib, wcol);
        skinned = tape.add(skinned, weighted);
    }

    // 5. Global root transform in displacement form.
    let r_root = rodrigues_t(tape, pose.root_rotation);
    let rm = tape.sub(r_root, identity3);
    let rmt = tape.transpose(rm);
    let moved = tape.matmul(skinned, rmt);
    let with_rot = tape.add(skinned, moved);
    let verts = tape.add(with_rot, pose.root_translation);

    let mut jparts = Vec::with_capacity(j);
    for ji in 0..j {
        let jr = tape.slice_rows(joints_rest, ji, ji + 1);
        let dj = delta[ji].unwrap();
        jparts.push(tape.add(jr, dj));
    }
    let jposed = tape.concat(&jparts, 0);
    let jmoved = tape.matmul(jposed, rmt);
    let jrot = tape.add(jposed, jmoved);
    let joints = tape.add(jrot, pose.root_translation);

    (verts, joints)
}

/// Differentiable keypoint regression: `regressor * [V,3] -> [K,3]`.
pub fn regress_keypoints_t(tape: &mut Tape, vertices: Tensor, regressor: &MatrixF64) -> Tensor {
    let reg = tape.constant(&[regressor.rows, regressor.cols], regressor.data.clone());
    tape.matmul(reg, vertices)
}

/// Differentiable resampling.
pub fn resample_mesh_t(tape: &mut Tape, vertices: Tensor, sampling: &SamplingMatrix) -> Tensor {
    let m = tape.constant(&[sampling.to, sampling.from], sampling.matrix.data.clone());
    tape.matmul(m, vertices)
}

// ---- Procrustes alignment ----

/// Similarity transform found by [`procrustes_align`].
#[derive(Debug, Clone)]
pub struct SimilarityTransform {
    pub scale: f64,
    /// 3x3 row-major, column-vector action.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl SimilarityTransform {
    pub fn apply(&self, points: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(points.len());
        for p in points.chunks_exact(3) {
            let r = mat3_apply(&self.rotation, [p[0], p[1], p[2]]);
            out.push(self.scale * r[0] + self.translation[0]);
            out.push(self.scale * r[1] + self.translation[1]);
            out.push(self.scale * r[2] + self.translation[2]);
        }
        out
    }
}

/// Solves `min_{s,R,t} sum_i |s R p_i + t - g_i|^2` over the similarity
/// group (proper rotation, det = +1) via the SVD orthogonal-Procrustes
/// solution with sign correction. Returns the transform.
pub fn procrustes_transform(pred: &[f64], gt: &[f64]) -> Result<SimilarityTransform> {
    if pred.len() != gt.len() || pred.len() % 3 != 0 || pred.len() < 9 {
        return Err(Error::shape(format!(
            "procrustes needs matching N x 3 sets with N >= 3 (got {} and {} values)",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() / 3;
    let inv_n = 1.0 / n as f64;
    let mut cp = [0.0; 3];
    let mut cg = [0.0; 3];
    for i in 0..n {
        for d in 0..3 {
            cp[d] += pred[i * 3 + d] * inv_n;
            cg[d] += gt[i * 3 + d] * inv_n;
        }
    }
    // Cross-covariance M = sum (g - cg)(p - cp)^T and pred spread.
    let mut m = [0.0f64; 9];
    let mut sp = 0.0;
    for i in 0..n {
        let p = [pred[i * 3] - cp[0], pred[i * 3 + 1] - cp[1], pred[i * 3 + 2] - cp[2]];
        let g = [gt[i * 3] - cg[0], gt[i * 3 + 1] - cg[1], gt[i * 3 + 2] - cg[2]];
        for r in 0..3 {
            for c in 0..3 {
                m[r * 3 + c] += g[r] * p[c];
            }
        }
        sp += p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
    }
    if sp < 1e-18 {
        return Err(Error::numerical("degenerate configuration: zero spread in pred"));
    }
    let mna = nalgebra::Matrix3::from_row_slice(&m);
    let svd = mna.svd(true, true);
    let (u, vt) = (
        svd.u.ok_or_else(|| Error::numerical("svd failed"))?,
        svd.v_t.ok_or_else(|| Error::numerical("svd failed"))?,
    );
    let sv = svd.singular_values;
    if sv[1] <= sv[0] * 1e-12 {
        return Err(Error::numerical(
            "degenerate configuration: point sets are (near-)collinear",
        ));
    }
    let det = (u * vt).determinant();
    let d = if det < 0.0 { -1.0 } else { 1.0 };
    let dm = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d));
    let rot = u * dm * vt;
    let trace_sd = sv[0] + sv[1] + d * sv[2];
    let scale = trace_sd / sp;
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::numerical("procrustes scale is not positive"));
    }
    let mut rotation = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            rotation[r * 3 + c] = rot[(r, c)];
        }
    }
    let rc = mat3_apply(&rotation, cp);
    let translation = [
        cg[0] - scale * rc[0],
        cg[1] - scale * rc[1],
        cg[2] - scale * rc[2],
    ];
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Returns `pred` aligned onto `gt` (see [`procrustes_transform`]).
pub fn procrustes_align(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    Ok(procrustes_transform(pred, gt)?.apply(pred))
}
