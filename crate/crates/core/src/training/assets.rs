//! Precomputed supervision helpers: resolution-matched sampling maps and
//! keypoint regressors operating on the coarse (token-resolution) vertex
//! sets that the rough branch predicts.

use crate::data::{
    make_full_models, make_toy_models, FULL_FACE_VERTICES, FULL_HAND_VERTICES, TOY_FACE_VERTICES,
    TOY_HAND_VERTICES,
};
use crate::interaction::PointBvh;
use crate::meshcore::{resample_mesh, MatrixF64, ParametricModel, SamplingMatrix};
use crate::network::NetConfig;
use crate::{Error, Result};

/// Instantiates the parametric models matching a network configuration's
/// vertex cardinalities. Returns `(face, hand)`.
pub fn models_for(config: &NetConfig) -> Result<(ParametricModel, ParametricModel)> {
    match (config.hand_vertices, config.face_vertices) {
        (TOY_HAND_VERTICES, TOY_FACE_VERTICES) => Ok(make_toy_models()),
        (FULL_HAND_VERTICES, FULL_FACE_VERTICES) => Ok(make_full_models()),
        (h, f) => Err(Error::invalid(format!(
            "no parametric models provide {h} hand and {f} face vertices"
        ))),
    }
}

fn sampling_or_identity(model: &ParametricModel, to: usize) -> Result<SamplingMatrix> {
    let v = model.n_vertices();
    if to == v {
        return Ok(SamplingMatrix {
            from: v,
            to: v,
            matrix: MatrixF64::identity(v),
        });
    }
    model.sampling_between(v, to).cloned().ok_or_else(|| {
        Error::invalid(format!(
            "model '{}' has no sampling matrix from {v} to {to} vertices",
            model.name
        ))
    })
}

/// Re-targets a full-resolution keypoint regressor onto a coarse vertex
/// set: every full vertex's regression weight moves to its nearest coarse
/// representative in the rest pose. Row sums (and hence affine keypoint
/// reconstruction) are preserved, so keypoints regressed from coarse
/// ground-truth vertices are consistent targets for keypoints regressed
/// from coarse predictions.
pub fn coarse_keypoint_regressor(
    model: &ParametricModel,
    sampling: &SamplingMatrix,
) -> Result<MatrixF64> {
    if sampling.from != model.n_vertices() {
        return Err(Error::shape(format!(
            "sampling matrix source {} does not match model '{}' with {} vertices",
            sampling.from,
            model.name,
            model.n_vertices()
        )));
    }
    if sampling.to == sampling.from {
        return Ok(model.keypoint_regressor.clone());
    }
    let coarse = resample_mesh(&model.template, sampling)?;
    let bvh = PointBvh::build(&coarse)?;
    let representative: Vec<usize> = model
        .template
        .chunks_exact(3)
        .map(|p| bvh.nearest([p[0], p[1], p[2]]).0)
        .collect();
    let full = &model.keypoint_regressor;
    let mut out = MatrixF64::zeros(full.rows, sampling.to);
    for k in 0..full.rows {
        for (v, &rep) in representative.iter().enumerate() {
            out.data[k * sampling.to + rep] += full.at(k, v);
        }
    }
    Ok(out)
}

/// Fixed per-run lookup tables derived from the models and the network
/// configuration: full-to-coarse sampling maps for both meshes and
/// keypoint regressors at coarse resolution.
pub struct TrainAssets {
    /// Hand vertices at full resolution to rough-branch token resolution.
    pub hand_sampling: SamplingMatrix,
    /// Face counterpart.
    pub face_sampling: SamplingMatrix,
    /// `K_hand x hand_tokens` regressor over coarse hand vertices.
    pub hand_coarse_keypoints: MatrixF64,
    /// `K_face x face_tokens` regressor over coarse face vertices.
    pub face_coarse_keypoints: MatrixF64,
}

impl TrainAssets {
    pub fn new(
        config: &NetConfig,
        face: &ParametricModel,
        hand: &ParametricModel,
    ) -> Result<Self> {
        let hand_sampling = sampling_or_identity(hand, config.hand_tokens)?;
        let face_sampling = sampling_or_identity(face, config.face_tokens)?;
        let hand_coarse_keypoints = coarse_keypoint_regressor(hand, &hand_sampling)?;
        let face_coarse_keypoints = coarse_keypoint_regressor(face, &face_sampling)?;
        Ok(Self {
            hand_sampling,
            face_sampling,
            hand_coarse_keypoints,
            face_coarse_keypoints,
        })
    }
}
