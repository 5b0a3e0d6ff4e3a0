//! Procedural assets and dataset synthesis: parametric hand/face model
//! construction, labeled scene generation with contacts and deformations,
//! weak-supervision corruption, and dataset persistence.

pub mod geometry;
mod io;
mod models;
mod synth;

pub use io::{dataset_from_container, dataset_to_container, read_dataset, write_dataset};
pub use models::{
    make_full_models, make_toy_models, model_volume, FACE_EXPRESSION_DIM, FACE_KEYPOINTS,
    FACE_SHAPE_DIM, FULL_FACE_VERTICES, FULL_HAND_VERTICES, HAND_JOINTS, HAND_KEYPOINTS,
    HAND_SHAPE_DIM, TOY_FACE_VERTICES, TOY_HAND_TRIANGLES, TOY_HAND_VERTICES,
};
pub use synth::{
    axis_angle_from_rotation, make_wild_sample, prior_face_coefficients, prior_hand_coefficients,
    synth_dataset, synth_sample, Keypoints2d, LabeledGt, Sample, SampleKind, SynthConfig, WildGt,
    IMAGE_CHANNELS, IMAGE_SIZE,
};

#[cfg(test)]
mod tests;
