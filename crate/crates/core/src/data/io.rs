//! Dataset persistence: a self-describing container with a schema
//! version, per-sample kind tags, and per-field chunks. Reading
//! revalidates every invariant against the generating models and names
//! the offending sample and field on corruption.

use std::path::Path;

use crate::camrender::Camera;
use crate::container::Container;
use crate::interaction::InteractionAnnotation;
use crate::meshcore::{DeformationField, ParametricModel, PoseState};
use crate::{Error, Result};

use super::synth::{Keypoints2d, LabeledGt, Sample, SampleKind, WildGt, IMAGE_CHANNELS, IMAGE_SIZE};

const SCHEMA_VERSION: i64 = 1;

const CAMERA_RECORD_LEN: usize = 18; // fx fy cx cy, R (9), t (3), width, height

fn camera_to_vec(c: &Camera) -> Vec<f64> {
    let mut out = Vec::with_capacity(CAMERA_RECORD_LEN);
    out.extend_from_slice(&[c.fx, c.fy, c.cx, c.cy]);
    out.extend_from_slice(&c.rotation);
    out.extend_from_slice(&c.translation);
    out.push(c.width as f64);
    out.push(c.height as f64);
    out
}

fn camera_from_slice(v: &[f64]) -> Result<Camera> {
    if v.len() != CAMERA_RECORD_LEN {
        return Err(Error::shape(format!("camera record must hold {CAMERA_RECORD_LEN} values")));
    }
    let mut rotation = [0.0; 9];
    rotation.copy_from_slice(&v[4..13]);
    let mut translation = [0.0; 3];
    translation.copy_from_slice(&v[13..16]);
    let cam = Camera {
        fx: v[0],
        fy: v[1],
        cx: v[2],
        cy: v[3],
        rotation,
        translation,
        width: v[16] as usize,
        height: v[17] as usize,
    };
    cam.validate()?;
    Ok(cam)
}

fn push_kp2(c: &mut Container, prefix: &str, name: &str, kp: &Keypoints2d) -> Result<()> {
    let k = kp.valid.len();
    c.push_f64(format!("{prefix}{name}"), vec![k, 2], kp.points.clone())?;
    c.push_u8(
        format!("{prefix}{name}_valid"),
        vec![k],
        kp.valid.iter().map(|&b| b as u8).collect(),
    )
}

/// Serializes samples into a container (schema v1).
pub fn dataset_to_container(samples: &[Sample]) -> Result<Container> {
    let mut c = Container::new();
    c.push_i64("schema", vec![2], vec![SCHEMA_VERSION, samples.len() as i64])?;
    for (i, s) in samples.iter().enumerate() {
        let p = format!("s{i}_");
        let kind = match s.kind() {
            SampleKind::Labeled => 0i64,
            SampleKind::Wild => 1,
        };
        c.push_i64(format!("{p}kind"), vec![1], vec![kind])?;
        c.push_f64(
            format!("{p}image"),
            vec![IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS],
            s.image.clone(),
        )?;
        c.push_f64(format!("{p}camera"), vec![CAMERA_RECORD_LEN], camera_to_vec(&s.camera))?;
        if let Some(gt) = &s.labeled {
            let hs = gt.hand_state.pack();
            let fs = gt.face_state.pack();
            c.push_f64(format!("{p}hand_state"), vec![hs.len()], hs)?;
            c.push_f64(format!("{p}face_state"), vec![fs.len()], fs)?;
            c.push_f64(
                format!("{p}hand_verts"),
                vec![gt.hand_vertices.len() / 3, 3],
                gt.hand_vertices.clone(),
            )?;
            c.push_f64(
                format!("{p}face_verts"),
                vec![gt.face_vertices_undeformed.len() / 3, 3],
                gt.face_vertices_undeformed.clone(),
            )?;
            c.push_f64(
                format!("{p}hand_kp3"),
                vec![gt.hand_keypoints3d.len() / 3, 3],
                gt.hand_keypoints3d.clone(),
            )?;
            c.push_f64(
                format!("{p}face_kp3"),
                vec![gt.face_keypoints3d.len() / 3, 3],
                gt.face_keypoints3d.clone(),
            )?;
            push_kp2(&mut c, &p, "hand_kp2", &gt.hand_keypoints2d)?;
            push_kp2(&mut c, &p, "face_kp2", &gt.face_keypoints2d)?;
            let a = &gt.annotation;
            c.push_f64(
                format!("{p}contact_hand"),
                vec![a.contact_label_hand.len()],
                a.contact_label_hand.clone(),
            )?;
            c.push_f64(
                format!("{p}contact_face"),
                vec![a.contact_label_face.len()],
                a.contact_label_face.clone(),
            )?;
            c.push_f64(
                format!("{p}deformation"),
                vec![a.deformation.n_vertices(), 3],
                a.deformation.vectors.clone(),
            )?;
        }
        if let Some(w) = &s.wild {
            push_kp2(&mut c, &p, "phand_kp2", &w.hand_keypoints2d)?;
            push_kp2(&mut c, &p, "pface_kp2", &w.face_keypoints2d)?;
            c.push_f64(
                format!("{p}phand_z"),
                vec![w.hand_keypoint_depths.len()],
                w.hand_keypoint_depths.clone(),
            )?;
            c.push_f64(
                format!("{p}pface_z"),
                vec![w.face_keypoint_depths.len()],
                w.face_keypoint_depths.clone(),
            )?;
        }
    }
    Ok(c)
}

fn sample_err(i: usize, e: Error) -> Error {
    Error::format(format!("sample {i}: {e}"))
}

fn get_kp2(c: &Container, i: usize, prefix: &str, name: &str) -> Result<Keypoints2d> {
    let (_, points) = c
        .get_f64(&format!("{prefix}{name}"))
        .map_err(|e| sample_err(i, e))?;
    let (_, valid) = c
        .get_u8(&format!("{prefix}{name}_valid"))
        .map_err(|e| sample_err(i, e))?;
    Ok(Keypoints2d {
        points: points.to_vec(),
        valid: valid.iter().map(|&b| b != 0).collect(),
    })
}

/// Deserializes and fully revalidates a dataset.
pub fn dataset_from_container(
    c: &Container,
    face: &ParametricModel,
    hand: &ParametricModel,
) -> Result<Vec<Sample>> {
    let (_, schema) = c.get_i64("schema")?;
    if schema.len() != 2 || schema[0] != SCHEMA_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset schema {:?} (expected version {SCHEMA_VERSION})",
            schema
        )));
    }
    let n = schema[1] as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = format!("s{i}_");
        let (_, kind) = c.get_i64(&format!("{p}kind")).map_err(|e| sample_err(i, e))?;
        let (_, image) = c.get_f64(&format!("{p}image")).map_err(|e| sample_err(i, e))?;
        let (_, cam) = c.get_f64(&format!("{p}camera")).map_err(|e| sample_err(i, e))?;
        let camera = camera_from_slice(cam).map_err(|e| sample_err(i, e))?;
        let sample = match kind.first() {
            Some(0) => {
                let (_, hs) = c.get_f64(&format!("{p}hand_state")).map_err(|e| sample_err(i, e))?;
                let (_, fs) = c.get_f64(&format!("{p}face_state")).map_err(|e| sample_err(i, e))?;
                let hand_state = PoseState::unpack(hand, hs).map_err(|e| sample_err(i, e))?;
                let face_state = PoseState::unpack(face, fs).map_err(|e| sample_err(i, e))?;
                let (_, hv) = c.get_f64(&format!("{p}hand_verts")).map_err(|e| sample_err(i, e))?;
                let (_, fv) = c.get_f64(&format!("{p}face_verts")).map_err(|e| sample_err(i, e))?;
                let (_, hk3) = c.get_f64(&format!("{p}hand_kp3")).map_err(|e| sample_err(i, e))?;
                let (_, fk3) = c.get_f64(&format!("{p}face_kp3")).map_err(|e| sample_err(i, e))?;
                let hand_keypoints2d = get_kp2(c, i, &p, "hand_kp2")?;
                let face_keypoints2d = get_kp2(c, i, &p, "face_kp2")?;
                let (_, ch) = c.get_f64(&format!("{p}contact_hand")).map_err(|e| sample_err(i, e))?;
                let (_, cf) = c.get_f64(&format!("{p}contact_face")).map_err(|e| sample_err(i, e))?;
                let (_, df) = c.get_f64(&format!("{p}deformation")).map_err(|e| sample_err(i, e))?;
                Sample {
                    image: image.to_vec(),
                    camera,
                    labeled: Some(LabeledGt {
                        hand_state,
                        face_state,
                        hand_vertices: hv.to_vec(),
                        face_vertices_undeformed: fv.to_vec(),
                        hand_keypoints3d: hk3.to_vec(),
                        face_keypoints3d: fk3.to_vec(),
                        hand_keypoints2d,
                        face_keypoints2d,
                        annotation: InteractionAnnotation {
                            contact_prob_hand: ch.to_vec(),
                            contact_prob_face: cf.to_vec(),
                            contact_label_hand: ch.to_vec(),
                            contact_label_face: cf.to_vec(),
                            deformation: DeformationField { vectors: df.to_vec() },
                        },
                    }),
                    wild: None,
                }
            }
            Some(1) => {
                // Schema rule: wild samples must not carry 3D fields.
                for forbidden in ["hand_verts", "face_verts", "hand_kp3", "deformation"] {
                    if c.get(&format!("{p}{forbidden}")).is_some() {
                        return Err(sample_err(
                            i,
                            Error::invalid(format!("wild sample carries forbidden field {forbidden}")),
                        ));
                    }
                }
                let hand_keypoints2d = get_kp2(c, i, &p, "phand_kp2")?;
                let face_keypoints2d = get_kp2(c, i, &p, "pface_kp2")?;
                let (_, hz) = c.get_f64(&format!("{p}phand_z")).map_err(|e| sample_err(i, e))?;
                let (_, fz) = c.get_f64(&format!("{p}pface_z")).map_err(|e| sample_err(i, e))?;
                Sample {
                    image: image.to_vec(),
                    camera,
                    labeled: None,
                    wild: Some(WildGt {
                        hand_keypoints2d,
                        face_keypoints2d,
                        hand_keypoint_depths: hz.to_vec(),
                        face_keypoint_depths: fz.to_vec(),
                    }),
                }
            }
            other => {
                return Err(sample_err(
                    i,
                    Error::format(format!("unknown sample kind tag {other:?}")),
                ))
            }
        };
        sample.validate(face, hand).map_err(|e| sample_err(i, e))?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    dataset_to_container(samples)?.write_to(path)
}

pub fn read_dataset(
    path: impl AsRef<Path>,
    face: &ParametricModel,
    hand: &ParametricModel,
) -> Result<Vec<Sample>> {
    dataset_from_container(&Container::read_from(path)?, face, hand)
}
