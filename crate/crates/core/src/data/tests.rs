use super::*;
use crate::container::Container;
use crate::interaction::{validate_closed_mesh, winding_number};
use crate::meshcore::{lbs_forward, regress_keypoints, resample_mesh, rodrigues, PoseState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn toy_models_have_published_cardinalities() {
    let (face, hand) = make_toy_models();
    assert_eq!(hand.n_vertices(), 195);
    assert_eq!(hand.faces.len(), 326);
    assert_eq!(hand.n_joints(), 16);
    assert_eq!(hand.n_keypoints(), 21);
    assert_eq!(hand.n_shape(), 5);
    assert_eq!(hand.n_expression(), 0);
    assert_eq!(hand.sampling.len(), 1);
    assert_eq!(hand.sampling[0].to, 49);
    assert_eq!(face.n_vertices(), 642);
    assert_eq!(face.faces.len(), 1280);
    assert_eq!(face.n_joints(), 1);
    assert_eq!(face.n_keypoints(), 68);
    assert_eq!(face.n_shape(), 5);
    assert_eq!(face.n_expression(), 5);
    assert_eq!(face.sampling[0].to, 162);
    assert_eq!(face.sampling[1].to, 42);
    face.validate().unwrap();
    hand.validate().unwrap();
}

#[test]
fn full_models_have_published_cardinalities() {
    let (face, hand) = make_full_models();
    assert_eq!(hand.n_vertices(), 778);
    assert_eq!(face.n_vertices(), 5023);
    assert_eq!(hand.sampling[0].to, 195);
    assert_eq!(face.sampling[0].to, 559);
    face.validate().unwrap();
    hand.validate().unwrap();

    // The toy assets survive as exact vertex prefixes.
    let (toy_face, toy_hand) = make_toy_models();
    assert_eq!(&hand.template[..toy_hand.template.len()], &toy_hand.template[..]);
    assert_eq!(&face.template[..toy_face.template.len()], &toy_face.template[..]);
    validate_closed_mesh(hand.n_vertices(), &hand.faces, &hand.template).unwrap();
    validate_closed_mesh(face.n_vertices(), &face.faces, &face.template).unwrap();
}

#[test]
fn toy_meshes_are_closed_and_outward() {
    let (face, hand) = make_toy_models();
    validate_closed_mesh(face.n_vertices(), &face.faces, &face.template).unwrap();
    validate_closed_mesh(hand.n_vertices(), &hand.faces, &hand.template).unwrap();
    assert!(model_volume(&face) > 0.0);
    assert!(model_volume(&hand) > 0.0);

    // Winding number is 1 inside every component, 0 outside.
    let w = winding_number([0.0, 0.0, 0.0], &face.template, &face.faces);
    assert!((w - 1.0).abs() < 1e-9, "face center winding {w}");
    let mut probes = vec![[0.0, 0.0, 0.0]]; // palm interior
    for k in 0..5 {
        let x = -0.032 + 0.016 * k as f64;
        probes.push([x, 0.0545, 0.0]);
        probes.push([x, 0.0815, 0.0]);
        probes.push([x, 0.107, 0.0]);
    }
    for p in probes {
        let w = winding_number(p, &hand.template, &hand.faces);
        assert!((w - 1.0).abs() < 1e-9, "hand interior {p:?} winding {w}");
    }
    let w = winding_number([0.3, 0.3, 0.3], &hand.template, &hand.faces);
    assert!(w.abs() < 1e-9, "outside winding {w}");
}

#[test]
fn model_container_round_trip_is_bitwise() {
    let (face, hand) = make_toy_models();
    for m in [face, hand] {
        let bytes = m.to_container().unwrap().to_bytes();
        let back = crate::meshcore::ParametricModel::from_container(
            &Container::from_bytes(&bytes).unwrap(),
        )
        .unwrap();
        assert_eq!(back.to_container().unwrap().to_bytes(), bytes);
    }
}

#[test]
fn zero_pose_reproduces_templates_bitwise() {
    let (face, hand) = make_toy_models();
    for m in [&face, &hand] {
        let (v, _) = lbs_forward(m, &PoseState::zero(m)).unwrap();
        assert!(v.iter().zip(&m.template).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn sampling_matrices_select_expected_vertices() {
    let (face, hand) = make_toy_models();
    let coarse = resample_mesh(&hand.template, &hand.sampling[0]).unwrap();
    assert_eq!(coarse.len(), 49 * 3);
    for (i, p) in coarse.chunks_exact(3).enumerate() {
        let src = i * 195 / 49;
        assert_eq!(p, &hand.template[src * 3..src * 3 + 3]);
    }
    let coarse = resample_mesh(&face.template, &face.sampling[1]).unwrap();
    assert_eq!(&coarse[..], &face.template[..42 * 3]);
}

#[test]
fn axis_angle_round_trips_through_rotation_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..200 {
        let mut r = [0.0f64; 3];
        for v in r.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let scale = rng.gen_range(0.0..3.0);
        let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt().max(1e-9);
        let r = [r[0] / n * scale, r[1] / n * scale, r[2] / n * scale];
        let back = axis_angle_from_rotation(&rodrigues(&r));
        let m1 = rodrigues(&r);
        let m2 = rodrigues(&back);
        for (a, b) in m1.iter().zip(&m2) {
            assert!((a - b).abs() < 1e-7, "{r:?} -> {back:?}");
        }
    }
    // Near-pi extraction keeps the rotation.
    for axis in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.577, 0.577, -0.577]] {
        let a = std::f64::consts::PI - 1e-5;
        let r = [axis[0] * a, axis[1] * a, axis[2] * a];
        let m1 = rodrigues(&r);
        let m2 = rodrigues(&axis_angle_from_rotation(&m1));
        for (x, y) in m1.iter().zip(&m2) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

fn brute_nearest(p: &[f64], cloud: &[f64]) -> f64 {
    cloud
        .chunks_exact(3)
        .map(|q| {
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn labeled_samples_are_self_consistent() {
    let (face, hand) = make_toy_models();
    let config = SynthConfig::default();
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed + seed);
        let s = synth_sample(&face, &hand, &config, &mut rng).unwrap();
        s.validate(&face, &hand).unwrap();
        let gt = s.labeled.as_ref().unwrap();

        // Vertices reproduce from the stored states bitwise.
        let (hv, _) = lbs_forward(&hand, &gt.hand_state).unwrap();
        assert_eq!(hv, gt.hand_vertices);
        let (fv, _) = lbs_forward(&face, &gt.face_state).unwrap();
        assert_eq!(fv, gt.face_vertices_undeformed);

        // Keypoints reproduce from vertices; 2D reproduces from 3D.
        let deformed = gt.face_vertices_deformed().unwrap();
        assert_eq!(
            regress_keypoints(&gt.hand_vertices, &hand.keypoint_regressor).unwrap(),
            gt.hand_keypoints3d
        );
        assert_eq!(
            regress_keypoints(&deformed, &face.keypoint_regressor).unwrap(),
            gt.face_keypoints3d
        );
        for (kp3, kp2) in [
            (&gt.hand_keypoints3d, &gt.hand_keypoints2d),
            (&gt.face_keypoints3d, &gt.face_keypoints2d),
        ] {
            for (i, p) in kp3.chunks_exact(3).enumerate() {
                let (px, _, ok) = s.camera.project_point([p[0], p[1], p[2]]);
                if kp2.valid[i] {
                    assert!(ok);
                    assert!((px[0] - kp2.points[i * 2]).abs() < 1e-9);
                    assert!((px[1] - kp2.points[i * 2 + 1]).abs() < 1e-9);
                }
            }
        }

        // Contact labels agree with the distance rule (brute force).
        let tau = config.contact_threshold;
        for (i, p) in gt.hand_vertices.chunks_exact(3).enumerate() {
            let d = brute_nearest(p, &deformed);
            let label = gt.annotation.contact_label_hand[i];
            assert_eq!(label == 1.0, d <= tau, "hand vertex {i} dist {d}");
        }
        for (i, p) in deformed.chunks_exact(3).enumerate() {
            let d = brute_nearest(p, &gt.hand_vertices);
            let label = gt.annotation.contact_label_face[i];
            assert_eq!(label == 1.0, d <= tau, "face vertex {i} dist {d}");
        }

        // Deformations are capped and vanish outside the neighborhood.
        for (i, d) in gt.annotation.deformation.vectors.chunks_exact(3).enumerate() {
            let m = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!(m <= 0.05 + 1e-12);
            let p = &gt.face_vertices_undeformed[i * 3..i * 3 + 3];
            if brute_nearest(p, &gt.hand_vertices) >= 2.0 * config.deform_radius {
                assert_eq!(m, 0.0, "vertex {i} deformed outside the contact neighborhood");
            }
        }
    }
}

#[test]
fn zero_amplitude_places_hand_clear_of_face() {
    let (face, hand) = make_toy_models();
    let config = SynthConfig { pose_amplitude: 0.0, ..SynthConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = synth_sample(&face, &hand, &config, &mut rng).unwrap();
    let gt = s.labeled.as_ref().unwrap();
    assert!(gt.annotation.contact_label_hand.iter().all(|&l| l == 0.0));
    assert!(gt.annotation.contact_label_face.iter().all(|&l| l == 0.0));
    assert!(gt.annotation.deformation.vectors.iter().all(|&d| d == 0.0));
}

#[test]
fn default_config_produces_contact_rich_scenes() {
    let (face, hand) = make_toy_models();
    let config = SynthConfig::default();
    let samples = synth_dataset(&face, &hand, &config, 24, 0).unwrap();
    let with_contact = samples
        .iter()
        .filter(|s| {
            s.labeled
                .as_ref()
                .unwrap()
                .annotation
                .contact_label_hand
                .iter()
                .any(|&l| l == 1.0)
        })
        .count();
    assert!(
        with_contact >= 8,
        "expected at least a third of samples touching, got {with_contact}/24"
    );
}

#[test]
fn synthesis_is_bitwise_reproducible() {
    let (face, hand) = make_toy_models();
    let config = SynthConfig::default();
    let a = synth_dataset(&face, &hand, &config, 3, 2).unwrap();
    let b = synth_dataset(&face, &hand, &config, 3, 2).unwrap();
    let ca = dataset_to_container(&a).unwrap().to_bytes();
    let cb = dataset_to_container(&b).unwrap().to_bytes();
    assert_eq!(ca, cb);
}

#[test]
fn noiseless_wild_sample_equals_ground_truth() {
    let (face, hand) = make_toy_models();
    let config = SynthConfig {
        wild_keypoint_sigma: 0.0,
        wild_depth_scale_range: (1.0, 1.0),
        wild_depth_sigma: 0.0,
        ..SynthConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let labeled = synth_sample(&face, &hand, &config, &mut rng).unwrap();
    let wild = make_wild_sample(&labeled, &config, &mut rng).unwrap();
    let gt = labeled.labeled.as_ref().unwrap();
    let w = wild.wild.as_ref().unwrap();
    assert!(wild.labeled.is_none(), "wild samples carry no 3D ground truth");
    assert_eq!(w.hand_keypoints2d, gt.hand_keypoints2d);
    assert_eq!(w.face_keypoints2d, gt.face_keypoints2d);
    for (zs, kp3) in [
        (&w.hand_keypoint_depths, &gt.hand_keypoints3d),
        (&w.face_keypoint_depths, &gt.face_keypoints3d),
    ] {
        for (z, p) in zs.iter().zip(kp3.chunks_exact(3)) {
            let expect = labeled.camera.world_to_camera([p[0], p[1], p[2]])[2];
            assert_eq!(*z, expect);
        }
    }
}

#[test]
fn pseudo_depth_scale_is_invisible_to_the_scale_invariant_loss() {
    let (face, hand) = make_toy_models();
    let base = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let labeled = synth_sample(&face, &hand, &base, &mut rng).unwrap();
    let gt = labeled.labeled.as_ref().unwrap();
    let gt_z: Vec<f64> = gt
        .hand_keypoints3d
        .chunks_exact(3)
        .map(|p| labeled.camera.world_to_camera([p[0], p[1], p[2]])[2])
        .collect();
    let valid = vec![true; gt_z.len()];
    let mut losses = Vec::new();
    for a in [1.0, 0.5, 2.0] {
        let config = SynthConfig { wild_depth_scale_range: (a, a), ..base.clone() };
        // Same derivation stream for every scale: only `a` differs.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let wild = make_wild_sample(&labeled, &config, &mut rng).unwrap();
        let l = crate::camrender::silog_depth_loss(
            &gt_z,
            &wild.wild.as_ref().unwrap().hand_keypoint_depths,
            &valid,
        )
        .unwrap();
        losses.push(l.value);
    }
    assert!((losses[1] - losses[0]).abs() < 1e-9);
    assert!((losses[2] - losses[0]).abs() < 1e-9);
}

#[test]
fn dataset_round_trips_bitwise() {
    let (face, hand) = make_toy_models();
    let config = SynthConfig::default();
    let samples = synth_dataset(&face, &hand, &config, 48, 16).unwrap();
    assert_eq!(samples.len(), 64);
    let dir = std::env::temp_dir().join(format!("hf_data_test_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("dataset.bin");
    write_dataset(&path, &samples).unwrap();
    let back = read_dataset(&path, &face, &hand).unwrap();
    assert_eq!(back.len(), 64);
    let a = dataset_to_container(&samples).unwrap().to_bytes();
    let b = dataset_to_container(&back).unwrap().to_bytes();
    assert_eq!(a, b, "write-then-read must be bitwise faithful");
    for (orig, rt) in samples.iter().zip(&back) {
        assert_eq!(orig.kind(), rt.kind());
        assert_eq!(orig.labeled.is_some(), rt.labeled.is_some());
        assert_eq!(orig.wild.is_some(), rt.wild.is_some());
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn corrupt_datasets_error_with_context() {
    let (face, hand) = make_toy_models();
    let config = SynthConfig::default();
    let samples = synth_dataset(&face, &hand, &config, 1, 1).unwrap();
    let container = dataset_to_container(&samples).unwrap();

    // Truncation fails at the container layer, not with a crash.
    let bytes = container.to_bytes();
    assert!(Container::from_bytes(&bytes[..bytes.len() / 2]).is_err());

    // A missing field names the sample and the field.
    let mut stripped = Container::new();
    for chunk in container.chunks() {
        if chunk.name != "s0_hand_verts" {
            stripped
                .push(chunk.name.clone(), chunk.dims.clone(), chunk.data.clone())
                .unwrap();
        }
    }
    let err = dataset_from_container(&stripped, &face, &hand).unwrap_err().to_string();
    assert!(err.contains("sample 0"), "{err}");
    assert!(err.contains("hand_verts"), "{err}");

    // A wild sample smuggling 3D fields is rejected.
    let mut poisoned = dataset_to_container(&samples).unwrap();
    poisoned.push_f64("s1_hand_verts", vec![1, 3], vec![0.0; 3]).unwrap();
    let err = dataset_from_container(&poisoned, &face, &hand).unwrap_err().to_string();
    assert!(err.contains("sample 1") && err.contains("forbidden"), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = SynthConfig { contact_threshold: 0.0, ..SynthConfig::default() };
    assert!(bad.validate().is_err());
    let bad = SynthConfig { wild_keypoint_sigma: -1.0, ..SynthConfig::default() };
    assert!(bad.validate().is_err());
    let bad = SynthConfig { wild_depth_scale_range: (2.0, 0.5), ..SynthConfig::default() };
    assert!(bad.validate().is_err());
    let bad = SynthConfig { focal_range: (0.0, 10.0), ..SynthConfig::default() };
    assert!(bad.validate().is_err());
}
