use super::*;
use crate::autodiff::{finite_diff_check, Tape};
use crate::meshcore::rodrigues;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cam64() -> Camera {
    Camera::pinhole(100.0, 100.0, 32.0, 32.0, 64, 64)
}

// ---- projection ----

#[test]
fn projection_examples() {
    let cam = Camera::pinhole(100.0, 100.0, 0.0, 0.0, 64, 64);
    // Optical axis at Z = 1.
    let (px, z, ok) = cam.project_point([0.0, 0.0, 1.0]);
    assert!(ok);
    assert_eq!(px, [0.0, 0.0]);
    assert_eq!(z, 1.0);
    // Off-axis point.
    let (px, _, ok) = cam.project_point([0.1, 0.0, 1.0]);
    assert!(ok);
    assert!((px[0] - 10.0).abs() < 1e-12 && px[1].abs() < 1e-12);
    // Behind the camera.
    let (_, _, ok) = cam.project_point([0.0, 0.0, -1.0]);
    assert!(!ok);
    let (_, _, ok) = cam.project_point([0.0, 0.0, 0.0]);
    assert!(!ok);
}

#[test]
fn projection_respects_extrinsics() {
    // Camera rotated 90 degrees about +y and shifted: the world +x axis
    // maps onto the camera -z axis.
    let mut cam = Camera::pinhole(50.0, 50.0, 10.0, 10.0, 32, 32);
    cam.rotation = rodrigues(&[0.0, std::f64::consts::FRAC_PI_2, 0.0]);
    cam.translation = [0.0, 0.0, 2.0];
    let p = [-1.0, 0.0, 0.0]; // rotates to (0, 0, 1), translates to (0, 0, 3)
    let c = cam.world_to_camera(p);
    assert!((c[0]).abs() < 1e-12 && (c[1]).abs() < 1e-12 && (c[2] - 3.0).abs() < 1e-12);
    let (px, z, ok) = cam.project_point(p);
    assert!(ok);
    assert!((z - 3.0).abs() < 1e-12);
    assert!((px[0] - 10.0).abs() < 1e-9 && (px[1] - 10.0).abs() < 1e-9);
}

#[test]
fn axial_translation_scales_pixel_offsets() {
    let cam = cam64();
    let mut r = rng(31);
    for _ in 0..50 {
        let p: [f64; 3] = [
            r.gen_range(-0.3..0.3),
            r.gen_range(-0.3..0.3),
            r.gen_range(0.5..2.0),
        ];
        let dz = r.gen_range(0.1..1.0);
        let (a, za, ok_a) = cam.project_point(p);
        let (b, zb, ok_b) = cam.project_point([p[0], p[1], p[2] + dz]);
        assert!(ok_a && ok_b);
        let ratio = za / zb;
        for d in 0..2 {
            let ca = a[d] - [cam.cx, cam.cy][d];
            let cb = b[d] - [cam.cx, cam.cy][d];
            assert!((cb - ca * ratio).abs() < 1e-9, "{ca} vs {cb} ratio {ratio}");
        }
    }
}

#[test]
fn batch_and_tape_projection_agree() {
    let mut cam = cam64();
    cam.rotation = rodrigues(&[0.3, -0.2, 0.5]);
    cam.translation = [0.05, -0.02, 1.5];
    let mut r = rng(32);
    let pts: Vec<f64> = (0..30).map(|_| r.gen_range(-0.4..0.4)).collect();
    let plain = project(&cam, &pts);
    assert!(plain.valid.iter().all(|&v| v));

    let mut tape = Tape::new();
    let t = tape.leaf(&[10, 3], pts.clone(), true);
    let (pixels, depths) = project_t(&mut tape, &cam, t);
    for i in 0..10 {
        assert!((tape.value(pixels)[i * 2] - plain.pixels[i * 2]).abs() < 1e-12);
        assert!((tape.value(pixels)[i * 2 + 1] - plain.pixels[i * 2 + 1]).abs() < 1e-12);
        assert!((tape.value(depths)[i] - plain.depths[i]).abs() < 1e-12);
    }

    let cam2 = cam;
    let report = finite_diff_check(&[(vec![10, 3], pts)], 1e-6, move |tape, hs| {
        let (pixels, _) = project_t(tape, &cam2, hs[0]);
        tape.sum_all(pixels)
    });
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

// ---- rasterization ----

/// Fronto-parallel square (two triangles) at constant depth.
fn square_at(z: f64, half: f64) -> (Vec<f64>, Vec<[usize; 3]>) {
    (
        vec![
            -half, -half, z, //
            half, -half, z, //
            half, half, z, //
            -half, half, z,
        ],
        vec![[0, 1, 2], [0, 2, 3]],
    )
}

#[test]
fn rasterizer_writes_constant_depth() {
    let cam = cam64();
    let (v, t) = square_at(2.0, 0.4);
    let map = rasterize_depth(&cam, &[MeshRef { vertices: &v, triangles: &t }]).unwrap();
    // The square spans 40x40 px around the principal point.
    assert_eq!(map.at(32, 32), 2.0);
    assert_eq!(map.at(20, 40), 2.0);
    assert!(map.at(2, 2).is_infinite());
    assert!(map.coverage() >= 39 * 39);
}

#[test]
fn rasterizer_zbuffers_nearest_surface() {
    let cam = cam64();
    let (vf, tf) = square_at(1.0, 0.05);
    let (vb, tb) = square_at(2.0, 0.4);
    let map = rasterize_depth(
        &cam,
        &[
            MeshRef { vertices: &vb, triangles: &tb },
            MeshRef { vertices: &vf, triangles: &tf },
        ],
    )
    .unwrap();
    assert_eq!(map.at(32, 32), 1.0, "near square wins the overlap");
    assert_eq!(map.at(20, 40), 2.0, "far square alone elsewhere");
    // Order must not matter.
    let map2 = rasterize_depth(
        &cam,
        &[
            MeshRef { vertices: &vf, triangles: &tf },
            MeshRef { vertices: &vb, triangles: &tb },
        ],
    )
    .unwrap();
    assert_eq!(map.data, map2.data);
}

#[test]
fn rasterizer_matches_raycast_oracle_on_slanted_triangle() {
    let cam = cam64();
    let v = vec![
        -0.3, -0.3, 1.0, //
        0.6, -0.2, 2.0, //
        -0.2, 0.6, 2.0,
    ];
    let t = vec![[0, 1, 2]];
    let (map, frags) =
        rasterize_depth_fragments(&cam, &[MeshRef { vertices: &v, triangles: &t }]).unwrap();
    // Plane normal n = (v1 - v0) x (v2 - v0).
    let e1 = [0.9, 0.1, 1.0];
    let e2 = [0.1, 0.9, 1.0];
    let n = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    let n_dot_v0 = n[0] * -0.3 + n[1] * -0.3 + n[2] * 1.0;
    let mut covered = 0;
    for row in 0..map.height {
        for col in 0..map.width {
            let d = map.at(row, col);
            if !d.is_finite() {
                continue;
            }
            covered += 1;
            assert!(d > 0.0, "rendered depths must be positive");
            // Ray through the pixel center: direction ((u-cx)/fx, (v-cy)/fy, 1),
            // so the hit depth is t in p = t * dir.
            let dir = [
                (col as f64 + 0.5 - cam.cx) / cam.fx,
                (row as f64 + 0.5 - cam.cy) / cam.fy,
                1.0,
            ];
            let denom = n[0] * dir[0] + n[1] * dir[1] + n[2] * dir[2];
            let t_hit = n_dot_v0 / denom;
            assert!(
                (d - t_hit).abs() < 1e-6,
                "pixel ({row},{col}): raster {d} vs ray {t_hit}"
            );
            let f = frags[row * map.width + col].unwrap();
            assert!((f.bary[0] + f.bary[1] + f.bary[2] - 1.0).abs() < 1e-9);
        }
    }
    assert!(covered > 300, "triangle spans many pixels, got {covered}");
}

#[test]
fn rasterizer_is_monotone_in_geometry() {
    let cam = cam64();
    let mut r = rng(33);
    let random_tris = |r: &mut ChaCha8Rng, n: usize| -> (Vec<f64>, Vec<[usize; 3]>) {
        let mut v = Vec::new();
        let mut t = Vec::new();
        for i in 0..n {
            for _ in 0..3 {
                v.push(r.gen_range(-0.4..0.4));
                v.push(r.gen_range(-0.4..0.4));
                v.push(r.gen_range(0.8..3.0));
            }
            t.push([i * 3, i * 3 + 1, i * 3 + 2]);
        }
        (v, t)
    };
    let (va, ta) = random_tris(&mut r, 12);
    let (vb, tb) = random_tris(&mut r, 12);
    let base = rasterize_depth(&cam, &[MeshRef { vertices: &va, triangles: &ta }]).unwrap();
    let both = rasterize_depth(
        &cam,
        &[
            MeshRef { vertices: &va, triangles: &ta },
            MeshRef { vertices: &vb, triangles: &tb },
        ],
    )
    .unwrap();
    for (b, a) in both.data.iter().zip(&base.data) {
        assert!(b <= a, "adding geometry may only move depths nearer");
    }
}

#[test]
fn rasterizer_skips_offscreen_and_behind() {
    let cam = cam64();
    let (v, t) = square_at(2.0, 0.2);
    let shifted: Vec<f64> = v
        .chunks_exact(3)
        .flat_map(|p| [p[0] + 50.0, p[1], p[2]])
        .collect();
    let map = rasterize_depth(&cam, &[MeshRef { vertices: &shifted, triangles: &t }]).unwrap();
    assert_eq!(map.coverage(), 0);
    let behind: Vec<f64> = v.chunks_exact(3).flat_map(|p| [p[0], p[1], -2.0]).collect();
    let map = rasterize_depth(&cam, &[MeshRef { vertices: &behind, triangles: &t }]).unwrap();
    assert_eq!(map.coverage(), 0);
}

// ---- keypoint depth sampling ----

#[test]
fn sampling_examples() {
    let mut map = DepthMap::background(8, 8);
    map.data.fill(3.0);
    let s = sample_keypoint_depths(&map, &[4.2, 3.7, 0.5, 0.5]);
    assert!(s.valid.iter().all(|&v| v));
    assert!(s.depths.iter().all(|&d| (d - 3.0).abs() < 1e-12));

    // Exact pixel center reads that pixel.
    let mut map = DepthMap::background(8, 8);
    map.data[3 * 8 + 5] = 1.75;
    let s = sample_keypoint_depths(&map, &[5.5, 3.5]);
    assert!(s.valid[0]);
    assert_eq!(s.depths[0], 1.75);

    // Midway between pixels of depth 1 and 2: bilinear gives 1.5.
    let mut map = DepthMap::background(8, 8);
    map.data[2 * 8 + 3] = 1.0;
    map.data[2 * 8 + 4] = 2.0;
    let s = sample_keypoint_depths(&map, &[4.0, 2.5]);
    assert!(s.valid[0]);
    assert!((s.depths[0] - 1.5).abs() < 1e-12);

    // Out of bounds and all-background neighborhoods are invalid.
    let s = sample_keypoint_depths(&map, &[-1.0, 2.0, 20.0, 2.0, 6.5, 6.5]);
    assert_eq!(s.valid, vec![false, false, false]);
}

#[test]
fn sampling_ignores_background_neighbors() {
    let mut map = DepthMap::background(8, 8);
    map.data[2 * 8 + 3] = 1.0; // single finite pixel
    // Sample offset toward background pixels: weights renormalize to the
    // finite one.
    let s = sample_keypoint_depths(&map, &[3.7, 2.6]);
    assert!(s.valid[0]);
    assert_eq!(s.depths[0], 1.0);
}

#[test]
fn tape_sampling_matches_plain_on_rendered_scene() {
    let cam = cam64();
    let v = vec![
        -0.3, -0.3, 1.0, //
        0.6, -0.2, 2.0, //
        -0.2, 0.6, 2.0, //
        -0.1, -0.1, 0.9,
    ];
    let t = vec![[0, 1, 2], [0, 1, 3]];
    let mesh = MeshRef { vertices: &v, triangles: &t };
    let (map, frags) = rasterize_depth_fragments(&cam, &[mesh]).unwrap();
    let kps = vec![32.5, 32.5, 30.0, 28.25, 1.0, 1.0];
    let plain = sample_keypoint_depths(&map, &kps);
    assert_eq!(plain.valid, vec![true, true, false]);

    let mut tape = Tape::new();
    let world = tape.leaf(&[4, 3], v.clone(), true);
    let (_px, z) = project_t(&mut tape, &cam, world);
    let samples = sample_keypoint_depths_t(&mut tape, &map, &frags, &[mesh], &[z], &kps);
    assert!(samples[2].is_none());
    for i in 0..2 {
        let got = tape.scalar_value(samples[i].unwrap());
        assert!(
            (got - plain.depths[i]).abs() < 1e-12,
            "keypoint {i}: {got} vs {}",
            plain.depths[i]
        );
    }

    // Gradients through the full chain (fixed coverage) check out.
    let t2 = t.clone();
    let map2 = map.clone();
    let frags2 = frags.clone();
    let kps2 = kps.clone();
    let report = finite_diff_check(&[(vec![4, 3], v.clone())], 1e-6, move |tape, hs| {
        let mesh = MeshRef { vertices: &[], triangles: &t2 };
        let (_px, z) = project_t(tape, &cam, hs[0]);
        let samples = sample_keypoint_depths_t(tape, &map2, &frags2, &[mesh], &[z], &kps2);
        let a = samples[0].unwrap();
        let b = samples[1].unwrap();
        tape.add(a, b)
    });
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

// ---- scale-invariant depth loss ----

#[test]
fn silog_examples() {
    let gt = vec![1.0, 2.0, 0.7, 3.1];
    let valid = vec![true; 4];
    let l = silog_depth_loss(&gt, &gt, &valid).unwrap();
    assert_eq!(l.value, 0.0);

    // Scale invariance: the operative property.
    for a in [0.5, 2.0, 10.0] {
        let scaled: Vec<f64> = gt.iter().map(|&g| a * g).collect();
        let l = silog_depth_loss(&gt, &scaled, &valid).unwrap();
        assert!(l.value <= 1e-9, "scale {a}: {}", l.value);
        let l = silog_depth_loss(&scaled, &gt, &valid).unwrap();
        assert!(l.value <= 1e-9, "scale {a} (flipped): {}", l.value);
    }

    // Two-point case: sqrt(Var(0, ln 2)) = ln2 / 2.
    let l = silog_depth_loss(&[1.0, 2.0], &[1.0, 1.0], &[true, true]).unwrap();
    assert!((l.value - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);

    // Fewer than two valid entries: flagged zero.
    let l = silog_depth_loss(&[1.0, 2.0], &[1.0, 1.0], &[true, false]).unwrap();
    assert!(l.empty_set && l.value == 0.0);
    assert!(silog_depth_loss(&[1.0], &[1.0, 2.0], &[true, true]).is_err());
}

#[test]
fn silog_tape_agrees_and_differentiates() {
    let mut r = rng(34);
    let gt: Vec<f64> = (0..12).map(|_| r.gen_range(0.3..3.0)).collect();
    let pred: Vec<f64> = (0..12).map(|_| r.gen_range(0.3..3.0)).collect();
    let plain = silog_depth_loss(&gt, &pred, &vec![true; 12]).unwrap().value;
    let mut tape = Tape::new();
    let p = tape.leaf(&[12], pred.clone(), true);
    let l = silog_depth_loss_t(&mut tape, p, &gt).unwrap();
    assert!((tape.scalar_value(l) - plain).abs() < 1e-12);

    let gt2 = gt.clone();
    let report = finite_diff_check(&[(vec![12], pred)], 1e-6, move |tape, hs| {
        silog_depth_loss_t(tape, hs[0], &gt2).unwrap()
    });
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

// ---- reprojection loss ----

fn chain_points(r: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k)
        .flat_map(|_| {
            [
                r.gen_range(-0.2..0.2),
                r.gen_range(-0.2..0.2),
                r.gen_range(0.8..1.6),
            ]
        })
        .collect()
}

#[test]
fn reprojection_loss_examples() {
    let cam = cam64();
    let mut r = rng(35);
    let k = 7;
    let hand = chain_points(&mut r, k);
    let face = chain_points(&mut r, k);
    let to2d = |pts: &[f64]| -> Vec<f64> {
        let p = project(&cam, pts);
        p.pixels
    };
    let hand_gt = to2d(&hand);
    let face_gt = to2d(&face);

    // Exact reprojection: zero.
    let sets = ReprojectionSets {
        hand: [&hand, &hand, &hand],
        face: [&face, &face, &face],
    };
    let l = reprojection_loss(&cam, &sets, &hand_gt, &face_gt, 4.0, 1.0).unwrap();
    assert_eq!(l, 0.0);

    // One hand keypoint off by (3, 4) px in one of the three terms:
    // 4 * 7 / K.
    let mut hand_off = hand.clone();
    let z = hand_off[2];
    hand_off[0] += 3.0 * z / cam.fx;
    hand_off[1] += 4.0 * z / cam.fy;
    let sets = ReprojectionSets {
        hand: [&hand_off, &hand, &hand],
        face: [&face, &face, &face],
    };
    let l = reprojection_loss(&cam, &sets, &hand_gt, &face_gt, 4.0, 1.0).unwrap();
    assert!((l - 28.0 / k as f64).abs() < 1e-9, "{l} vs {}", 28.0 / k as f64);

    // Uniform 1-px u-offset on all three face terms: 3 * 1 * 1.
    let face_off: Vec<f64> = face
        .chunks_exact(3)
        .flat_map(|p| [p[0] + p[2] / cam.fx, p[1], p[2]])
        .collect();
    let sets = ReprojectionSets {
        hand: [&hand, &hand, &hand],
        face: [&face_off, &face_off, &face_off],
    };
    let l = reprojection_loss(&cam, &sets, &hand_gt, &face_gt, 4.0, 1.0).unwrap();
    assert!((l - 3.0).abs() < 1e-9, "{l}");

    // Count mismatch errors.
    assert!(keypoint_l1(&cam, &hand, &face_gt[..k]).is_err());
}

#[test]
fn reprojection_tape_agrees_and_differentiates() {
    let cam = cam64();
    let mut r = rng(36);
    let hand = chain_points(&mut r, 5);
    let face = chain_points(&mut r, 4);
    let hand_gt: Vec<f64> = project(&cam, &chain_points(&mut r, 5)).pixels;
    let face_gt: Vec<f64> = project(&cam, &chain_points(&mut r, 4)).pixels;
    let sets = ReprojectionSets {
        hand: [&hand, &hand, &hand],
        face: [&face, &face, &face],
    };
    let plain = reprojection_loss(&cam, &sets, &hand_gt, &face_gt, 4.0, 1.0).unwrap();

    let mut tape = Tape::new();
    let h = tape.leaf(&[5, 3], hand.clone(), true);
    let f = tape.leaf(&[4, 3], face.clone(), true);
    let l = reprojection_loss_t(&mut tape, &cam, &[h, h, h], &[f, f, f], &hand_gt, &face_gt, 4.0, 1.0);
    assert!((tape.scalar_value(l) - plain).abs() < 1e-9);

    let (hg, fg) = (hand_gt.clone(), face_gt.clone());
    let report = finite_diff_check(
        &[(vec![5, 3], hand), (vec![4, 3], face)],
        1e-6,
        move |tape, hs| {
            reprojection_loss_t(tape, &cam, &[hs[0], hs[0], hs[0]], &[hs[1], hs[1], hs[1]], &hg, &fg, 4.0, 1.0)
        },
    );
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

// ---- PFM export ----

#[test]
fn pfm_round_trips_at_f32_precision() {
    let cam = cam64();
    let (v, t) = square_at(1.5, 0.15);
    let map = rasterize_depth(&cam, &[MeshRef { vertices: &v, triangles: &t }]).unwrap();
    let mut buf = Vec::new();
    write_pfm(&map, &mut buf).unwrap();
    assert!(buf.starts_with(b"Pf\n64 64\n-1.0\n"));
    let back = read_pfm(buf.as_slice()).unwrap();
    assert_eq!(back.width, 64);
    assert_eq!(back.height, 64);
    for (a, b) in map.data.iter().zip(&back.data) {
        if a.is_finite() {
            assert!((*a as f32 as f64 - b).abs() < 1e-12);
        } else {
            assert!(b.is_infinite());
        }
    }
    // Corrupt inputs are rejected.
    assert!(read_pfm(&b"PF\n2 2\n-1.0\n"[..]).is_err());
    assert!(read_pfm(&buf[..buf.len() - 3]).is_err());
}

#[test]
fn camera_validation() {
    assert!(cam64().validate().is_ok());
    let mut c = cam64();
    c.fx = 0.0;
    assert!(c.validate().is_err());
    let mut c = cam64();
    c.width = 0;
    assert!(c.validate().is_err());
    let mut c = cam64();
    c.translation[1] = f64::NAN;
    assert!(c.validate().is_err());
}
