//! Perspective camera, software z-buffer depth rasterization, keypoint
//! depth sampling, and the depth / reprojection losses.
//!
//! Conventions: camera frame is +z forward, +y down; pixel `(row, col)`
//! covers `[col, col+1) x [row, row+1)` with its center at
//! `(col + 0.5, row + 0.5)`. Depth maps store camera-space z in meters
//! with `+inf` as the background sentinel.
//!
//! Differentiable paths treat all discrete rasterization decisions
//! (coverage, visibility, bilinear footprints) as locally constant:
//! gradients flow through the vertex depths of the covering triangles
//! and through projected coordinates, not through coverage changes.

#[cfg(test)]
mod tests;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
pub use crate::interaction::FlaggedLoss;
use serde::{Deserialize, Serialize};

/// Depths at or below this value count as behind the camera.
pub const NEAR_LIMIT: f64 = 1e-6;
/// Floor applied inside logarithms of the scale-invariant depth loss.
pub const DEPTH_EPSILON: f64 = 1e-7;

/// Pinhole camera with world-to-camera extrinsics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Camera {
    /// Focal lengths in pixels.
    pub fx: f64,
    pub fy: f64,
    /// Principal point in pixels.
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, 3x3 row-major.
    pub rotation: [f64; 9],
    /// World-to-camera translation, meters.
    pub translation: [f64; 3],
    /// Image size in pixels.
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera with identity extrinsics.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Camera {
            fx,
            fy,
            cx,
            cy,
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0; 3],
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::invalid(format!(
                "image size must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        let finite = self.rotation.iter().chain(&self.translation).all(|x| x.is_finite())
            && [self.fx, self.fy, self.cx, self.cy].iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::invalid("camera parameters must be finite"));
        }
        Ok(())
    }

    /// World point to camera frame.
    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + self.translation[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + self.translation[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + self.translation[2],
        ]
    }

    /// Projects one world point: pixel position, camera-space depth and a
    /// validity flag (false when at or behind the near limit).
    pub fn project_point(&self, p: [f64; 3]) -> ([f64; 2], f64, bool) {
        let c = self.world_to_camera(p);
        let z = c[2];
        if !(z > NEAR_LIMIT) || !c.iter().all(|x| x.is_finite()) {
            return ([f64::NAN, f64::NAN], z, false);
        }
        (
            [self.fx * c[0] / z + self.cx, self.fy * c[1] / z + self.cy],
            z,
            true,
        )
    }
}

/// Batch projection result.
#[derive(Debug, Clone)]
pub struct Projection {
    /// `N*2` flat pixel coordinates; NaN where invalid.
    pub pixels: Vec<f64>,
    /// Camera-space z per point.
    pub depths: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Projects a flat `N x 3` world-point array.
pub fn project(camera: &Camera, points: &[f64]) -> Projection {
    let n = points.len() / 3;
    let mut out = Projection {
        pixels: Vec::with_capacity(n * 2),
        depths: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
    };
    for p in points.chunks_exact(3) {
        let (px, z, ok) = camera.project_point([p[0], p[1], p[2]]);
        out.pixels.extend_from_slice(&px);
        out.depths.push(z);
        out.valid.push(ok);
    }
    out
}

/// Differentiable projection of `[N, 3]` world points. Returns pixel
/// coordinates `[N, 2]` and camera-space depth `[N, 1]`. Depth is clamped
/// to the near limit inside the division so points sliding behind the
/// camera yield bounded (zero-gradient) pixels instead of NaN.
pub fn project_t(tape: &mut Tape, camera: &Camera, points: Tensor) -> (Tensor, Tensor) {
    let s = tape.shape(points).to_vec();
    assert_eq!(s.len(), 2, "project_t expects [N, 3]");
    assert_eq!(s[1], 3, "project_t expects [N, 3]");
    let r = &camera.rotation;
    // Row-vector convention: p_cam = p * R^T + t.
    let rt = vec![r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]];
    let rt = tape.constant(&[3, 3], rt);
    let t = tape.constant(&[3], camera.translation.to_vec());
    let rotated = tape.matmul(points, rt);
    let cam = tape.add(rotated, t);
    let xs = tape.slice_cols(cam, 0, 1);
    let ys = tape.slice_cols(cam, 1, 2);
    let zs = tape.slice_cols(cam, 2, 3);
    let zsafe = tape.clamp(zs, NEAR_LIMIT, f64::INFINITY);
    let xn = tape.div(xs, zsafe);
    let yn = tape.div(ys, zsafe);
    let xf = tape.scale(xn, camera.fx);
    let yf = tape.scale(yn, camera.fy);
    let u = tape.add_scalar(xf, camera.cx);
    let v = tape.add_scalar(yf, camera.cy);
    let pixels = tape.concat(&[u, v], 1);
    (pixels, zs)
}

// ---- depth map and rasterization ----

/// Camera-space depth image; `+inf` marks background.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, `height * width` values.
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn background(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            data: vec![f64::INFINITY; width * height],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn coverage(&self) -> usize {
        self.data.iter().filter(|d| d.is_finite()).count()
    }
}

/// Which triangle of which mesh won a pixel, and where inside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub mesh: usize,
    pub triangle: usize,
    /// Screen-space barycentric coordinates of the pixel center.
    pub bary: [f64; 3],
}

/// A borrowed triangle mesh passed to the rasterizer.
#[derive(Debug, Clone, Copy)]
pub struct MeshRef<'a> {
    pub vertices: &'a [f64],
    pub triangles: &'a [[usize; 3]],
}

/// Z-buffer rasterization of any number of meshes; also records the
/// winning fragment per covered pixel.
pub fn rasterize_depth_fragments(
    camera: &Camera,
    meshes: &[MeshRef<'_>],
) -> Result<(DepthMap, Vec<Option<Fragment>>)> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let mut map = DepthMap::background(w, h);
    let mut frags: Vec<Option<Fragment>> = vec![None; w * h];
    for (mi, mesh) in meshes.iter().enumerate() {
        let nv = mesh.vertices.len() / 3;
        let proj = project(camera, mesh.vertices);
        for (ti, tri) in mesh.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= nv) {
                return Err(Error::invalid(format!(
                    "mesh {mi} triangle {ti} references vertex out of range"
                )));
            }
            if !tri.iter().all(|&v| proj.valid[v]) {
                continue; // triangles touching the near plane are skipped
            }
            let p: Vec<[f64; 2]> = tri
                .iter()
                .map(|&v| [proj.pixels[v * 2], proj.pixels[v * 2 + 1]])
                .collect();
            let z = [proj.depths[tri[0]], proj.depths[tri[1]], proj.depths[tri[2]]];
            let denom = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
                - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
            if denom == 0.0 {
                continue; // degenerate in screen space
            }
            let min_x = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
            let max_x = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max);
            let min_y = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min);
            let max_y = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max);
            let col0 = (min_x - 0.5).ceil().max(0.0) as usize;
            let col1 = ((max_x - 0.5).floor().min(w as f64 - 1.0)).max(0.0) as usize;
            let row0 = (min_y - 0.5).ceil().max(0.0) as usize;
            let row1 = ((max_y - 0.5).floor().min(h as f64 - 1.0)).max(0.0) as usize;
            if min_x > w as f64 || max_x < 0.0 || min_y > h as f64 || max_y < 0.0 {
                continue;
            }
            for row in row0..=row1 {
                let py = row as f64 + 0.5;
                for col in col0..=col1 {
                    let px = col as f64 + 0.5;
                    let b0 = ((p[1][0] - px) * (p[2][1] - py) - (p[2][0] - px) * (p[1][1] - py))
                        / denom;
                    let b1 = ((p[2][0] - px) * (p[0][1] - py) - (p[0][0] - px) * (p[2][1] - py))
                        / denom;
                    let b2 = 1.0 - b0 - b1;
                    if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                        continue;
                    }
                    let inv_z = b0 / z[0] + b1 / z[1] + b2 / z[2];
                    let depth = 1.0 / inv_z;
                    let idx = row * w + col;
                    if depth < map.data[idx] {
                        map.data[idx] = depth;
                        frags[idx] = Some(Fragment {
                            mesh: mi,
                            triangle: ti,
                            bary: [b0, b1, b2],
                        });
                    }
                }
            }
        }
    }
    Ok((map, frags))
}

/// Z-buffer depth rasterization (fragments discarded).
pub fn rasterize_depth(camera: &Camera, meshes: &[MeshRef<'_>]) -> Result<DepthMap> {
    Ok(rasterize_depth_fragments(camera, meshes)?.0)
}

// ---- keypoint depth sampling ----

/// Depths sampled at 2-D keypoints; invalid entries had no finite
/// neighborhood (or were out of bounds).
#[derive(Debug, Clone)]
pub struct KeypointDepths {
    pub depths: Vec<f64>,
    pub valid: Vec<bool>,
}

/// The four bilinear neighbors of a sample position with their weights.
/// Returns `None` when the position is outside the image or not finite.
fn bilinear_footprint(
    map_w: usize,
    map_h: usize,
    u: f64,
    v: f64,
) -> Option<[(usize, usize, f64); 4]> {
    if !u.is_finite() || !v.is_finite() {
        return None;
    }
    if u < 0.0 || u > map_w as f64 || v < 0.0 || v > map_h as f64 {
        return None;
    }
    // Clamp the continuous position into the span of pixel centers so
    // edge samples degrade to nearest-pixel instead of vanishing.
    let x = (u - 0.5).clamp(0.0, (map_w - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (map_h - 1) as f64);
    let x0 = x.floor().min((map_w - 1) as f64);
    let y0 = y.floor().min((map_h - 1) as f64);
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = (x0 + 1).min(map_w - 1);
    let y1 = (y0 + 1).min(map_h - 1);
    Some([
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ])
}

/// Bilinear depth sampling restricted to finite (foreground) neighbors;
/// weights renormalize over the finite subset.
pub fn sample_keypoint_depths(map: &DepthMap, keypoints2d: &[f64]) -> KeypointDepths {
    let n = keypoints2d.len() / 2;
    let mut out = KeypointDepths {
        depths: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
    };
    for k in keypoints2d.chunks_exact(2) {
        let fp = bilinear_footprint(map.width, map.height, k[0], k[1]);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        if let Some(fp) = fp {
            for (row, col, wgt) in fp {
                let d = map.at(row, col);
                if d.is_finite() && wgt > 0.0 {
                    acc += wgt * d;
                    wsum += wgt;
                }
            }
        }
        if wsum > 0.0 {
            out.depths.push(acc / wsum);
            out.valid.push(true);
        } else {
            out.depths.push(f64::NAN);
            out.valid.push(false);
        }
    }
    out
}

/// Differentiable keypoint depth sampling. For every keypoint with a
/// finite neighborhood, rebuilds the sampled depth on the tape from the
/// camera-space vertex depths (`[V, 1]` per mesh) of the covering
/// triangles; footprints, barycentrics and visibility are fixed.
pub fn sample_keypoint_depths_t(
    tape: &mut Tape,
    map: &DepthMap,
    fragments: &[Option<Fragment>],
    meshes: &[MeshRef<'_>],
    vertex_depths: &[Tensor],
    keypoints2d: &[f64],
) -> Vec<Option<Tensor>> {
    assert_eq!(meshes.len(), vertex_depths.len(), "one depth tensor per mesh");
    let mut out = Vec::with_capacity(keypoints2d.len() / 2);
    for k in keypoints2d.chunks_exact(2) {
        let fp = bilinear_footprint(map.width, map.height, k[0], k[1]);
        let mut terms: Vec<(f64, Tensor)> = Vec::new();
        let mut wsum = 0.0;
        if let Some(fp) = fp {
            for (row, col, wgt) in fp {
                let idx = row * map.width + col;
                let frag = match fragments[idx] {
                    Some(f) if wgt > 0.0 => f,
                    _ => continue,
                };
                let tri = meshes[frag.mesh].triangles[frag.triangle];
                let zrows = tape.gather_rows(vertex_depths[frag.mesh], &tri);
                let ones = tape.constant(&[3, 1], vec![1.0; 3]);
                let inv = tape.div(ones, zrows);
                let bary = tape.constant(&[3, 1], frag.bary.to_vec());
                let weighted = tape.mul(inv, bary);
                let inv_z = tape.sum_all(weighted);
                let one = tape.scalar(1.0);
                let depth = tape.div(one, inv_z);
                terms.push((wgt, depth));
                wsum += wgt;
            }
        }
        if terms.is_empty() {
            out.push(None);
            continue;
        }
        let mut acc = tape.scalar(0.0);
        for (wgt, depth) in terms {
            let scaled = tape.scale(depth, wgt / wsum);
            acc = tape.add(acc, scaled);
        }
        out.push(Some(acc));
    }
    out
}

// ---- scale-invariant depth loss ----

/// Scale-invariant log-depth loss over valid keypoints:
/// `sqrt(Var(log(max(gt, 1e-7)) - log(max(pred, 1e-7))))` under the
/// population variance. Fewer than two valid entries yields a defined 0
/// with the empty flag.
pub fn silog_depth_loss(gt: &[f64], pred: &[f64], valid: &[bool]) -> Result<FlaggedLoss> {
    if gt.len() != pred.len() || gt.len() != valid.len() {
        return Err(Error::shape(format!(
            "depth arrays disagree: gt {}, pred {}, valid {}",
            gt.len(),
            pred.len(),
            valid.len()
        )));
    }
    let diffs: Vec<f64> = gt
        .iter()
        .zip(pred)
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .map(|((&g, &p), _)| g.max(DEPTH_EPSILON).ln() - p.max(DEPTH_EPSILON).ln())
        .collect();
    if diffs.len() < 2 {
        return Ok(FlaggedLoss {
            value: 0.0,
            empty_set: true,
        });
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    Ok(FlaggedLoss {
        value: var.sqrt(),
        empty_set: false,
    })
}

/// Tape version over a `[K]` predicted depth tensor and plain ground
/// truth (all entries assumed valid; filter before calling).
pub fn silog_depth_loss_t(tape: &mut Tape, pred: Tensor, gt: &[f64]) -> Result<Tensor> {
    let k = tape.value(pred).len();
    if k != gt.len() {
        return Err(Error::shape(format!(
            "depth arrays disagree: gt {}, pred {k}",
            gt.len()
        )));
    }
    if k < 2 {
        return Err(Error::invalid("scale-invariant loss needs at least two depths"));
    }
    let floored = tape.clamp(pred, DEPTH_EPSILON, f64::INFINITY);
    let log_pred = tape.log(floored);
    let log_gt: Vec<f64> = gt.iter().map(|&g| g.max(DEPTH_EPSILON).ln()).collect();
    let shape = tape.shape(pred).to_vec();
    let log_gt = tape.constant(&shape, log_gt);
    let diff = tape.sub(log_gt, log_pred);
    let var = tape.var_all(diff);
    Ok(tape.sqrt(var))
}

/// Assembles the tape depth loss from per-keypoint sampled depth scalars
/// (skipping invalid ones). Returns the loss and the number of valid
/// keypoints; fewer than two valid yields a constant 0 flagged by count.
pub fn silog_from_samples_t(
    tape: &mut Tape,
    samples: &[Option<Tensor>],
    gt: &[f64],
    gt_valid: &[bool],
) -> (Tensor, usize) {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(t) = s {
            if gt_valid.get(i).copied().unwrap_or(false) && gt[i].is_finite() {
                let r = tape.reshape(*t, &[1]);
                preds.push(r);
                gts.push(gt[i]);
            }
        }
    }
    if preds.len() < 2 {
        return (tape.scalar(0.0), preds.len());
    }
    let stacked = tape.concat(&preds, 0);
    let n = preds.len();
    let loss = silog_depth_loss_t(tape, stacked, &gts).expect("lengths match by construction");
    (loss, n)
}

// ---- reprojection loss ----

/// Mean-per-keypoint L1: `(1/K) * sum_k (|du_k| + |dv_k|)` between a
/// projected `K x 3` world set and `K x 2` ground-truth pixels.
pub fn keypoint_l1(camera: &Camera, points3d: &[f64], gt2d: &[f64]) -> Result<f64> {
    let k = points3d.len() / 3;
    if gt2d.len() != k * 2 || k == 0 {
        return Err(Error::shape(format!(
            "keypoint counts disagree: {k} 3-D vs {} 2-D values",
            gt2d.len()
        )));
    }
    let proj = project(camera, points3d);
    let mut sum = 0.0;
    for i in 0..k {
        sum += (proj.pixels[i * 2] - gt2d[i * 2]).abs()
            + (proj.pixels[i * 2 + 1] - gt2d[i * 2 + 1]).abs();
    }
    Ok(sum / k as f64)
}

/// All predicted keypoint sets entering the reprojection loss: for each
/// mesh the rough-branch keypoints, the mesh-regressed keypoints and the
/// parametric-model keypoints (each `K x 3`, world frame).
#[derive(Debug, Clone, Copy)]
pub struct ReprojectionSets<'a> {
    pub hand: [&'a [f64]; 3],
    pub face: [&'a [f64]; 3],
}

/// Weighted reprojection loss: hand terms weighted `lambda_hand` (4),
/// face terms `lambda_face` (1), each term a mean-per-keypoint L1 of the
/// projection against the 2-D ground truth.
pub fn reprojection_loss(
    camera: &Camera,
    sets: &ReprojectionSets<'_>,
    hand_gt2d: &[f64],
    face_gt2d: &[f64],
    lambda_hand: f64,
    lambda_face: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for set in sets.hand {
        total += lambda_hand * keypoint_l1(camera, set, hand_gt2d)?;
    }
    for set in sets.face {
        total += lambda_face * keypoint_l1(camera, set, face_gt2d)?;
    }
    Ok(total)
}

/// Tape version of [`keypoint_l1`] over a `[K, 3]` tensor.
pub fn keypoint_l1_t(tape: &mut Tape, camera: &Camera, points3d: Tensor, gt2d: &[f64]) -> Tensor {
    let s = tape.shape(points3d).to_vec();
    assert_eq!(s.len(), 2, "keypoint_l1_t expects [K, 3]");
    let k = s[0];
    assert_eq!(gt2d.len(), k * 2, "ground truth must be [K, 2]");
    let (pixels, _z) = project_t(tape, camera, points3d);
    let gt = tape.constant(&[k, 2], gt2d.to_vec());
    let diff = tape.sub(pixels, gt);
    let a = tape.abs(diff);
    let per_kp = tape.sum_last(a);
    tape.mean_all(per_kp)
}

/// Tape version of [`reprojection_loss`].
pub fn reprojection_loss_t(
    tape: &mut Tape,
    camera: &Camera,
    hand_sets: &[Tensor],
    face_sets: &[Tensor],
    hand_gt2d: &[f64],
    face_gt2d: &[f64],
    lambda_hand: f64,
    lambda_face: f64,
) -> Tensor {
    let mut total = tape.scalar(0.0);
    for &set in hand_sets {
        let l = keypoint_l1_t(tape, camera, set, hand_gt2d);
        let w = tape.scale(l, lambda_hand);
        total = tape.add(total, w);
    }
    for &set in face_sets {
        let l = keypoint_l1_t(tape, camera, set, face_gt2d);
        let w = tape.scale(l, lambda_face);
        total = tape.add(total, w);
    }
    total
}

// ---- PFM export ----

/// Writes a depth map as a grayscale portable float map (`Pf`,
/// little-endian, scanlines bottom-to-top per the format).
pub fn write_pfm(map: &DepthMap, mut w: impl std::io::Write) -> Result<()> {
    write!(w, "Pf\n{} {}\n-1.0\n", map.width, map.height)?;
    for row in (0..map.height).rev() {
        for col in 0..map.width {
            let v = map.at(row, col) as f32;
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a grayscale PFM back into a depth map (for round-trip checks).
pub fn read_pfm(mut r: impl std::io::Read) -> Result<DepthMap> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::format("PFM header truncated"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::format("PFM header is not UTF-8"))?;
    let mut lines = header.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != "Pf" {
        return Err(Error::format(format!("not a grayscale PFM (magic {magic:?})")));
    }
    let dims = lines.next().unwrap_or_default();
    let mut it = dims.split_whitespace();
    let width: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("bad PFM width"))?;
    let height: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("bad PFM height"))?;
    let scale: f64 = lines
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::format("bad PFM scale"))?;
    if scale >= 0.0 {
        return Err(Error::format("big-endian PFM is not supported"));
    }
    let payload = &bytes[header_end + 1..];
    if payload.len() != width * height * 4 {
        return Err(Error::format(format!(
            "PFM payload {} bytes, expected {}",
            payload.len(),
            width * height * 4
        )));
    }
    let mut map = DepthMap::background(width, height);
    for row in 0..height {
        let src_row = height - 1 - row;
        for col in 0..width {
            let off = (src_row * width + col) * 4;
            let v = f32::from_le_bytes([
                payload[off],
                payload[off + 1],
                payload[off + 2],
                payload[off + 3],
            ]);
            map.data[row * width + col] = v as f64;
        }
    }
    Ok(map)
}
