//! Classical parameter recovery: Levenberg–Marquardt over the packed pose
//! vector against 3-D vertex targets or projected 2-D keypoint targets.
//! Serves as an optimization baseline and as an oracle for the learned
//! inverse-kinematics nets.

use super::{lbs_forward, regress_keypoints, ParametricModel, PoseState};
use crate::camrender::Camera;
use crate::error::{Error, Result};

/// What the fitter matches against.
#[derive(Debug, Clone)]
pub enum FitTarget {
    /// Full vertex set, `V*3` flat (meters).
    Vertices(Vec<f64>),
    /// Projected keypoints, `K*2` flat (pixels), under a fixed camera.
    Keypoints2d { points: Vec<f64>, camera: Camera },
}

/// Levenberg–Marquardt schedule. Defaults follow the damping contract:
/// lambda starts at 1e-3, x10 on a rejected step, /10 on an accepted one,
/// at most 200 iterations, convergence when the step norm drops below
/// 1e-10.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub step_tolerance: f64,
    /// Central-difference step for the Jacobian.
    pub fd_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 200,
            lambda_init: 1e-3,
            step_tolerance: 1e-10,
            fd_step: 1e-6,
        }
    }
}

/// Fit outcome. `cost` is the sum of squared residuals; `rms` its
/// root-mean-square per residual component (meters or pixels).
#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: PoseState,
    pub cost: f64,
    pub rms: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after every *accepted* step (starting with the initial cost);
    /// strictly decreasing by construction.
    pub cost_history: Vec<f64>,
}

fn residuals(model: &ParametricModel, target: &FitTarget, state: &PoseState) -> Result<Vec<f64>> {
    let (verts, _joints) = lbs_forward(model, state)?;
    let r = match target {
        FitTarget::Vertices(t) => {
            if t.len() != verts.len() {
                return Err(Error::shape(format!(
                    "vertex target has {} values, model produces {}",
                    t.len(),
                    verts.len()
                )));
            }
            verts.iter().zip(t).map(|(&a, &b)| a - b).collect::<Vec<f64>>()
        }
        FitTarget::Keypoints2d { points, camera } => {
            let kp = regress_keypoints(&verts, &model.keypoint_regressor)?;
            if points.len() != kp.len() / 3 * 2 {
                return Err(Error::shape(format!(
                    "2-D target has {} values, model has {} keypoints",
                    points.len(),
                    kp.len() / 3
                )));
            }
            let mut out = Vec::with_capacity(points.len());
            for (i, p) in kp.chunks_exact(3).enumerate() {
                let (px, _z, ok) = camera.project_point([p[0], p[1], p[2]]);
                if !ok {
                    return Err(Error::numerical("keypoint at or behind the camera"));
                }
                out.push(px[0] - points[i * 2]);
                out.push(px[1] - points[i * 2 + 1]);
            }
            out
        }
    };
    if !r.iter().all(|x| x.is_finite()) {
        return Err(Error::numerical("non-finite residual during fitting"));
    }
    Ok(r)
}

/// Levenberg–Marquardt fit of all pose/shape/expression parameters.
///
/// Accepted steps strictly decrease the cost (monotone acceptance);
/// rejected steps raise the damping and retry with the same Jacobian.
pub fn fit_parameters_lm(
    model: &ParametricModel,
    target: &FitTarget,
    init: &PoseState,
    opts: &FitOptions,
) -> Result<FitResult> {
    if !init.matches(model) {
        return Err(Error::shape("initial state does not match model dims"));
    }
    let mut x = init.pack();
    let p = x.len();
    let mut state = init.clone();
    let mut r = residuals(model, target, &state)?;
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut history = vec![cost];
    let mut lambda = opts.lambda_init;
    let mut iterations = 0;
    let mut converged = false;
    let mut jac: Option<Vec<f64>> = None; // row-major [(len r) x p]

    while iterations < opts.max_iterations {
        iterations += 1;
        let j = match &jac {
            Some(j) => j,
            None => {
                let mut jm = vec![0.0; r.len() * p];
                for pi in 0..p {
                    let orig = x[pi];
                    x[pi] = orig + opts.fd_step;
                    let rp = residuals(model, target, &PoseState::unpack(model, &x)?)?;
                    x[pi] = orig - opts.fd_step;
                    let rm = residuals(model, target, &PoseState::unpack(model, &x)?)?;
                    x[pi] = orig;
                    let inv = 1.0 / (2.0 * opts.fd_step);
                    for (ri, (a, b)) in rp.iter().zip(&rm).enumerate() {
                        jm[ri * p + pi] = (a - b) * inv;
                    }
                }
                jac = Some(jm);
                jac.as_ref().unwrap()
            }
        };
        // Normal equations J^T J d = -J^T r with Marquardt diagonal damping.
        let rows = r.len();
        let mut jtj = vec![0.0; p * p];
        crate::autodiff::matmul_tn(j, j, rows, p, p, &mut jtj);
        let mut jtr = vec![0.0; p];
        crate::autodiff::matmul_tn(j, &r, rows, p, 1, &mut jtr);
        let mut damped = jtj.clone();
        for d in 0..p {
            let diag = jtj[d * p + d].max(1e-12);
            damped[d * p + d] += lambda * diag;
        }
        let a = nalgebra::DMatrix::from_row_slice(p, p, &damped);
        let b = nalgebra::DVector::from_iterator(p, jtr.iter().map(|v| -v));
        let step = match a.cholesky() {
            Some(ch) => ch.solve(&b),
            None => {
                lambda *= 10.0;
                if lambda > 1e16 {
                    break;
                }
                continue;
            }
        };
        let step_norm = step.norm();
        let mut x_new = x.clone();
        for i in 0..p {
            x_new[i] += step[i];
        }
        let state_new = PoseState::unpack(model, &x_new)?;
        // A candidate that cannot be evaluated (behind camera, non-finite)
        // is a rejected step, not a fatal error.
        let cost_new = match residuals(model, target, &state_new) {
            Ok(r_new) => {
                let c: f64 = r_new.iter().map(|v| v * v).sum();
                Some((r_new, c))
            }
            Err(_) => None,
        };
        if let Some((r_new, cost_new)) = cost_new.filter(|(_, c)| *c < cost) {
            x = x_new;
            state = state_new;
            r = r_new;
            cost = cost_new;
            history.push(cost);
            lambda = (lambda / 10.0).max(1e-18);
            jac = None;
            if step_norm < opts.step_tolerance {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if step_norm < opts.step_tolerance {
                // No acceptable direction of meaningful length remains.
                converged = true;
                break;
            }
            if lambda > 1e16 {
                break;
            }
        }
    }

    let rms = (cost / r.len() as f64).sqrt();
    Ok(FitResult {
        state,
        cost,
        rms,
        iterations,
        converged,
        cost_history: history,
    })
}
