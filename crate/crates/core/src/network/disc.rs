//! Parameter-space discriminators and the camera correction head.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::{Error, Result};

use super::layers::Linear;
use super::params::{Forward, Params};

/// Small MLP scoring a parameter vector as plausible (near 1) or not
/// (near 0). Hand and face use separate instances over different input
/// widths (joint rotations plus coefficients, root motion excluded).
pub struct Discriminator {
    pub in_dim: usize,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl Discriminator {
    pub fn new(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, in_dim: usize) -> Self {
        Self {
            in_dim,
            l1: Linear::new(params, rng, &format!("{name}.l1"), in_dim, 64),
            l2: Linear::new(params, rng, &format!("{name}.l2"), 64, 32),
            l3: Linear::new(params, rng, &format!("{name}.l3"), 32, 1),
        }
    }

    /// `x: [B, in_dim] -> [B, 1]` probabilities strictly inside (0, 1).
    pub fn forward(&self, f: &mut Forward, x: Tensor) -> Result<Tensor> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape(format!(
                "discriminator input shape {shape:?} does not match expected [B, {}]",
                self.in_dim
            )));
        }
        let x = self.l1.forward(f, x);
        let x = f.tape.relu(x);
        let x = self.l2.forward(f, x);
        let x = f.tape.relu(x);
        let x = self.l3.forward(f, x);
        Ok(f.tape.sigmoid(x))
    }
}

/// Weak-perspective camera correction from pooled backbone features:
/// `[log_scale, du, dv]`, applied as a focal multiplier and a principal
/// point shift.
pub struct CameraHead {
    lin: Linear,
    hidden: usize,
}

impl CameraHead {
    pub fn new(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, hidden: usize) -> Self {
        Self {
            lin: Linear::new(params, rng, &format!("{name}.lin"), hidden, 3),
            hidden,
        }
    }

    /// `features: [T, H] -> [1, 3]` via mean pooling over tokens.
    pub fn forward(&self, f: &mut Forward, features: Tensor) -> Tensor {
        let shape = f.tape.shape(features).to_vec();
        assert_eq!(shape.len(), 2, "camera head expects [T, H] features");
        assert_eq!(shape[1], self.hidden, "camera head width mismatch");
        let t = shape[0];
        let transposed = f.tape.transpose(features);
        let sums = f.tape.sum_last(transposed);
        let pooled = f.tape.scale(sums, 1.0 / t as f64);
        let pooled = f.tape.reshape(pooled, &[1, self.hidden]);
        self.lin.forward(f, pooled)
    }
}

/// Applies a `[log_scale, du, dv]` correction to a camera: focal lengths
/// scale by `exp(log_scale)`, the principal point shifts by `(du, dv)`.
pub fn apply_camera_delta(
    camera: &crate::camrender::Camera,
    delta: &[f64],
) -> Result<crate::camrender::Camera> {
    if delta.len() != 3 {
        return Err(Error::shape(format!(
            "camera delta has {} values, expected 3",
            delta.len()
        )));
    }
    let scale = delta[0].exp();
    let mut out = *camera;
    out.fx *= scale;
    out.fy *= scale;
    out.cx += delta[1];
    out.cy += delta[2];
    out.validate()?;
    Ok(out)
}
