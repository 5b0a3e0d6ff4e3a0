//! Inverse-kinematics regressor: five Linear/BatchNorm/ReLU blocks with
//! two additive skip connections, mapping flattened rough vertices to a
//! packed parameter vector (root rotation, root translation, joint
//! rotations, shape and expression coefficients).

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::{Error, Result};

use super::layers::{BatchNorm, Linear};
use super::params::{Forward, Params};

struct IkBlock {
    lin: Linear,
    bn: BatchNorm,
}

impl IkBlock {
    fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            lin: Linear::new(params, rng, &format!("{name}.lin"), in_dim, out_dim),
            bn: BatchNorm::new(params, &format!("{name}.bn"), out_dim),
        }
    }

    fn forward(&self, f: &mut Forward, x: Tensor) -> Tensor {
        let x = self.lin.forward(f, x);
        let x = self.bn.forward(f, x);
        f.tape.relu(x)
    }
}

/// Five-block MLP with skips from block 1 into block 3's input and from
/// block 3 into block 5's input, plus a linear output head.
pub struct IkNet {
    pub in_dim: usize,
    pub out_dim: usize,
    blocks: Vec<IkBlock>,
    head: Linear,
}

impl IkNet {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        let mut blocks = Vec::with_capacity(5);
        let mut prev = in_dim;
        for i in 0..5 {
            blocks.push(IkBlock::new(
                params,
                rng,
                &format!("{name}.block{i}"),
                prev,
                hidden,
            ));
            prev = hidden;
        }
        let head = Linear::new(params, rng, &format!("{name}.head"), hidden, out_dim);
        Self {
            in_dim,
            out_dim,
            blocks,
            head,
        }
    }

    /// `x: [B, in_dim] -> [B, out_dim]`.
    pub fn forward(&self, f: &mut Forward, x: Tensor) -> Result<Tensor> {
        self.forward_impl(f, x, true)
    }

    /// Skip-free variant used by the architecture probe test.
    pub(crate) fn forward_without_skips(&self, f: &mut Forward, x: Tensor) -> Result<Tensor> {
        self.forward_impl(f, x, false)
    }

    fn forward_impl(&self, f: &mut Forward, x: Tensor, skips: bool) -> Result<Tensor> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape(format!(
                "IK input shape {shape:?} does not match expected [B, {}]",
                self.in_dim
            )));
        }
        let b1 = self.blocks[0].forward(f, x);
        let b2 = self.blocks[1].forward(f, b1);
        let in3 = if skips { f.tape.add(b2, b1) } else { b2 };
        let b3 = self.blocks[2].forward(f, in3);
        let b4 = self.blocks[3].forward(f, b3);
        let in5 = if skips { f.tape.add(b4, b3) } else { b4 };
        let b5 = self.blocks[4].forward(f, in5);
        Ok(self.head.forward(f, b5))
    }
}
