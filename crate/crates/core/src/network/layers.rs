//! Shared building blocks: linear maps, pre-norm transformer encoder
//! layers with multi-head self-attention, and batch normalization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;

use super::params::{Forward, ParamId, Params};

/// Kaiming-uniform weights for a ReLU-family layer: `U(-l, l)` with
/// `l = sqrt(6 / fan_in)`.
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Affine map `y = x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = params.add(
            &format!("{name}.w"),
            &[in_dim, out_dim],
            kaiming_uniform(rng, in_dim, in_dim * out_dim),
        );
        let b = params.add(&format!("{name}.b"), &[out_dim], vec![0.0; out_dim]);
        Self { w, b, in_dim, out_dim }
    }

    /// `x: [R, in] -> [R, out]`.
    pub fn forward(&self, f: &mut Forward, x: Tensor) -> Tensor {
        let w = f.param(self.w);
        let b = f.param(self.b);
        let y = f.tape.matmul(x, w);
        f.tape.add(y, b)
    }
}

/// Learned gain/bias pair for a layer-norm site.
#[derive(Debug, Clone)]
struct NormAffine {
    gain: ParamId,
    bias: ParamId,
}

impl NormAffine {
    fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        Self {
            gain: params.add(&format!("{name}.g"), &[dim], vec![1.0; dim]),
            bias: params.add(&format!("{name}.b"), &[dim], vec![0.0; dim]),
        }
    }

    fn forward(&self, f: &mut Forward, x: Tensor) -> Tensor {
        let g = f.param(self.gain);
        let b = f.param(self.bias);
        f.tape.layer_norm(x, g, b, 1e-5)
    }
}

/// Pre-norm transformer encoder layer: multi-head self-attention and a
/// two-layer ReLU feed-forward block, each wrapped in a residual.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    dim: usize,
    heads: usize,
    ln1: NormAffine,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: NormAffine,
    ffn1: Linear,
    ffn2: Linear,
}

impl TransformerLayer {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        let hidden = dim * ffn_mult;
        Self {
            dim,
            heads,
            ln1: NormAffine::new(params, &format!("{name}.ln1"), dim),
            wq: Linear::new(params, rng, &format!("{name}.q"), dim, dim),
            wk: Linear::new(params, rng, &format!("{name}.k"), dim, dim),
            wv: Linear::new(params, rng, &format!("{name}.v"), dim, dim),
            wo: Linear::new(params, rng, &format!("{name}.o"), dim, dim),
            ln2: NormAffine::new(params, &format!("{name}.ln2"), dim),
            ffn1: Linear::new(params, rng, &format!("{name}.ffn1"), dim, hidden),
            ffn2: Linear::new(params, rng, &format!("{name}.ffn2"), hidden, dim),
        }
    }

    /// `x: [N, dim] -> [N, dim]`; token count is preserved.
    pub fn forward(&self, f: &mut Forward, x: Tensor) -> Tensor {
        let normed = self.ln1.forward(f, x);
        let q = self.wq.forward(f, normed);
        let k = self.wk.forward(f, normed);
        let v = self.wv.forward(f, normed);

        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = f.tape.slice_cols(q, a, b);
            let kh = f.tape.slice_cols(k, a, b);
            let vh = f.tape.slice_cols(v, a, b);
            let kt = f.tape.transpose(kh);
            let scores = f.tape.matmul(qh, kt);
            let scores = f.tape.scale(scores, scale);
            let attn = f.tape.softmax_last(scores);
            head_outputs.push(f.tape.matmul(attn, vh));
        }
        let merged = f.tape.concat(&head_outputs, 1);
        let projected = self.wo.forward(f, merged);
        let x = f.tape.add(x, projected);

        let normed = self.ln2.forward(f, x);
        let hidden = self.ffn1.forward(f, normed);
        let hidden = f.tape.relu(hidden);
        let ffn = self.ffn2.forward(f, hidden);
        f.tape.add(x, ffn)
    }
}

/// One encoder stage: an optional linear feature-dim change followed by a
/// run of transformer layers at the stage width.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    proj: Option<Linear>,
    layers: Vec<TransformerLayer>,
    pub dim: usize,
}

impl EncoderStack {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        dim: usize,
        n_layers: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Self {
        let proj = (in_dim != dim)
            .then(|| Linear::new(params, rng, &format!("{name}.proj"), in_dim, dim));
        let layers = (0..n_layers)
            .map(|i| {
                TransformerLayer::new(params, rng, &format!("{name}.layer{i}"), dim, heads, ffn_mult)
            })
            .collect();
        Self { proj, layers, dim }
    }

    pub fn forward(&self, f: &mut Forward, x: Tensor) -> Tensor {
        let mut x = match &self.proj {
            Some(p) => p.forward(f, x),
            None => x,
        };
        for layer in &self.layers {
            x = layer.forward(f, x);
        }
        x
    }
}

/// Per-feature batch normalization.
///
/// Training-mode passes over batches of at least two samples normalize
/// with the (differentiable) batch statistics and fold them into the
/// running statistics with momentum 0.1 (population variance).
/// Evaluation — and the single-sample case, where batch statistics
/// degenerate — normalizes with the running statistics and leaves the
/// buffers untouched, so a batch-1 training pass equals evaluation.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    dim: usize,
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        Self {
            dim,
            gamma: params.add(&format!("{name}.gamma"), &[dim], vec![1.0; dim]),
            beta: params.add(&format!("{name}.beta"), &[dim], vec![0.0; dim]),
            run_mean: params.add_buffer(&format!("{name}.mean"), &[dim], vec![0.0; dim]),
            run_var: params.add_buffer(&format!("{name}.var"), &[dim], vec![1.0; dim]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// `x: [B, dim] -> [B, dim]`.
    pub fn forward(&self, f: &mut Forward, x: Tensor) -> Tensor {
        let shape = f.tape.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "batch norm expects [B, D], got {shape:?}");
        assert_eq!(shape[1], self.dim, "batch norm width mismatch");
        let batch = shape[0];

        let normed = if f.train() && batch >= 2 {
            // Differentiable batch statistics along the batch axis.
            let cols = f.tape.transpose(x);
            let sums = f.tape.sum_last(cols);
            let mean = f.tape.scale(sums, 1.0 / batch as f64);
            let centered = f.tape.sub(x, mean);
            let sq = f.tape.square(centered);
            let sq_cols = f.tape.transpose(sq);
            let sq_sums = f.tape.sum_last(sq_cols);
            let var = f.tape.scale(sq_sums, 1.0 / batch as f64);
            let var_eps = f.tape.add_scalar(var, self.eps);
            let std = f.tape.sqrt(var_eps);
            let ones = f.tape.constant(&[self.dim], vec![1.0; self.dim]);
            let inv = f.tape.div(ones, std);

            let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
                old.iter()
                    .zip(new)
                    .map(|(&o, &n)| (1.0 - self.momentum) * o + self.momentum * n)
                    .collect()
            };
            let new_mean = blend(f.buffer(self.run_mean), f.tape.value(mean));
            let new_var = blend(f.buffer(self.run_var), f.tape.value(var));
            f.set_buffer(self.run_mean, new_mean);
            f.set_buffer(self.run_var, new_var);

            f.tape.mul(centered, inv)
        } else {
            let mean = f.buffer(self.run_mean).to_vec();
            let inv_std: Vec<f64> = f
                .buffer(self.run_var)
                .iter()
                .map(|&v| 1.0 / (v + self.eps).sqrt())
                .collect();
            let mean_c = f.tape.constant(&[self.dim], mean);
            let inv_c = f.tape.constant(&[self.dim], inv_std);
            let centered = f.tape.sub(x, mean_c);
            f.tape.mul(centered, inv_c)
        };

        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        let scaled = f.tape.mul(normed, gamma);
        f.tape.add(scaled, beta)
    }
}
