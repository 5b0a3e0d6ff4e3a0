//! Image feature extractor: a stack of stride-2 3x3 convolutions that
//! turns the 224x224x3 proxy image into a 7x7 grid of feature vectors,
//! flattened to 49 tokens.
//!
//! Convolutions are expressed as gather-then-matmul: a precomputed
//! im2col index table (with `-1` marking zero padding) lifts each output
//! position's receptive field into a row, and a single matrix product
//! against the kernel matrix produces all output channels at once.
//! Feature maps are kept channel-last throughout, so the final layer's
//! `[49, H]` output needs no transpose.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::{Error, Result};

use super::params::{Forward, ParamId, Params};
use super::layers::kaiming_uniform;

/// Edge length of the square input image.
pub const INPUT_SIZE: usize = 224;
/// Input channel count.
pub const INPUT_CHANNELS: usize = 3;
/// Edge length of the output token grid.
pub const GRID_SIZE: usize = 7;
/// Token count produced by the backbone.
pub const N_FEATURE_TOKENS: usize = GRID_SIZE * GRID_SIZE;

struct ConvLayer {
    w: ParamId,
    b: ParamId,
    /// Flat gather indices realizing im2col for this layer's geometry.
    patches: Arc<Vec<i64>>,
    out_positions: usize,
    patch_len: usize,
}

/// im2col index table for a stride-2, pad-1, 3x3 convolution over a
/// channel-last `[h, w, c]` map. Entry `-1` denotes zero padding.
fn im2col_indices(h: usize, w: usize, c: usize) -> (Vec<i64>, usize, usize) {
    let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    let mut idx = Vec::with_capacity(oh * ow * 9 * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let iy = (oy * 2 + ky) as i64 - 1;
                    let ix = (ox * 2 + kx) as i64 - 1;
                    let inside = iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64;
                    for ch in 0..c {
                        if inside {
                            idx.push((iy * w as i64 + ix) * c as i64 + ch as i64);
                        } else {
                            idx.push(-1);
                        }
                    }
                }
            }
        }
    }
    (idx, oh * ow, 9 * c)
}

/// Strided convolution stack mapping the proxy image to `[49, H]`
/// feature tokens.
pub struct ConvBackbone {
    layers: Vec<ConvLayer>,
    pub hidden: usize,
}

impl ConvBackbone {
    /// `channels` lists each layer's output width; the last entry is the
    /// token feature dim H. The stack must shrink 224 down to exactly 7.
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: &[usize],
    ) -> Result<Self> {
        let mut side = INPUT_SIZE;
        let mut in_c = INPUT_CHANNELS;
        let mut layers = Vec::with_capacity(channels.len());
        for (i, &out_c) in channels.iter().enumerate() {
            let (idx, out_positions, patch_len) = im2col_indices(side, side, in_c);
            let w = params.add(
                &format!("{name}.conv{i}.w"),
                &[patch_len, out_c],
                kaiming_uniform(rng, patch_len, patch_len * out_c),
            );
            let b = params.add(&format!("{name}.conv{i}.b"), &[out_c], vec![0.0; out_c]);
            layers.push(ConvLayer {
                w,
                b,
                patches: Arc::new(idx),
                out_positions,
                patch_len,
            });
            side = (side - 1) / 2 + 1;
            in_c = out_c;
        }
        if side != GRID_SIZE {
            return Err(Error::invalid(format!(
                "backbone with {} stride-2 layers ends at {side}x{side}, need {GRID_SIZE}x{GRID_SIZE}",
                channels.len()
            )));
        }
        Ok(Self {
            layers,
            hidden: in_c,
        })
    }

    /// `image`: channel-last 224x224x3 values. Returns `[49, H]` tokens.
    pub fn forward(&self, f: &mut Forward, image: &[f64]) -> Result<Tensor> {
        let want = INPUT_SIZE * INPUT_SIZE * INPUT_CHANNELS;
        if image.len() != want {
            return Err(Error::shape(format!(
                "backbone expects {want} image values, got {}",
                image.len()
            )));
        }
        if !image.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("backbone input image has non-finite values"));
        }
        let mut x = f
            .tape
            .constant(&[INPUT_SIZE * INPUT_SIZE, INPUT_CHANNELS], image.to_vec());
        for layer in &self.layers {
            let cols = f.tape.gather_flat(x, Arc::clone(&layer.patches));
            let cols = f
                .tape
                .reshape(cols, &[layer.out_positions, layer.patch_len]);
            let w = f.param(layer.w);
            let b = f.param(layer.b);
            let y = f.tape.matmul(cols, w);
            let y = f.tape.add(y, b);
            x = f.tape.relu(y);
        }
        Ok(x)
    }
}
