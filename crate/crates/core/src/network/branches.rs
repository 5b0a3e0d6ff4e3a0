//! Token construction and the two prediction branches.
//!
//! The 49 backbone feature vectors are upsampled by a learned linear map
//! to one token per keypoint and per coarse vertex, and each token is
//! tagged with the zero-pose 3D coordinate of the point it represents.
//! MeshNet regresses a 3D position per token through three progressively
//! narrower encoder stages; InteractionNet shares one trunk between
//! per-vertex contact probabilities (sigmoid heads upsampled to full
//! mesh resolution) and a dense face deformation field (linear head).

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::{Error, Result};

use super::layers::{kaiming_uniform, EncoderStack, Linear};
use super::params::{Forward, ParamId, Params};

/// Row ranges of the four token roles inside the `[N, .]` token matrix:
/// hand keypoints, face keypoints, coarse hand vertices, coarse face
/// vertices, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub hand_keypoints: usize,
    pub face_keypoints: usize,
    pub hand_vertices: usize,
    pub face_vertices: usize,
}

impl TokenLayout {
    pub fn total(&self) -> usize {
        self.hand_keypoints + self.face_keypoints + self.hand_vertices + self.face_vertices
    }

    fn bounds(&self) -> [usize; 5] {
        let a = self.hand_keypoints;
        let b = a + self.face_keypoints;
        let c = b + self.hand_vertices;
        let d = c + self.face_vertices;
        [0, a, b, c, d]
    }

    pub fn hand_keypoint_range(&self) -> (usize, usize) {
        let b = self.bounds();
        (b[0], b[1])
    }

    pub fn face_keypoint_range(&self) -> (usize, usize) {
        let b = self.bounds();
        (b[1], b[2])
    }

    pub fn hand_vertex_range(&self) -> (usize, usize) {
        let b = self.bounds();
        (b[2], b[3])
    }

    pub fn face_vertex_range(&self) -> (usize, usize) {
        let b = self.bounds();
        (b[3], b[4])
    }
}

/// Learned 49-to-N token upsampling plus positional tagging and
/// train-time feature masking.
pub struct TokenBuilder {
    up_w: ParamId,
    up_b: ParamId,
    /// Zero-pose coordinates, `[N, 3]` row-major, fixed at build time.
    coords: Vec<f64>,
    n_tokens: usize,
    hidden: usize,
    mask_rate: f64,
}

impl TokenBuilder {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        n_feature_tokens: usize,
        n_tokens: usize,
        hidden: usize,
        mask_rate: f64,
        coords: Vec<f64>,
    ) -> Self {
        assert_eq!(coords.len(), n_tokens * 3, "one 3D coordinate per token");
        let up_w = params.add(
            &format!("{name}.up.w"),
            &[n_tokens, n_feature_tokens],
            kaiming_uniform(rng, n_feature_tokens, n_tokens * n_feature_tokens),
        );
        let up_b = params.add(&format!("{name}.up.b"), &[hidden], vec![0.0; hidden]);
        Self {
            up_w,
            up_b,
            coords,
            n_tokens,
            hidden,
            mask_rate,
        }
    }

    /// Number of tokens whose features are zeroed per training pass.
    pub fn masked_count(&self) -> usize {
        (self.mask_rate * self.n_tokens as f64).floor() as usize
    }

    /// `features: [49, H] -> ([N, H+3], masked token indices)`.
    ///
    /// Masking zeroes only the feature part of a uniformly random token
    /// subset, and only in training mode; the coordinate columns always
    /// pass through untouched.
    pub fn forward(
        &self,
        f: &mut Forward,
        features: Tensor,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Vec<usize>)> {
        let up_w = f.param(self.up_w);
        let up_b = f.param(self.up_b);
        let lifted = f.tape.matmul(up_w, features);
        let mut feat = f.tape.add(lifted, up_b);

        let mut masked = Vec::new();
        let k = self.masked_count();
        if f.train() && k > 0 {
            let rng = rng.ok_or_else(|| {
                Error::invalid("training-mode token masking requires an rng")
            })?;
            masked = sample(rng, self.n_tokens, k).into_vec();
            masked.sort_unstable();
            let mut keep = vec![1.0; self.n_tokens * self.hidden];
            for &t in &masked {
                keep[t * self.hidden..(t + 1) * self.hidden].fill(0.0);
            }
            let keep = f.tape.constant(&[self.n_tokens, self.hidden], keep);
            feat = f.tape.mul(feat, keep);
        }

        let coords = f.tape.constant(&[self.n_tokens, 3], self.coords.clone());
        let tokens = f.tape.concat(&[feat, coords], 1);
        Ok((tokens, masked))
    }
}

/// Rough (token-resolution) geometry regressed by MeshNet.
pub struct RoughPrediction {
    /// `[K_h, 3]`
    pub hand_keypoints: Tensor,
    /// `[K_f, 3]`
    pub face_keypoints: Tensor,
    /// `[N_hv, 3]` at the coarse hand resolution.
    pub hand_vertices: Tensor,
    /// `[N_fv, 3]` at the coarse face resolution.
    pub face_vertices: Tensor,
}

/// Geometry branch: three encoder stages of decreasing width and a
/// shared per-token 3D coordinate head.
pub struct MeshNet {
    stages: Vec<EncoderStack>,
    head: Linear,
    layout: TokenLayout,
}

impl MeshNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        dims: &[usize; 3],
        layers: usize,
        heads: usize,
        ffn_mult: usize,
        layout: TokenLayout,
    ) -> Self {
        let mut stages = Vec::with_capacity(3);
        let mut prev = in_dim;
        for (i, &d) in dims.iter().enumerate() {
            stages.push(EncoderStack::new(
                params,
                rng,
                &format!("{name}.stage{i}"),
                prev,
                d,
                layers,
                heads,
                ffn_mult,
            ));
            prev = d;
        }
        let head = Linear::new(params, rng, &format!("{name}.head"), prev, 3);
        Self { stages, head, layout }
    }

    /// `tokens: [N, in_dim] -> RoughPrediction` (token count preserved
    /// through every stage, rows sliced by role at the end).
    pub fn forward(&self, f: &mut Forward, tokens: Tensor) -> RoughPrediction {
        let mut x = tokens;
        for stage in &self.stages {
            x = stage.forward(f, x);
        }
        let coords = self.head.forward(f, x);
        let (hk0, hk1) = self.layout.hand_keypoint_range();
        let (fk0, fk1) = self.layout.face_keypoint_range();
        let (hv0, hv1) = self.layout.hand_vertex_range();
        let (fv0, fv1) = self.layout.face_vertex_range();
        RoughPrediction {
            hand_keypoints: f.tape.slice_rows(coords, hk0, hk1),
            face_keypoints: f.tape.slice_rows(coords, fk0, fk1),
            hand_vertices: f.tape.slice_rows(coords, hv0, hv1),
            face_vertices: f.tape.slice_rows(coords, fv0, fv1),
        }
    }
}

/// Contact probabilities and deformation field at full mesh resolution.
pub struct InteractionPrediction {
    /// `[V_hand, 1]`, strictly inside (0, 1).
    pub contact_hand: Tensor,
    /// `[V_face, 1]`, strictly inside (0, 1).
    pub contact_face: Tensor,
    /// `[V_face, 3]`, unbounded displacement vectors.
    pub deformation: Tensor,
}

/// Interaction branch: an initial linear downsample, two encoder stages
/// forming the shared trunk, then contact and deformation heads whose
/// token-level outputs are lifted to full mesh resolution by learned
/// linear upsampling.
pub struct InteractionNet {
    input: Linear,
    enc1: EncoderStack,
    enc2: EncoderStack,
    contact_head_hand: Linear,
    contact_head_face: Linear,
    deform_head: Linear,
    up_hand_w: ParamId,
    up_hand_b: ParamId,
    up_face_w: ParamId,
    up_face_b: ParamId,
    up_def_w: ParamId,
    up_def_b: ParamId,
    layout: TokenLayout,
    trunk_dim: usize,
}

impl InteractionNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        dims: &[usize; 2],
        layers: usize,
        heads: usize,
        ffn_mult: usize,
        layout: TokenLayout,
        hand_vertices: usize,
        face_vertices: usize,
    ) -> Self {
        let input = Linear::new(params, rng, &format!("{name}.input"), in_dim, dims[0]);
        let enc1 = EncoderStack::new(
            params,
            rng,
            &format!("{name}.enc1"),
            dims[0],
            dims[0],
            layers,
            heads,
            ffn_mult,
        );
        let enc2 = EncoderStack::new(
            params,
            rng,
            &format!("{name}.enc2"),
            dims[0],
            dims[1],
            layers,
            heads,
            ffn_mult,
        );
        let d = dims[1];
        let nh = layout.hand_vertices;
        let nf = layout.face_vertices;
        let contact_head_hand = Linear::new(params, rng, &format!("{name}.contact_h"), d, 1);
        let contact_head_face = Linear::new(params, rng, &format!("{name}.contact_f"), d, 1);
        let deform_head = Linear::new(params, rng, &format!("{name}.deform"), d, 3);
        let up_hand_w = params.add(
            &format!("{name}.up_h.w"),
            &[hand_vertices, nh],
            kaiming_uniform(rng, nh, hand_vertices * nh),
        );
        let up_hand_b = params.add(
            &format!("{name}.up_h.b"),
            &[hand_vertices, 1],
            vec![0.0; hand_vertices],
        );
        let up_face_w = params.add(
            &format!("{name}.up_f.w"),
            &[face_vertices, nf],
            kaiming_uniform(rng, nf, face_vertices * nf),
        );
        let up_face_b = params.add(
            &format!("{name}.up_f.b"),
            &[face_vertices, 1],
            vec![0.0; face_vertices],
        );
        let up_def_w = params.add(
            &format!("{name}.up_d.w"),
            &[face_vertices, nf],
            kaiming_uniform(rng, nf, face_vertices * nf),
        );
        let up_def_b = params.add(&format!("{name}.up_d.b"), &[3], vec![0.0; 3]);
        Self {
            input,
            enc1,
            enc2,
            contact_head_hand,
            contact_head_face,
            deform_head,
            up_hand_w,
            up_hand_b,
            up_face_w,
            up_face_b,
            up_def_w,
            up_def_b,
            layout,
            trunk_dim: d,
        }
    }

    pub fn forward(&self, f: &mut Forward, tokens: Tensor) -> InteractionPrediction {
        self.forward_inner(f, tokens, false)
    }

    /// `zero_trunk` replaces the trunk output with zeros, exposing the
    /// bias-driven floor of each head (architecture probe).
    pub(crate) fn forward_inner(
        &self,
        f: &mut Forward,
        tokens: Tensor,
        zero_trunk: bool,
    ) -> InteractionPrediction {
        let x = self.input.forward(f, tokens);
        let x = self.enc1.forward(f, x);
        let trunk = self.enc2.forward(f, x);
        let trunk = if zero_trunk {
            let n = self.layout.total();
            f.tape.constant(&[n, self.trunk_dim], vec![0.0; n * self.trunk_dim])
        } else {
            trunk
        };

        let (hv0, hv1) = self.layout.hand_vertex_range();
        let (fv0, fv1) = self.layout.face_vertex_range();
        let hand_tok = f.tape.slice_rows(trunk, hv0, hv1);
        let face_tok = f.tape.slice_rows(trunk, fv0, fv1);

        let contact_hand = self.lift_contact(
            f,
            &self.contact_head_hand,
            self.up_hand_w,
            self.up_hand_b,
            hand_tok,
        );
        let contact_face = self.lift_contact(
            f,
            &self.contact_head_face,
            self.up_face_w,
            self.up_face_b,
            face_tok,
        );

        let def_tok = self.deform_head.forward(f, face_tok);
        let up_w = f.param(self.up_def_w);
        let up_b = f.param(self.up_def_b);
        let lifted = f.tape.matmul(up_w, def_tok);
        let deformation = f.tape.add(lifted, up_b);

        InteractionPrediction {
            contact_hand,
            contact_face,
            deformation,
        }
    }

    fn lift_contact(
        &self,
        f: &mut Forward,
        head: &Linear,
        up_w: ParamId,
        up_b: ParamId,
        tok: Tensor,
    ) -> Tensor {
        let logits_tok = head.forward(f, tok);
        let up_w = f.param(up_w);
        let up_b = f.param(up_b);
        let lifted = f.tape.matmul(up_w, logits_tok);
        let logits = f.tape.add(lifted, up_b);
        f.tape.sigmoid(logits)
    }
}
