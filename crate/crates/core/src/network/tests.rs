use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, Tape, Tensor};
use crate::container::Container;
use crate::data::make_toy_models;
use crate::meshcore::{lbs_forward, resample_mesh, ParametricModel, PoseState};

use super::*;

fn toy_setup() -> (HandFaceNet, Params, ParametricModel, ParametricModel) {
    let (face, hand) = make_toy_models();
    let config = NetConfig::toy();
    let (net, params) = HandFaceNet::build(&config, &face, &hand, 7).expect("build");
    (net, params, face, hand)
}

fn random_image(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..INPUT_SIZE * INPUT_SIZE * INPUT_CHANNELS)
        .map(|_| rng.gen::<f64>())
        .collect()
}

fn eval_forward(net: &HandFaceNet, params: &mut Params, image: &[f64]) -> (Tape, NetOutput) {
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, params, false);
    let out = net.forward(&mut f, image, None).expect("eval forward");
    drop(f);
    (tape, out)
}

fn train_forward(
    net: &HandFaceNet,
    params: &mut Params,
    image: &[f64],
    mask_seed: u64,
) -> (Tape, NetOutput, Vec<Option<Tensor>>) {
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, params, true);
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let out = net.forward(&mut f, image, Some(&mut rng)).expect("train forward");
    let bound = f.finish();
    (tape, out, bound)
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Minimal Adam optimizer for the in-test training oracles.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: vec![Vec::new(); n_params],
            v: vec![Vec::new(); n_params],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut Params, grads: &[(ParamId, Vec<f64>)]) {
        self.t += 1;
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        for (id, g) in grads {
            let i = id.index();
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; g.len()];
                self.v[i] = vec![0.0; g.len()];
            }
            let w = params.value_mut(*id);
            for k in 0..g.len() {
                self.m[i][k] = b1 * self.m[i][k] + (1.0 - b1) * g[k];
                self.v[i][k] = b2 * self.v[i][k] + (1.0 - b2) * g[k] * g[k];
                let mhat = self.m[i][k] / bc1;
                let vhat = self.v[i][k] / bc2;
                w[k] -= self.lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[test]
fn config_validation_rejects_bad_dims() {
    assert!(NetConfig::toy().validate().is_ok());
    assert!(NetConfig::full().validate().is_ok());

    let mut c = NetConfig::toy();
    c.hidden = 62;
    assert!(c.validate().is_err(), "hidden not divisible by heads");

    let mut c = NetConfig::toy();
    c.mask_rate = 1.0;
    assert!(c.validate().is_err(), "mask rate must stay below 1");

    let mut c = NetConfig::toy();
    c.backbone_channels = vec![4, 8, 12, 16, 32];
    assert!(c.validate().is_err(), "last conv width must equal hidden");

    let mut c = NetConfig::toy();
    c.mesh_dims = [64, 30, 16];
    assert!(c.validate().is_err(), "stage dims must divide into heads");

    let mut c = NetConfig::toy();
    c.hand_tokens = 500;
    assert!(c.validate().is_err(), "coarse tokens cannot exceed vertices");
}

#[test]
fn config_dimension_arithmetic() {
    let c = NetConfig::toy();
    assert_eq!(c.tokens(), 21 + 68 + 49 + 42);
    assert_eq!(c.hand_param_dim(), 59);
    assert_eq!(c.face_param_dim(), 19);
    assert_eq!(c.hand_disc_dim(), 53);
    assert_eq!(c.face_disc_dim(), 13);
    let f = NetConfig::full();
    assert_eq!(f.tokens(), 21 + 68 + 195 + 559);
    assert_eq!(f.hand_disc_dim(), 53);
    assert_eq!(f.face_disc_dim(), 13);
}

#[test]
fn backbone_maps_zero_image_to_finite_features() {
    let (net, mut params, _, _) = toy_setup();
    let image = vec![0.0; INPUT_SIZE * INPUT_SIZE * INPUT_CHANNELS];
    let (tape, out) = eval_forward(&net, &mut params, &image);
    assert_eq!(tape.shape(out.features), &[N_FEATURE_TOKENS, 64]);
    assert!(tape.value(out.features).iter().all(|v| v.is_finite()));

    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &mut params, false);
    let short = vec![0.0; 100];
    assert!(net.forward(&mut f, &short, None).is_err(), "wrong image size");
    drop(f);

    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &mut params, false);
    let mut bad = vec![0.0; INPUT_SIZE * INPUT_SIZE * INPUT_CHANNELS];
    bad[17] = f64::NAN;
    assert!(net.forward(&mut f, &bad, None).is_err(), "non-finite image");
}

#[test]
fn fresh_builds_share_seed_bitwise() {
    let (face, hand) = make_toy_models();
    let config = NetConfig::toy();
    let (net_a, mut pa) = HandFaceNet::build(&config, &face, &hand, 3).expect("build a");
    let (net_b, mut pb) = HandFaceNet::build(&config, &face, &hand, 3).expect("build b");
    assert_eq!(pa.to_container(), pb.to_container(), "same seed, same weights");

    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let image = random_image(&mut rng);
    let (ta, oa) = eval_forward(&net_a, &mut pa, &image);
    let (tb, ob) = eval_forward(&net_b, &mut pb, &image);
    assert_eq!(ta.value(oa.rough.hand_vertices), tb.value(ob.rough.hand_vertices));
    assert_eq!(ta.value(oa.interaction.deformation), tb.value(ob.interaction.deformation));
    assert_eq!(ta.value(oa.hand_params), tb.value(ob.hand_params));

    let (_, pc) = HandFaceNet::build(&config, &face, &hand, 4).expect("build c");
    assert_ne!(pa.to_container(), pc.to_container(), "different seed, different weights");
}

#[test]
fn toy_forward_output_shapes() {
    let (net, mut params, _, _) = toy_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = random_image(&mut rng);
    let (tape, out) = eval_forward(&net, &mut params, &image);

    assert_eq!(tape.shape(out.tokens), &[180, 67]);
    assert_eq!(tape.shape(out.rough.hand_keypoints), &[21, 3]);
    assert_eq!(tape.shape(out.rough.face_keypoints), &[68, 3]);
    assert_eq!(tape.shape(out.rough.hand_vertices), &[49, 3]);
    assert_eq!(tape.shape(out.rough.face_vertices), &[42, 3]);
    assert_eq!(tape.shape(out.interaction.contact_hand), &[195, 1]);
    assert_eq!(tape.shape(out.interaction.contact_face), &[642, 1]);
    assert_eq!(tape.shape(out.interaction.deformation), &[642, 3]);
    assert_eq!(tape.shape(out.hand_params), &[1, 59]);
    assert_eq!(tape.shape(out.face_params), &[1, 19]);
    assert_eq!(tape.shape(out.hand_pose.joint_rotations), &[16, 3]);
    assert_eq!(tape.shape(out.hand_pose.shape), &[5]);
    assert_eq!(tape.shape(out.hand_pose.expression), &[0]);
    assert_eq!(tape.shape(out.face_pose.joint_rotations), &[1, 3]);
    assert_eq!(tape.shape(out.face_pose.expression), &[5]);
    assert!(out.camera_delta.is_none(), "camera prediction off by default");

    for &p in tape.value(out.interaction.contact_hand) {
        assert!(p > 0.0 && p < 1.0, "contact probability {p} outside (0,1)");
    }
    for &p in tape.value(out.interaction.contact_face) {
        assert!(p > 0.0 && p < 1.0);
    }

    // Packed parameter rows and the split pose tensors agree.
    let packed = tape.value(out.hand_params).to_vec();
    let mut rebuilt = tape.value(out.hand_pose.root_rotation).to_vec();
    rebuilt.extend_from_slice(tape.value(out.hand_pose.root_translation));
    rebuilt.extend_from_slice(tape.value(out.hand_pose.joint_rotations));
    rebuilt.extend_from_slice(tape.value(out.hand_pose.shape));
    assert_eq!(packed, rebuilt);
}

#[test]
fn full_fidelity_forward_output_shapes() {
    let (face, hand) = crate::data::make_full_models();
    let config = NetConfig::full();
    let (net, mut params) = HandFaceNet::build(&config, &face, &hand, 5).expect("build full");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = random_image(&mut rng);
    let (tape, out) = eval_forward(&net, &mut params, &image);

    assert_eq!(tape.shape(out.rough.hand_vertices), &[195, 3]);
    assert_eq!(tape.shape(out.rough.face_vertices), &[559, 3]);
    assert_eq!(tape.shape(out.interaction.contact_hand), &[778, 1]);
    assert_eq!(tape.shape(out.interaction.contact_face), &[5023, 1]);
    assert_eq!(tape.shape(out.interaction.deformation), &[5023, 3]);
    assert_eq!(tape.shape(out.hand_params), &[1, 59]);
    assert!(tape.value(out.rough.hand_vertices).iter().all(|v| v.is_finite()));
    assert!(tape.value(out.interaction.deformation).iter().all(|v| v.is_finite()));
}

#[test]
fn masking_zeroes_the_configured_token_share() {
    let (net, mut params, _, _) = toy_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let image = random_image(&mut rng);

    let (eval_tape, eval_out) = eval_forward(&net, &mut params, &image);
    assert!(eval_out.masked_tokens.is_empty(), "evaluation never masks");
    let eval_tokens = eval_tape.value(eval_out.tokens).to_vec();

    let (train_tape, train_out, _) = train_forward(&net, &mut params, &image, 303);
    let masked = &train_out.masked_tokens;
    assert_eq!(masked.len(), 54, "floor(0.30 * 180) tokens masked");
    let mut unique = masked.clone();
    unique.dedup();
    assert_eq!(unique.len(), 54, "masked tokens are distinct");
    let train_tokens = train_tape.value(train_out.tokens).to_vec();

    let width = 67;
    let hidden = 64;
    for t in 0..180 {
        let row = &train_tokens[t * width..(t + 1) * width];
        let eval_row = &eval_tokens[t * width..(t + 1) * width];
        assert_eq!(&row[hidden..], &eval_row[hidden..], "coordinates untouched at token {t}");
        if masked.binary_search(&t).is_ok() {
            assert!(row[..hidden].iter().all(|&v| v == 0.0), "masked features zeroed");
        } else {
            assert_eq!(&row[..hidden], &eval_row[..hidden], "unmasked features intact");
        }
    }

    // A different mask draw changes the masked set.
    let (_, other, _) = train_forward(&net, &mut params, &image, 304);
    assert_ne!(&other.masked_tokens, masked);

    // Training with a nonzero mask rate demands an rng.
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &mut params, true);
    assert!(net.forward(&mut f, &image, None).is_err());
}

#[test]
fn zero_mask_rate_makes_training_match_evaluation() {
    let (face, hand) = make_toy_models();
    let mut config = NetConfig::toy();
    config.mask_rate = 0.0;
    let (net, mut params) = HandFaceNet::build(&config, &face, &hand, 21).expect("build");
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let image = random_image(&mut rng);

    let bn_mean_before = params.value(params.lookup("ik_hand.block0.bn.mean").unwrap()).to_vec();
    let (eval_tape, eval_out) = eval_forward(&net, &mut params, &image);
    let (train_tape, train_out, _) = train_forward(&net, &mut params, &image, 1);
    assert!(train_out.masked_tokens.is_empty());
    assert_eq!(
        eval_tape.value(eval_out.rough.hand_vertices),
        train_tape.value(train_out.rough.hand_vertices),
        "with masking off and single-sample batches, train == eval"
    );
    assert_eq!(
        eval_tape.value(eval_out.hand_params),
        train_tape.value(train_out.hand_params)
    );
    let bn_mean_after = params.value(params.lookup("ik_hand.block0.bn.mean").unwrap()).to_vec();
    assert_eq!(bn_mean_before, bn_mean_after, "single-sample batches leave BN stats alone");
}

#[test]
fn nonzero_mask_rate_separates_training_from_evaluation() {
    let (net, mut params, _, _) = toy_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let image = random_image(&mut rng);
    let (eval_tape, eval_out) = eval_forward(&net, &mut params, &image);
    let (train_tape, train_out, _) = train_forward(&net, &mut params, &image, 55);
    let diff = eval_tape
        .value(eval_out.rough.hand_vertices)
        .iter()
        .zip(train_tape.value(train_out.rough.hand_vertices))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-12, "masking must perturb the prediction, got diff {diff}");
}

#[test]
fn forward_is_deterministic_and_order_independent() {
    let (net, mut params, _, _) = toy_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let image_a = random_image(&mut rng);
    let image_b = random_image(&mut rng);

    let (t1, o1) = eval_forward(&net, &mut params, &image_a);
    let a_first = t1.value(o1.rough.hand_vertices).to_vec();
    let (t2, o2) = eval_forward(&net, &mut params, &image_b);
    let b_second = t2.value(o2.rough.hand_vertices).to_vec();

    // Reverse processing order; per-image outputs must not change.
    let (t3, o3) = eval_forward(&net, &mut params, &image_b);
    let b_first = t3.value(o3.rough.hand_vertices).to_vec();
    let (t4, o4) = eval_forward(&net, &mut params, &image_a);
    let a_second = t4.value(o4.rough.hand_vertices).to_vec();

    assert_eq!(a_first, a_second);
    assert_eq!(b_first, b_second);
}

#[test]
fn masked_tokens_receive_no_gradient() {
    let (net, mut params, _, _) = toy_setup();
    let n = 180;
    let hidden = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let feat_data: Vec<f64> = (0..n * hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let coords: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-0.1..0.1)).collect();

    let masked: Vec<usize> = (0..n).step_by(5).collect();
    let mut keep = vec![1.0; n * hidden];
    for &t in &masked {
        keep[t * hidden..(t + 1) * hidden].fill(0.0);
    }

    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &mut params, false);
    let feat = f.tape.leaf(&[n, hidden], feat_data, true);
    let keep = f.tape.constant(&[n, hidden], keep);
    let masked_feat = f.tape.mul(feat, keep);
    let coords = f.tape.constant(&[n, 3], coords);
    let tokens = f.tape.concat(&[masked_feat, coords], 1);
    let rough = net.meshnet.forward(&mut f, tokens);
    let parts = [
        rough.hand_keypoints,
        rough.face_keypoints,
        rough.hand_vertices,
        rough.face_vertices,
    ];
    let sums: Vec<Tensor> = parts.iter().map(|&p| f.tape.sum_all(p)).collect();
    let s01 = f.tape.add(sums[0], sums[1]);
    let s23 = f.tape.add(sums[2], sums[3]);
    let probe = f.tape.add(s01, s23);
    drop(f);
    tape.backward(probe);

    let grad = tape.grad(feat).expect("leaf gradient");
    for t in 0..n {
        let row = &grad[t * hidden..(t + 1) * hidden];
        let norm: f64 = row.iter().map(|g| g * g).sum::<f64>().sqrt();
        if masked.contains(&t) {
            assert_eq!(norm, 0.0, "masked token {t} must be cut off");
        } else {
            assert!(norm > 0.0, "unmasked token {t} must receive gradient");
        }
    }
}

#[test]
fn interaction_heads_fall_back_to_bias_when_trunk_is_zeroed() {
    let (net, mut params, _, _) = toy_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let image = random_image(&mut rng);

    // Expected values from the weights alone.
    let head_b = params.value(params.lookup("inter.contact_h.b").unwrap())[0];
    let up_w = params.value(params.lookup("inter.up_h.w").unwrap()).to_vec();
    let up_b = params.value(params.lookup("inter.up_h.b").unwrap()).to_vec();
    let nh = 49;
    let vh = 195;
    let expected: Vec<f64> = (0..vh)
        .map(|v| {
            let lifted: f64 = up_w[v * nh..(v + 1) * nh].iter().map(|w| w * head_b).sum();
            let logit = lifted + up_b[v];
            1.0 / (1.0 + (-logit).exp())
        })
        .collect();

    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &mut params, false);
    let tokens = net.forward(&mut f, &image, None).expect("forward").tokens;
    let probe = net.interaction_with_zero_trunk(&mut f, tokens);
    let got = f.tape.value(probe.contact_hand).to_vec();
    drop(f);

    assert_eq!(got.len(), expected.len());
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-12, "zero-trunk contact {g} vs bias-driven {e}");
    }
}

#[test]
fn ik_rejects_resolution_mismatch_and_uses_its_skips() {
    let (net, mut params, _, _) = toy_setup();

    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &mut params, false);
    let wrong = f.tape.constant(&[1, 150], vec![0.1; 150]);
    assert!(net.ik_hand.forward(&mut f, wrong).is_err(), "resolution mismatch");

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x_data: Vec<f64> = (0..147).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let x = f.tape.constant(&[1, 147], x_data);
    let with = net.ik_hand.forward(&mut f, x).expect("forward");
    let without = net.ik_hand.forward_without_skips(&mut f, x).expect("skip-free");
    let diff = f
        .tape
        .value(with)
        .iter()
        .zip(f.tape.value(without))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-9, "skip connections must contribute, got diff {diff}");
}

#[test]
fn batch_norm_updates_running_stats_only_in_batched_training() {
    let (net, mut params, _, _) = toy_setup();
    let mean_id = params.lookup("ik_hand.block0.bn.mean").unwrap();
    let var_id = params.lookup("ik_hand.block0.bn.var").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x_data: Vec<f64> = (0..4 * 147).map(|_| rng.gen_range(-0.3..0.3)).collect();

    // Evaluation over a batch: buffers stay put.
    let before = params.value(mean_id).to_vec();
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &mut params, false);
    let x = f.tape.constant(&[4, 147], x_data.clone());
    net.ik_hand.forward(&mut f, x).expect("eval forward");
    drop(f);
    assert_eq!(params.value(mean_id), before.as_slice());

    // Batched training updates both buffers.
    let var_before = params.value(var_id).to_vec();
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &mut params, true);
    let x = f.tape.constant(&[4, 147], x_data);
    net.ik_hand.forward(&mut f, x).expect("train forward");
    drop(f);
    assert_ne!(params.value(mean_id), before.as_slice(), "running mean moved");
    assert_ne!(params.value(var_id), var_before.as_slice(), "running variance moved");
}

#[test]
fn probe_loss_reaches_convolution_weights() {
    let (net, mut params, _, _) = toy_setup();
    let conv_id = params.lookup("backbone.conv0.w").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let image = random_image(&mut rng);

    let heads: [fn(&NetOutput) -> Tensor; 5] = [
        |o| o.rough.hand_vertices,
        |o| o.rough.face_keypoints,
        |o| o.interaction.contact_hand,
        |o| o.interaction.deformation,
        |o| o.hand_params,
    ];
    for (i, pick) in heads.iter().enumerate() {
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &mut params, true);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let out = net.forward(&mut f, &image, Some(&mut mask_rng)).expect("forward");
        let probe = f.tape.sum_all(pick(&out));
        let bound = f.finish();
        tape.backward(probe);
        let grads = params.collect_gradients(&tape, &bound);
        let conv = grads
            .iter()
            .find(|(id, _)| *id == conv_id)
            .unwrap_or_else(|| panic!("head {i}: no gradient on first convolution"));
        let norm: f64 = conv.1.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm > 0.0, "head {i}: zero gradient on first convolution");
    }
}

#[test]
fn camera_head_predicts_and_applies_corrections() {
    let (face, hand) = make_toy_models();
    let mut config = NetConfig::toy();
    config.predict_camera = true;
    let (net, mut params) = HandFaceNet::build(&config, &face, &hand, 19).expect("build");
    let conv_id = params.lookup("backbone.conv0.w").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let image = random_image(&mut rng);

    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &mut params, false);
    let out = net.forward(&mut f, &image, None).expect("forward");
    let delta = out.camera_delta.expect("camera delta present");
    assert_eq!(f.tape.shape(delta), &[1, 3]);
    let probe = f.tape.sum_all(delta);
    let bound = f.finish();
    tape.backward(probe);
    let grads = params.collect_gradients(&tape, &bound);
    let conv = grads.iter().find(|(id, _)| *id == conv_id).expect("conv gradient");
    assert!(conv.1.iter().any(|&g| g != 0.0), "camera head reaches the backbone");

    let camera = crate::camrender::Camera::pinhole(300.0, 300.0, 112.0, 112.0, 224, 224);
    let corrected = apply_camera_delta(&camera, &[2.0f64.ln(), 5.0, -3.0]).expect("apply");
    assert!((corrected.fx - 600.0).abs() < 1e-12);
    assert!((corrected.fy - 600.0).abs() < 1e-12);
    assert!((corrected.cx - 117.0).abs() < 1e-12);
    assert!((corrected.cy - 109.0).abs() < 1e-12);
    assert!(apply_camera_delta(&camera, &[0.0, 1.0]).is_err(), "length check");
}

#[test]
fn discriminator_scores_are_probabilities_and_gradients_check_out() {
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let disc = Discriminator::new(&mut params, &mut rng, "d", 53);

    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &mut params, false);
    let x_data: Vec<f64> = (0..4 * 53).map(|_| randn(&mut rng)).collect();
    let x = f.tape.constant(&[4, 53], x_data);
    let p = disc.forward(&mut f, x).expect("forward");
    assert_eq!(f.tape.shape(p), &[4, 1]);
    for &v in f.tape.value(p) {
        assert!(v > 0.0 && v < 1.0, "score {v} outside (0,1)");
    }
    let bad = f.tape.constant(&[1, 13], vec![0.0; 13]);
    assert!(disc.forward(&mut f, bad).is_err(), "width mismatch");
    drop(f);

    let input: Vec<f64> = (0..53).map(|_| randn(&mut rng) * 0.5).collect();
    let cell = RefCell::new(params);
    let report = finite_diff_check(&[(vec![1, 53], input)], 1e-5, |tape, leaves| {
        let mut p = cell.borrow_mut();
        let mut f = Forward::new(tape, &mut p, false);
        let out = disc.forward(&mut f, leaves[0]).expect("forward");
        drop(f);
        tape.mean_all(out)
    });
    assert!(
        report.max_rel_err < 1e-6,
        "input gradient mismatch {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn discriminator_separates_toy_parameter_distributions() {
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let disc = Discriminator::new(&mut params, &mut rng, "d", 53);

    let draw = |rng: &mut ChaCha8Rng, center: f64, n: usize| -> Vec<f64> {
        (0..n * 53).map(|_| center + 0.1 * randn(rng)).collect()
    };
    let batch = 32;
    let mut adam = Adam::new(params.len(), 5e-3);
    for _ in 0..150 {
        let real = draw(&mut rng, 0.0, batch);
        let fake = draw(&mut rng, 1.0, batch);
        let mut x_data = real;
        x_data.extend(fake);
        let mut labels = vec![1.0; batch];
        labels.extend(vec![0.0; batch]);
        let flipped: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();

        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &mut params, true);
        let x = f.tape.constant(&[2 * batch, 53], x_data);
        let p = disc.forward(&mut f, x).expect("forward");
        let p = f.tape.clamp(p, 1e-7, 1.0 - 1e-7);
        let y = f.tape.constant(&[2 * batch, 1], labels);
        let ny = f.tape.constant(&[2 * batch, 1], flipped);
        let log_p = f.tape.log(p);
        let neg_p = f.tape.neg(p);
        let one_minus_p = f.tape.add_scalar(neg_p, 1.0);
        let log_q = f.tape.log(one_minus_p);
        let t1 = f.tape.mul(y, log_p);
        let t2 = f.tape.mul(ny, log_q);
        let s = f.tape.add(t1, t2);
        let mean = f.tape.mean_all(s);
        let loss = f.tape.neg(mean);
        let bound = f.finish();
        tape.backward(loss);
        let grads = params.collect_gradients(&tape, &bound);
        adam.step(&mut params, &grads);
    }

    let n_eval = 200;
    let mut correct = 0usize;
    for (center, label_real) in [(0.0, true), (1.0, false)] {
        let x_data = draw(&mut rng, center, n_eval);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &mut params, false);
        let x = f.tape.constant(&[n_eval, 53], x_data);
        let p = disc.forward(&mut f, x).expect("forward");
        for &v in f.tape.value(p) {
            if (v > 0.5) == label_real {
                correct += 1;
            }
        }
    }
    let accuracy = correct as f64 / (2 * n_eval) as f64;
    assert!(accuracy > 0.95, "separable distributions, got accuracy {accuracy}");
}

#[test]
fn ik_overfit_oracle_recovers_vertices_within_five_millimetres() {
    let (_, hand) = make_toy_models();
    let sampling = hand.sampling_between(195, 49).expect("hand sampling").clone();
    let mut rng = ChaCha8Rng::seed_from_u64(53);

    let n = 256;
    let in_dim = 49 * 3;
    let out_dim = 59;
    let mut x_data = Vec::with_capacity(n * in_dim);
    let mut y_data = Vec::with_capacity(n * out_dim);
    let mut coarse_gt = Vec::with_capacity(n);
    for _ in 0..n {
        let mut state = PoseState::zero(&hand);
        for j in 1..16 {
            state.joint_rotations[j * 3] = rng.gen_range(0.0..0.9);
        }
        for s in state.shape.iter_mut() {
            *s = rng.gen_range(-0.5..0.5);
        }
        for t in state.root_translation.iter_mut() {
            *t = rng.gen_range(-0.02..0.02);
        }
        let (verts, _) = lbs_forward(&hand, &state).expect("lbs");
        let coarse = resample_mesh(&verts, &sampling).expect("resample");
        x_data.extend_from_slice(&coarse);
        y_data.extend(state.pack());
        coarse_gt.push(coarse);
    }

    // Standardize regression targets per dimension so that metre-scale
    // translation and radian-scale rotations exert balanced gradient pressure.
    let mut dim_mean = vec![0.0f64; out_dim];
    let mut dim_std = vec![0.0f64; out_dim];
    for row in y_data.chunks(out_dim) {
        for (d, &v) in row.iter().enumerate() {
            dim_mean[d] += v;
        }
    }
    for m in dim_mean.iter_mut() {
        *m /= n as f64;
    }
    for row in y_data.chunks(out_dim) {
        for (d, &v) in row.iter().enumerate() {
            dim_std[d] += (v - dim_mean[d]).powi(2);
        }
    }
    for s in dim_std.iter_mut() {
        *s = (*s / n as f64).sqrt().max(1e-3);
    }
    let y_white: Vec<f64> = y_data
        .chunks(out_dim)
        .flat_map(|row| {
            row.iter()
                .enumerate()
                .map(|(d, &v)| (v - dim_mean[d]) / dim_std[d])
                .collect::<Vec<f64>>()
        })
        .collect();

    let mut params = Params::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(59);
    let ik = IkNet::new(&mut params, &mut init_rng, "ik", in_dim, 64, out_dim);
    let mut adam = Adam::new(params.len(), 3e-3);

    let vertex_rms = |params: &mut Params| -> f64 {
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, params, false);
        let x = f.tape.constant(&[n, in_dim], x_data.clone());
        let pred = ik.forward(&mut f, x).expect("forward");
        let pred = f.tape.value(pred).to_vec();
        drop(f);
        let mut sq_sum = 0.0;
        let mut vertices = 0usize;
        for i in 0..n {
            let row: Vec<f64> = pred[i * out_dim..(i + 1) * out_dim]
                .iter()
                .enumerate()
                .map(|(d, &v)| v * dim_std[d] + dim_mean[d])
                .collect();
            let state = PoseState::unpack(&hand, &row).expect("unpack");
            let (verts, _) = lbs_forward(&hand, &state).expect("lbs");
            let coarse = resample_mesh(&verts, &sampling).expect("resample");
            for (a, b) in coarse.chunks(3).zip(coarse_gt[i].chunks(3)) {
                sq_sum += (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
                vertices += 1;
            }
        }
        (sq_sum / vertices as f64).sqrt()
    };

    let mut reached = false;
    for round in 0..24 {
        if round == 12 {
            adam.lr = 1e-3;
        }
        if round == 18 {
            adam.lr = 3e-4;
        }
        for _ in 0..100 {
            let mut tape = Tape::new();
            let mut f = Forward::new(&mut tape, &mut params, true);
            let x = f.tape.constant(&[n, in_dim], x_data.clone());
            let y = f.tape.constant(&[n, out_dim], y_white.clone());
            let pred = ik.forward(&mut f, x).expect("forward");
            let diff = f.tape.sub(pred, y);
            let sq = f.tape.square(diff);
            let loss = f.tape.mean_all(sq);
            let bound = f.finish();
            tape.backward(loss);
            let grads = params.collect_gradients(&tape, &bound);
            adam.step(&mut params, &grads);
        }
        let rms = vertex_rms(&mut params);
        if rms < 0.005 {
            reached = true;
            break;
        }
        if round == 23 {
            panic!("vertex RMS stayed at {rms:.6} m after 2400 steps");
        }
    }
    assert!(reached);
}

#[test]
fn checkpoints_round_trip_and_validate() {
    let (face, hand) = make_toy_models();
    let config = NetConfig::toy();
    let (net, mut params) = HandFaceNet::build(&config, &face, &hand, 11).expect("build");
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let image = random_image(&mut rng);
    let (tape_a, out_a) = eval_forward(&net, &mut params, &image);
    let reference = tape_a.value(out_a.rough.hand_vertices).to_vec();

    let dir = std::env::temp_dir().join(format!("hf_net_test_{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join("net.ckpt");
    save_checkpoint(&path, &config, &params).expect("save");

    let (loaded_config, container) = open_checkpoint(&path).expect("open");
    assert_eq!(loaded_config, config);
    let (net_b, mut params_b) = HandFaceNet::build(&loaded_config, &face, &hand, 999).expect("rebuild");
    assert_ne!(params.to_container(), params_b.to_container(), "fresh seed differs");
    load_checkpoint(&container, &mut params_b).expect("load");
    assert_eq!(params.to_container(), params_b.to_container(), "weights restored bitwise");
    let (tape_b, out_b) = eval_forward(&net_b, &mut params_b, &image);
    assert_eq!(reference, tape_b.value(out_b.rough.hand_vertices), "identical outputs");

    // Missing weight chunk.
    let full = checkpoint_container(&config, &params).expect("container");
    let mut missing = Container::new();
    for ch in full.chunks() {
        if ch.name != "p:mesh.head.w" {
            missing.push(ch.name.clone(), ch.dims.clone(), ch.data.clone()).expect("push");
        }
    }
    assert!(load_checkpoint(&missing, &mut params_b).is_err(), "missing tensor rejected");

    // Wrong-shape weight chunk.
    let mut reshaped = Container::new();
    for ch in full.chunks() {
        if ch.name == "p:mesh.head.w" {
            let flat: Vec<usize> = vec![ch.dims.iter().product()];
            reshaped.push(ch.name.clone(), flat, ch.data.clone()).expect("push");
        } else {
            reshaped.push(ch.name.clone(), ch.dims.clone(), ch.data.clone()).expect("push");
        }
    }
    assert!(load_checkpoint(&reshaped, &mut params_b).is_err(), "shape change rejected");

    // Unsupported version.
    let mut wrong_version = params.to_container();
    wrong_version.push_i64("meta:version", vec![1], vec![99]).expect("push");
    let json = serde_json::to_vec(&config).expect("json");
    wrong_version.push_u8("meta:config", vec![json.len()], json).expect("push");
    assert!(read_checkpoint(&wrong_version).is_err(), "version rejected");

    std::fs::remove_dir_all(&dir).ok();
}
