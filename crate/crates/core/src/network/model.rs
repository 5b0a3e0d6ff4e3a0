//! Whole-network assembly and checkpoint persistence.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::container::Container;
use crate::meshcore::{regress_keypoints, resample_mesh, ParametricModel, PoseTensors};
use crate::{Error, Result};

use super::backbone::{ConvBackbone, N_FEATURE_TOKENS};
use super::branches::{InteractionNet, InteractionPrediction, MeshNet, RoughPrediction, TokenBuilder};
use super::disc::{CameraHead, Discriminator};
use super::ik::IkNet;
use super::params::{Forward, Params};
use super::NetConfig;

/// Checkpoint container format version.
pub const CHECKPOINT_VERSION: i64 = 1;

const META_VERSION: &str = "meta:version";
const META_CONFIG: &str = "meta:config";

/// Everything one forward pass produces, as tape handles.
pub struct NetOutput {
    /// Backbone feature tokens, `[49, H]`.
    pub features: Tensor,
    /// Full token matrix after upsampling/tagging, `[N, H+3]`.
    pub tokens: Tensor,
    /// Indices of tokens whose features were masked (empty at eval).
    pub masked_tokens: Vec<usize>,
    pub rough: RoughPrediction,
    pub interaction: InteractionPrediction,
    /// Packed hand parameters, `[1, 6 + 3J + S]`.
    pub hand_params: Tensor,
    /// Packed face parameters, `[1, 6 + 3J + S + E]`.
    pub face_params: Tensor,
    pub hand_pose: PoseTensors,
    pub face_pose: PoseTensors,
    /// `[1, 3]` weak-perspective correction when camera prediction is on.
    pub camera_delta: Option<Tensor>,
}

/// The complete regression network; weights live in a caller-owned
/// [`Params`] store created alongside it by [`HandFaceNet::build`].
pub struct HandFaceNet {
    pub config: NetConfig,
    backbone: ConvBackbone,
    token_builder: TokenBuilder,
    pub meshnet: MeshNet,
    pub interaction: InteractionNet,
    pub ik_hand: IkNet,
    pub ik_face: IkNet,
    pub disc_hand: Discriminator,
    pub disc_face: Discriminator,
    pub camera_head: CameraHead,
}

/// Zero-pose coordinates for every token, in token order.
fn token_coordinates(
    config: &NetConfig,
    face: &ParametricModel,
    hand: &ParametricModel,
) -> Result<Vec<f64>> {
    let mut coords = Vec::with_capacity(config.tokens() * 3);
    coords.extend(regress_keypoints(&hand.template, &hand.keypoint_regressor)?);
    coords.extend(regress_keypoints(&face.template, &face.keypoint_regressor)?);
    coords.extend(coarse_template(hand, config.hand_tokens)?);
    coords.extend(coarse_template(face, config.face_tokens)?);
    Ok(coords)
}

fn coarse_template(model: &ParametricModel, tokens: usize) -> Result<Vec<f64>> {
    if tokens == model.n_vertices() {
        return Ok(model.template.clone());
    }
    let sampling = model
        .sampling_between(model.n_vertices(), tokens)
        .ok_or_else(|| {
            Error::invalid(format!(
                "model '{}' has no sampling matrix from {} to {tokens} vertices",
                model.name,
                model.n_vertices()
            ))
        })?;
    resample_mesh(&model.template, sampling)
}

fn check_model(
    which: &str,
    model: &ParametricModel,
    vertices: usize,
    joints: usize,
    shape: usize,
    expression: usize,
    keypoints: usize,
) -> Result<()> {
    let got = (
        model.n_vertices(),
        model.n_joints(),
        model.n_shape(),
        model.n_expression(),
        model.n_keypoints(),
    );
    let want = (vertices, joints, shape, expression, keypoints);
    if got != want {
        return Err(Error::invalid(format!(
            "{which} model '{}' has (V, J, S, E, K) = {got:?}, config expects {want:?}",
            model.name
        )));
    }
    Ok(())
}

impl HandFaceNet {
    /// Builds the architecture and a freshly initialized parameter store
    /// (Kaiming-uniform weights, zero biases) from `seed`.
    pub fn build(
        config: &NetConfig,
        face: &ParametricModel,
        hand: &ParametricModel,
        seed: u64,
    ) -> Result<(Self, Params)> {
        config.validate()?;
        check_model(
            "hand",
            hand,
            config.hand_vertices,
            config.hand_joints,
            config.hand_shape,
            0,
            config.hand_keypoints,
        )?;
        check_model(
            "face",
            face,
            config.face_vertices,
            config.face_joints,
            config.face_shape,
            config.face_expression,
            config.face_keypoints,
        )?;

        let coords = token_coordinates(config, face, hand)?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.layout();
        let token_dim = config.hidden + 3;

        let backbone = ConvBackbone::new(&mut params, &mut rng, "backbone", &config.backbone_channels)?;
        let token_builder = TokenBuilder::new(
            &mut params,
            &mut rng,
            "tokens",
            N_FEATURE_TOKENS,
            config.tokens(),
            config.hidden,
            config.mask_rate,
            coords,
        );
        let meshnet = MeshNet::new(
            &mut params,
            &mut rng,
            "mesh",
            token_dim,
            &config.mesh_dims,
            config.layers_per_block,
            config.heads,
            config.ffn_mult,
            layout,
        );
        let interaction = InteractionNet::new(
            &mut params,
            &mut rng,
            "inter",
            token_dim,
            &config.interaction_dims,
            config.layers_per_block,
            config.heads,
            config.ffn_mult,
            layout,
            config.hand_vertices,
            config.face_vertices,
        );
        let ik_hand = IkNet::new(
            &mut params,
            &mut rng,
            "ik_hand",
            config.hand_tokens * 3,
            config.ik_hidden,
            config.hand_param_dim(),
        );
        let ik_face = IkNet::new(
            &mut params,
            &mut rng,
            "ik_face",
            config.face_tokens * 3,
            config.ik_hidden,
            config.face_param_dim(),
        );
        let disc_hand = Discriminator::new(&mut params, &mut rng, "disc_hand", config.hand_disc_dim());
        let disc_face = Discriminator::new(&mut params, &mut rng, "disc_face", config.face_disc_dim());
        let camera_head = CameraHead::new(&mut params, &mut rng, "camera", config.hidden);

        Ok((
            Self {
                config: config.clone(),
                backbone,
                token_builder,
                meshnet,
                interaction,
                ik_hand,
                ik_face,
                disc_hand,
                disc_face,
                camera_head,
            },
            params,
        ))
    }

    /// Full forward pass over one image. `rng` drives token masking and
    /// is required when the pass runs in training mode with a nonzero
    /// mask rate; evaluation ignores it.
    pub fn forward(
        &self,
        f: &mut Forward,
        image: &[f64],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NetOutput> {
        let features = self.backbone.forward(f, image)?;
        let (tokens, masked_tokens) = self.token_builder.forward(f, features, rng)?;
        let rough = self.meshnet.forward(f, tokens);
        let interaction = self.interaction.forward(f, tokens);

        let hand_flat = f
            .tape
            .reshape(rough.hand_vertices, &[1, self.config.hand_tokens * 3]);
        let hand_params = self.ik_hand.forward(f, hand_flat)?;
        let face_flat = f
            .tape
            .reshape(rough.face_vertices, &[1, self.config.face_tokens * 3]);
        let face_params = self.ik_face.forward(f, face_flat)?;

        let hand_pose = split_pose(
            f,
            hand_params,
            self.config.hand_joints,
            self.config.hand_shape,
            0,
        );
        let face_pose = split_pose(
            f,
            face_params,
            self.config.face_joints,
            self.config.face_shape,
            self.config.face_expression,
        );

        let camera_delta = self
            .config
            .predict_camera
            .then(|| self.camera_head.forward(f, features));

        Ok(NetOutput {
            features,
            tokens,
            masked_tokens,
            rough,
            interaction,
            hand_params,
            face_params,
            hand_pose,
            face_pose,
            camera_delta,
        })
    }

    /// Probe hook: interaction branch with its trunk output zeroed.
    #[cfg(test)]
    pub(crate) fn interaction_with_zero_trunk(
        &self,
        f: &mut Forward,
        tokens: Tensor,
    ) -> InteractionPrediction {
        self.interaction.forward_inner(f, tokens, true)
    }
}

/// Splits a packed `[1, 6 + 3J + S + E]` parameter row into pose tensors
/// (packing order: root rotation, root translation, joint rotations,
/// shape, expression).
fn split_pose(f: &mut Forward, packed: Tensor, joints: usize, shape: usize, expression: usize) -> PoseTensors {
    let mut at = 0;
    let mut take = |f: &mut Forward, n: usize, out_shape: &[usize]| {
        let cols = f.tape.slice_cols(packed, at, at + n);
        at += n;
        f.tape.reshape(cols, out_shape)
    };
    PoseTensors {
        root_rotation: take(f, 3, &[3]),
        root_translation: take(f, 3, &[3]),
        joint_rotations: take(f, 3 * joints, &[joints, 3]),
        shape: take(f, shape, &[shape]),
        expression: take(f, expression, &[expression]),
    }
}

/// Bundles weights, buffers, the configuration and a format version into
/// one self-describing container.
pub fn checkpoint_container(config: &NetConfig, params: &Params) -> Result<Container> {
    let mut c = params.to_container();
    c.push_i64(META_VERSION, vec![1], vec![CHECKPOINT_VERSION])?;
    let json = serde_json::to_vec(config)?;
    c.push_u8(META_CONFIG, vec![json.len()], json)?;
    Ok(c)
}

/// Reads the configuration back out of a checkpoint container.
pub fn read_checkpoint(c: &Container) -> Result<NetConfig> {
    let (_, version) = c.get_i64(META_VERSION)?;
    if version != [CHECKPOINT_VERSION] {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version:?}, expected [{CHECKPOINT_VERSION}]"
        )));
    }
    let (_, json) = c.get_u8(META_CONFIG)?;
    let config: NetConfig = serde_json::from_slice(json)?;
    config.validate()?;
    Ok(config)
}

/// Overwrites `params` from a checkpoint container, validating the
/// version and every tensor's shape.
pub fn load_checkpoint(c: &Container, params: &mut Params) -> Result<()> {
    let (_, version) = c.get_i64(META_VERSION)?;
    if version != [CHECKPOINT_VERSION] {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version:?}, expected [{CHECKPOINT_VERSION}]"
        )));
    }
    params.load_container(c)
}

/// Writes a checkpoint file.
pub fn save_checkpoint(path: &Path, config: &NetConfig, params: &Params) -> Result<()> {
    checkpoint_container(config, params)?.write_to(path)
}

/// Reads a checkpoint file, returning its configuration and the raw
/// container (pass the latter to [`load_checkpoint`] once the parameter
/// store has been rebuilt).
pub fn open_checkpoint(path: &Path) -> Result<(NetConfig, Container)> {
    let c = Container::read_from(path)?;
    let config = read_checkpoint(&c)?;
    Ok((config, c))
}
