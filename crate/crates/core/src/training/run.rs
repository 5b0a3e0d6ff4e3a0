//! A complete training run: dataset synthesis, the optimization loop,
//! line-delimited metrics logging, periodic checkpointing, and rollback
//! to the last good checkpoint if the loss ever goes non-finite.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::data::{synth_dataset, SynthConfig};
use crate::network::{checkpoint_container, load_checkpoint, save_checkpoint, NetConfig};
use crate::{Error, Result};

use super::assets::models_for;
use super::step::Trainer;
use super::LossWeights;

/// Everything a training run needs; all fields have defaults so a config
/// file may specify only what it overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Seeds network init (`seed`), the training stream (`seed + 1`), and
    /// batch ordering (`seed + 2`); dataset synthesis uses `synth.seed`.
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Fully labeled synthetic samples in the dataset.
    pub n_labeled: usize,
    /// Pseudo-labeled in-the-wild samples in the dataset.
    pub n_wild: usize,
    pub learning_rate: f64,
    pub disc_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Optional global-norm gradient clip.
    pub clip_norm: Option<f64>,
    /// Also apply the rendered keypoint-depth loss to labeled samples
    /// (targets from ground-truth keypoint depths).
    pub depth_on_labeled: bool,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    pub weights: LossWeights,
    pub net: NetConfig,
    pub synth: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            steps: 500,
            batch_size: 16,
            n_labeled: 64,
            n_wild: 16,
            learning_rate: 6e-4,
            disc_learning_rate: 6e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            clip_norm: None,
            depth_on_labeled: false,
            log_every: 10,
            checkpoint_every: 100,
            out_dir: PathBuf::from("train_out"),
            weights: LossWeights::default(),
            net: NetConfig::toy(),
            synth: SynthConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.n_labeled + self.n_wild == 0 {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if !(self.learning_rate > 0.0) || !(self.disc_learning_rate > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip_norm must be positive when set"));
            }
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid(
                "log_every and checkpoint_every must be at least 1",
            ));
        }
        self.weights.validate()?;
        self.net.validate()?;
        self.synth.validate()
    }
}

/// One line of the metrics log.
#[derive(Debug, Serialize)]
struct LogRecord {
    step: usize,
    total: f64,
    mesh: f64,
    interaction: f64,
    adversarial: f64,
    depth: f64,
    disc_hand: f64,
    disc_face: f64,
    depth_starved: usize,
    touch_empty: usize,
    collision_empty: usize,
    skipped_tensors: usize,
}

/// Summary of a finished (or aborted) run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    /// True when a non-finite loss stopped the run early; the saved
    /// weights are then the last good checkpoint (or the initial weights
    /// if none was written yet).
    pub aborted: bool,
    pub steps_run: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Runs the full loop described by the configuration and writes
/// `metrics.jsonl`, `checkpoint.bin` (periodic), `checkpoint_final.bin`,
/// and `report.json` into `out_dir`.
pub fn run_training(config: &TrainConfig) -> Result<RunReport> {
    config.validate()?;
    let (face, hand) = models_for(&config.net)?;
    let dataset = synth_dataset(&face, &hand, &config.synth, config.n_labeled, config.n_wild)?;
    let mut trainer = Trainer::new(config)?;
    fs::create_dir_all(&config.out_dir)?;
    let log_path = config.out_dir.join("metrics.jsonl");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();

    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut last_good: Option<Container> = None;
    let mut aborted = false;
    let mut steps_run = 0;
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&dataset[order[cursor]]);
            cursor += 1;
        }
        let stats = trainer.train_step(&batch)?;
        steps_run = step;
        if step == 1 {
            first_loss = stats.total;
        }
        final_loss = stats.total;
        if step == 1 || step == config.steps || step % config.log_every == 0 {
            let skipped_tensors = stats.generator.skipped.len()
                + stats
                    .disc_hand_update
                    .as_ref()
                    .map_or(0, |u| u.skipped.len())
                + stats
                    .disc_face_update
                    .as_ref()
                    .map_or(0, |u| u.skipped.len());
            let record = LogRecord {
                step,
                total: stats.total,
                mesh: stats.mesh,
                interaction: stats.interaction,
                adversarial: stats.adversarial,
                depth: stats.depth,
                disc_hand: stats.disc_hand,
                disc_face: stats.disc_face,
                depth_starved: stats.depth_starved,
                touch_empty: stats.touch_empty,
                collision_empty: stats.collision_empty,
                skipped_tensors,
            };
            serde_json::to_writer(&mut log, &record)?;
            writeln!(log)?;
        }
        if !stats.total.is_finite() {
            aborted = true;
            if let Some(c) = &last_good {
                load_checkpoint(c, &mut trainer.params)?;
            }
            break;
        }
        if step % config.checkpoint_every == 0 {
            let c = checkpoint_container(&config.net, &trainer.params)?;
            c.write_to(&config.out_dir.join("checkpoint.bin"))?;
            last_good = Some(c);
        }
    }
    log.flush()?;

    let checkpoint_path = config.out_dir.join("checkpoint_final.bin");
    save_checkpoint(&checkpoint_path, &config.net, &trainer.params)?;
    let report = RunReport {
        aborted,
        steps_run,
        first_loss,
        final_loss,
        checkpoint: checkpoint_path,
        log: log_path,
    };
    fs::write(
        config.out_dir.join("report.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(report)
}
