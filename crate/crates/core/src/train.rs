//! Training configuration, the two-stage ω_w schedule and the training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, DatasetSpec};
use crate::distort::{attack_on, sample_noise, NoiseDistribution, NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::inn::{Architecture, CouplingStack, Init, Z_CONSTANT};
use crate::loss::{total_loss_on, LossComponents, LossTerms, LossVars, LossWeights};
use crate::msgcodec::{decode_message, group_bits, message_tensor, BitMessage};
use crate::optim::{AdamConfig, AdamState};
use crate::tape::{GradTape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Robustness,
    Imperceptibility,
}

/// Weight of the imperceptibility loss.
pub fn omega_w_schedule(stage: Stage, identity_only: bool) -> f64 {
    match (identity_only, stage) {
        (true, _) => 32.0,
        (false, Stage::Robustness) => 0.1,
        (false, Stage::Imperceptibility) => 48.0,
    }
}

/// When to leave the robustness stage: once the mean training bit accuracy
/// over the last `window` steps beats the window before it by less than
/// `min_gain`, or when the stage reaches `max_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSwitch {
    pub window: u64,
    pub min_gain: f64,
    pub min_steps: u64,
    pub max_steps: Option<u64>,
}

impl Default for StageSwitch {
    fn default() -> Self {
        Self { window: 200, min_gain: 0.005, min_steps: 400, max_steps: None }
    }
}

impl StageSwitch {
    /// `history` holds one accuracy per step of the current stage.
    pub fn should_switch(&self, history: &[f64]) -> bool {
        let len = history.len() as u64;
        if self.max_steps.is_some_and(|cap| len >= cap) {
            return true;
        }
        let w = self.window.max(1) as usize;
        if len < self.min_steps.max(2 * w as u64) {
            return false;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let n = history.len();
        mean(&history[n - w..]) - mean(&history[n - 2 * w..n - w]) < self.min_gain
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub bits: usize,
    pub groups: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub augment: bool,
    pub heldout_fraction: f64,
    pub noise: NoiseDistribution,
    pub w_m: f64,
    pub w_z: f64,
    pub w_c: f64,
    pub stage_switch: StageSwitch,
    pub max_steps: u64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 6,
            blocks: 16,
            hidden: 32,
            bits: 30,
            groups: 10,
            image_size: 128,
            patch_size: 480,
            augment: true,
            heldout_fraction: 0.05,
            noise: NoiseDistribution::default(),
            w_m: 1.0,
            w_z: 1.0,
            w_c: 0.1,
            stage_switch: StageSwitch::default(),
            max_steps: 100_000,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        group_bits(self.bits, self.groups).map_err(cfg)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config("learning rate, batch size and hidden width must be positive".into()));
        }
        self.architecture().validate().map_err(cfg)?;
        self.dataset_spec().validate()?;
        self.noise.validate()?;
        self.loss_weights(Stage::Robustness).validate()?;
        // every attack with a rectangle must fit the training size
        let i = &self.noise.intensities;
        for (kind, p) in [(NoiseKind::Crop, i.crop_p), (NoiseKind::Cropout, i.cropout_p)] {
            if self.noise.weights.get(&kind).copied().unwrap_or(0.0) > 0.0 {
                crate::distort::crop_size(p, self.image_size, self.image_size).map_err(cfg)?;
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { hidden: self.hidden, ..Architecture::new(self.blocks, self.groups) }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            patch_size: self.patch_size,
            image_size: self.image_size,
            augment: self.augment,
            heldout_fraction: self.heldout_fraction,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }

    pub fn loss_weights(&self, stage: Stage) -> LossWeights {
        LossWeights {
            w_w: omega_w_schedule(stage, self.noise.is_identity_only()),
            w_m: self.w_m,
            w_z: self.w_z,
            w_c: self.w_c,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// One record of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub noise: NoiseKind,
    pub l_w: f64,
    pub l_m: f64,
    pub l_z: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub omega_w: f64,
    pub stage: Stage,
    /// Mean bit accuracy over the batch.
    pub bit_acc: f64,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for batch item `index` of `step`; the batch-level
/// stream uses `index = u64::MAX`.
pub fn item_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(step ^ splitmix(index))))
}

fn reseed(spec: NoiseSpec, seed: u64) -> NoiseSpec {
    match spec {
        NoiseSpec::Crop { p, .. } => NoiseSpec::Crop { p, seed },
        NoiseSpec::Cropout { p, .. } => NoiseSpec::Cropout { p, seed },
        NoiseSpec::Dropout { p, .. } => NoiseSpec::Dropout { p, seed },
        other => other,
    }
}

/// Fraction of equal bits.
pub fn bit_agreement(a: &BitMessage, b: &BitMessage) -> f64 {
    let same = a.bits().iter().zip(b.bits()).filter(|(x, y)| x == y).count();
    same as f64 / a.len().max(1) as f64
}

pub struct Trainer {
    config: TrainConfig,
    stack: CouplingStack<f32>,
    adam: AdamState<f32>,
    step: u64,
    stage: Stage,
    stage_history: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let stack = CouplingStack::new(config.architecture(), Init::IdentityStart { seed: config.seed })?;
        let adam = AdamState::new(stack.params());
        Ok(Self { config, stack, adam, step: 0, stage: Stage::Robustness, stage_history: Vec::new() })
    }

    /// Continues from a checkpoint under a (possibly different) config. The
    /// stage schedule restarts in the robustness stage.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if ckpt.arch != config.architecture() {
            return Err(Error::Config(format!(
                "checkpoint architecture {:?} differs from config {:?}",
                ckpt.arch,
                config.architecture()
            )));
        }
        let stack = ckpt.stack()?;
        let adam = ckpt.optimizer.clone().unwrap_or_else(|| AdamState::new(stack.params()));
        Ok(Self { config, stack, adam, step: ckpt.step, stage: Stage::Robustness, stage_history: Vec::new() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn stack(&self) -> &CouplingStack<f32> {
        &self.stack
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: Some(self.config.to_json()),
            optimizer: Some(self.adam.clone()),
            ..Checkpoint::new(&self.stack, self.step)
        }
    }

    /// One optimizer step over a freshly sampled batch.
    pub fn train_step(&mut self, data: &Dataset) -> Result<LossReport> {
        let cfg = &self.config;
        let step = self.step;
        let spec = sample_noise(&cfg.noise, &mut item_rng(cfg.seed, step, u64::MAX))?;
        let weights = cfg.loss_weights(self.stage);
        let c = cfg.groups;
        let params = self.stack.params();
        let mut grads: Vec<Tensor<f32>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        let mut sums = LossComponents::default();
        let mut acc = 0.0;
        let inv_batch = 1.0 / cfg.batch_size as f32;

        for index in 0..cfg.batch_size {
            let mut rng = item_rng(cfg.seed, step, index as u64);
            let cover = data.sample_training_item(&mut rng);
            let msg = BitMessage::random(&mut rng, cfg.bits, c)?;
            let item_spec = reseed(spec, rng.gen());
            let (h, w, _) = cover.hwc()?;

            let mut tape = GradTape::new();
            let cover_v = tape.constant(cover);
            let m_in = tape.constant(message_tensor(&msg, h, w));
            let item = item_loss_on(&self.stack, &mut tape, cover_v, m_in, &item_spec, &weights, true)?;
            let (vars, m_out) = (item.loss, item.m_out);
            let parts = vars.read(&tape);
            if !parts.l_total.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            let g = tape.backward(vars.total)?.for_store(params);
            for (acc_g, gi) in grads.iter_mut().zip(&g) {
                for (a, &b) in acc_g.data_mut().iter_mut().zip(gi.data()) {
                    *a += b * inv_batch;
                }
            }
            sums.l_w += parts.l_w;
            sums.l_m += parts.l_m;
            sums.l_z += parts.l_z;
            sums.l_c += parts.l_c;
            sums.l_total += parts.l_total;
            acc += bit_agreement(&msg, &decode_message(tape.value(m_out), cfg.bits, c)?);
        }

        let adam_cfg = cfg.adam();
        if let Err(e) = self.adam.step(&adam_cfg, self.stack.params_mut(), &grads) {
            log::warn!("step {step}: update skipped ({e})");
        }
        let n = self.config.batch_size as f64;
        let report = LossReport {
            step,
            noise: spec.kind(),
            l_w: sums.l_w / n,
            l_m: sums.l_m / n,
            l_z: sums.l_z / n,
            l_c: sums.l_c / n,
            l_total: sums.l_total / n,
            omega_w: weights.w_w,
            stage: self.stage,
            bit_acc: acc / n,
        };
        self.step += 1;
        self.stage_history.push(report.bit_acc);
        if self.stage == Stage::Robustness && self.config.stage_switch.should_switch(&self.stage_history) {
            log::info!("step {}: switching to the imperceptibility stage", self.step);
            self.stage = Stage::Imperceptibility;
            self.stage_history.clear();
        }
        Ok(report)
    }
}

/// Loss graph of one training item.
pub struct ItemLoss {
    pub loss: LossVars,
    pub watermarked: Var,
    pub m_out: Var,
}

/// Builds embed → (optional 8-bit rounding) → attack → blind extract → loss
/// on `tape`. Without `quantize` the graph is smooth, which is what finite
/// difference checks need.
pub fn item_loss_on<T: Real>(
    stack: &CouplingStack<T>,
    tape: &mut GradTape<T>,
    cover: Var,
    m_in: Var,
    spec: &NoiseSpec,
    weights: &LossWeights,
    quantize: bool,
) -> Result<ItemLoss> {
    let (h, w, _) = tape.value(cover).hwc()?;
    let c = tape.value(m_in).channels();
    let z_const = T::lit(Z_CONSTANT);
    let (z_hat, wm) = stack.embed_on(tape, m_in, cover)?;
    let sent = if quantize { tape.quantize_ste(wm) } else { wm };
    let attacked = attack_on(tape, spec, sent, Some(cover))?;
    let (nh, nw, _) = tape.value(attacked.noised).hwc()?;
    let z_in = tape.constant(Tensor::full(&[nh, nw, c], z_const));
    let (m_out, cover_rec) = stack.extract_on(tape, z_in, attacked.noised)?;
    let z = tape.constant(Tensor::full(&[h, w, c], z_const));
    let terms = LossTerms { cover, watermarked: wm, m_in, m_out, z_hat, z, cover_rec };
    let loss = total_loss_on(tape, &terms, weights, attacked.region)?;
    Ok(ItemLoss { loss, watermarked: wm, m_out })
}

/// Where [`train`] writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines metric log, one record per step.
    pub log: Option<PathBuf>,
}

/// Runs `trainer` up to its configured `max_steps`, streaming the metric log
/// and writing checkpoints at the configured cadence and at the end. On a
/// non-finite loss the last written checkpoint is left in place.
pub fn run(trainer: &mut Trainer, data: &Dataset, out: &TrainOutputs) -> Result<Vec<LossReport>> {
    let mut log = match &out.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let save = |trainer: &Trainer, path: &Option<PathBuf>| -> Result<()> {
        match path {
            Some(p) => trainer.checkpoint().save(p),
            None => Ok(()),
        }
    };
    let mut reports = Vec::new();
    let every = trainer.config.checkpoint_every;
    while trainer.step < trainer.config.max_steps {
        let report = trainer.train_step(data)?;
        if let (Some(w), Some(p)) = (log.as_mut(), &out.log) {
            writeln!(w, "{}", report.to_json_line()).map_err(|e| Error::io(p, e))?;
        }
        if report.step % 100 == 0 {
            log::info!(
                "step {} {} total {:.4} bit acc {:.3}",
                report.step,
                report.noise,
                report.l_total,
                report.bit_acc
            );
        }
        reports.push(report);
        if every > 0 && trainer.step.is_multiple_of(every) {
            if let (Some(w), Some(p)) = (log.as_mut(), &out.log) {
                w.flush().map_err(|e| Error::io(p, e))?;
            }
            save(trainer, &out.checkpoint)?;
        }
    }
    if let (Some(mut w), Some(p)) = (log, &out.log) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    save(trainer, &out.checkpoint)?;
    Ok(reports)
}

/// Trains a fresh model from `config` on `data`.
pub fn train(config: &TrainConfig, data: &Dataset, out: &TrainOutputs) -> Result<(Trainer, Vec<LossReport>)> {
    let mut trainer = Trainer::new(config.clone())?;
    let reports = run(&mut trainer, data, out)?;
    Ok((trainer, reports))
}

/// Reads a JSON config file.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrainConfig::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        for stage in [Stage::Robustness, Stage::Imperceptibility] {
            assert_eq!(omega_w_schedule(stage, true), 32.0);
        }
        assert_eq!(omega_w_schedule(Stage::Robustness, false), 0.1);
        assert_eq!(omega_w_schedule(Stage::Imperceptibility, false), 48.0);
    }

    #[test]
    fn stage_switch_rules() {
        let sw = StageSwitch { window: 10, min_gain: 0.005, min_steps: 0, max_steps: Some(100) };
        let rising: Vec<f64> = (0..30).map(|i| 0.5 + 0.01 * i as f64).collect();
        assert!(!sw.should_switch(&rising));
        let flat = vec![0.8; 30];
        assert!(sw.should_switch(&flat));
        assert!(!sw.should_switch(&flat[..15]), "needs two full windows");
        // still improving, but the stage cap is reached
        let steep: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(sw.should_switch(&steep));
        let floor = StageSwitch { min_steps: 50, ..sw };
        assert!(!floor.should_switch(&flat));
    }

    #[test]
    fn config_validation_and_json() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert!(TrainConfig::from_json(r#"{"bits": 30, "groups": 7}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"lr": -1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"unknown": 1}"#).is_err());
        let partial = TrainConfig::from_json(r#"{"blocks": 4, "bits": 10, "groups": 5}"#).unwrap();
        assert_eq!(partial.blocks, 4);
        assert_eq!(partial.lr, 2e-4);
        // the default crop would leave less than 8×8 of a 32×32 image
        assert!(TrainConfig::from_json(r#"{"image_size": 32}"#).is_err());
    }

    #[test]
    fn item_streams_differ() {
        let a: u64 = item_rng(1, 2, 3).gen();
        assert_eq!(a, item_rng(1, 2, 3).gen::<u64>());
        assert_ne!(a, item_rng(1, 2, 4).gen::<u64>());
        assert_ne!(a, item_rng(1, 3, 3).gen::<u64>());
        assert_ne!(a, item_rng(2, 2, 3).gen::<u64>());
    }
}
