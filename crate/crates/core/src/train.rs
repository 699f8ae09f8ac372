//! Adam training loop with step-decay learning rate, JSON-lines logging,
//! periodic checkpoints and exact resumption.
//!
//! Batch order is a pure function of `(seed, step)`: each epoch draws a
//! permutation from `(seed, epoch)`, so resuming needs only the step count,
//! the weights and the Adam moments.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{put_model, take_model, CheckpointMeta, Container, FORMAT_VERSION};
use crate::corpus::{load_samples, Access};
use crate::degrade::TrainingSample;
use crate::error::{Error, Result};
use crate::image::batch_to_tensor;
use crate::loss::{loss_gradient, LossBreakdown, LossType, Targets};
use crate::model::{Ablation, ModelConfig, Pslnet};
use crate::nn::ConvGraph;
use crate::perception::PerceptionNet;
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Toggles {
    pub interactions_on: bool,
    pub em_on: bool,
    pub texture_loss_on: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            interactions_on: true,
            em_on: true,
            texture_loss_on: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: u64,
    pub lr0: f64,
    pub decay_every: u64,
    pub decay_factor: f64,
    pub lambda: f64,
    pub seed: u64,
    pub losstype: LossType,
    pub toggles: Toggles,
    pub adam: AdamConfig,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    /// Write a checkpoint every N steps (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    /// Perception network weights; a fixed-seed initialisation when absent.
    pub pn_weights: Option<PathBuf>,
    pub pn_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::paper(),
            batch_size: 8,
            epochs: 100,
            lr0: 1e-3,
            decay_every: 30,
            decay_factor: 0.1,
            lambda: 0.01,
            seed: 0,
            losstype: LossType::L1,
            toggles: Toggles::default(),
            adam: AdamConfig::default(),
            max_steps: None,
            checkpoint_every: 1000,
            pn_weights: None,
            pn_seed: 0x5eed,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: base-8 widths, batch 4, 2000 steps.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            batch_size: 4,
            max_steps: Some(2000),
            checkpoint_every: 500,
            ..Self::default()
        }
    }

    pub fn paper() -> Self {
        Self::default()
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected toy or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config("lr0 must be > 0".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must be in (0, 1]".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be >= 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config("adam betas must be in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    /// λ actually used: zero when the texture loss is switched off.
    pub fn effective_lambda(&self) -> f64 {
        if self.toggles.texture_loss_on {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            interactions: self.toggles.interactions_on,
            enhancement: self.toggles.em_on,
        }
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn perception_net(&self) -> Result<PerceptionNet<f32>> {
        match &self.pn_weights {
            Some(p) => PerceptionNet::load(p),
            None => Ok(PerceptionNet::seeded(self.pn_seed)),
        }
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`, evaluated as a division by
/// the inverse factor so decimal schedules stay exact (`1e-3 → 1e-6`).
pub fn lr_at(epoch: u64, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.decay_every).min(i32::MAX as u64) as i32;
    cfg.lr0 / (1.0 / cfg.decay_factor).powi(k)
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub model: Pslnet<f32>,
    /// Adam first and second moments, flattened in parameter order.
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Lowest batch loss seen so far and the step it occurred at.
    pub best: Option<(f64, u64)>,
}

#[derive(Serialize, Deserialize)]
struct StateExtra {
    train_config: TrainConfig,
    epoch: u64,
    best: Option<(f64, u64)>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Pslnet::seeded(cfg.model.clone(), derive_seed(cfg.seed, 0, "init"))?;
        let n = model.param_count();
        Ok(Self {
            step: 0,
            model,
            m: vec![0.0; n],
            v: vec![0.0; n],
            best: None,
        })
    }

    /// Writes a checkpoint that [`crate::checkpoint::load_model`] can also read.
    pub fn save(&self, path: &Path, cfg: &TrainConfig, steps_per_epoch: u64) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            model: self.model.config.clone(),
            step: self.step,
            seed: cfg.seed,
            extra: serde_json::to_value(StateExtra {
                train_config: cfg.clone(),
                epoch: self.step / steps_per_epoch.max(1),
                best: self.best,
            })?,
        };
        let mut c = Container::new(serde_json::to_value(meta)?);
        put_model(&mut c, "", &self.model);
        c.insert("optim.m", self.m.clone());
        c.insert("optim.v", self.v.clone());
        c.write(path)
    }

    /// Restores a state and the config it was trained with.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let c = Container::read(path)?;
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
        }
        let extra: StateExtra = serde_json::from_value(meta.extra)
            .map_err(|e| Error::Checkpoint(format!("{}: not a training checkpoint ({e})", path.display())))?;
        let mut model = Pslnet::new(meta.model)?;
        take_model(&c, "", &mut model)?;
        let n = model.param_count();
        let moment = |name: &str| -> Result<Vec<f32>> {
            match c.tensor(name) {
                Some(d) if d.len() == n => Ok(d.to_vec()),
                _ => Err(Error::Checkpoint(format!("{name}: missing or wrong length"))),
            }
        };
        let state = Self {
            step: meta.step,
            model,
            m: moment("optim.m")?,
            v: moment("optim.v")?,
            best: extra.best,
        };
        Ok((state, extra.train_config))
    }
}

/// One Adam step on one batch at learning rate `lr`. Returns the loss
/// measured before the update.
pub fn train_step(
    state: &mut TrainState,
    pn: &PerceptionNet<f32>,
    batch: &[&TrainingSample],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let gather = |f: fn(&TrainingSample) -> &crate::image::Image| {
        batch_to_tensor::<f32>(&batch.iter().map(|s| f(s)).collect::<Vec<_>>())
    };
    let input = gather(|s| &s.input)?;
    let denoise = gather(|s| &s.denoise_target)?;
    let removal = gather(|s| &s.removal_target)?;
    let targets = Targets {
        denoise: &denoise,
        removal: &removal,
    };
    let grads = loss_gradient(
        &state.model,
        pn,
        &input,
        &targets,
        cfg.effective_lambda(),
        cfg.losstype,
        cfg.ablation(),
    )?;
    let breakdown = grads.breakdown;
    if !breakdown.is_finite() {
        return Err(Error::Divergence {
            step: state.step,
            breakdown,
        });
    }

    let t = (state.step + 1) as i32;
    let AdamConfig { beta1, beta2, eps } = cfg.adam;
    let c1 = (1.0 - beta1.powi(t)) as f32;
    let c2 = (1.0 - beta2.powi(t)) as f32;
    let (b1, b2, eps, lr) = (beta1 as f32, beta2 as f32, eps as f32, lr as f32);
    let g: Vec<f32> = grads.params.named_params().iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
    let (m, v) = (&mut state.m, &mut state.v);
    let mut i = 0;
    state.model.for_each_param_mut(&mut |_, p| {
        for w in p.data_mut() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
            i += 1;
        }
    });
    state.step += 1;
    if state.best.is_none_or(|(b, _)| breakdown.total < b) {
        state.best = Some((breakdown.total, state.step));
    }
    Ok(breakdown)
}

/// Sample indices of batch `index` within `epoch`.
pub fn batch_indices(n_samples: usize, batch_size: usize, seed: u64, epoch: u64, index: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut stream(seed, epoch, "shuffle"));
    order
        .into_iter()
        .skip(index as usize * batch_size)
        .take(batch_size)
        .collect()
}

pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> u64 {
    n_samples.div_ceil(batch_size) as u64
}

#[derive(Serialize)]
struct LogLine {
    step: u64,
    epoch: u64,
    lr: f64,
    #[serde(flatten)]
    loss: LossBreakdown,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

/// Trains on `samples` (which must not carry clean images), writing the log
/// and checkpoints into `out_dir`. With `resume`, continues from that
/// state instead of a fresh initialisation. Returns the final checkpoint.
pub fn fit(samples: &[TrainingSample], cfg: &TrainConfig, out_dir: &Path, resume: Option<TrainState>) -> Result<PathBuf> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Parameter("no training samples".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pn = cfg.perception_net()?;
    let spe = steps_per_epoch(samples.len(), cfg.batch_size);
    let total = (cfg.epochs * spe).min(cfg.max_steps.unwrap_or(u64::MAX));
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(cfg)?,
    };
    if state.model.config != cfg.model {
        return Err(Error::Config("resumed model config differs from the training config".into()));
    }

    let log_path = out_dir.join(LOG_FILE);
    let log_file = if state.step == 0 {
        File::create(&log_path)
    } else {
        OpenOptions::new().create(true).append(true).open(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);

    while state.step < total {
        let epoch = state.step / spe;
        let idx = batch_indices(samples.len(), cfg.batch_size, cfg.seed, epoch, state.step % spe);
        let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &samples[i]).collect();
        let lr = lr_at(epoch, cfg);
        let before = state.step;
        let loss = match train_step(&mut state, &pn, &batch, cfg, lr) {
            Ok(l) => l,
            Err(Error::Divergence { step, breakdown }) => {
                let dump = serde_json::json!({
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": breakdown,
                    "batch": idx,
                });
                let p = out_dir.join(format!("divergence_step{step:08}.json"));
                fs::write(&p, serde_json::to_vec_pretty(&dump)?).map_err(|e| Error::io(&p, e))?;
                state.save(&out_dir.join(format!("divergence_step{step:08}.ckpt")), cfg, spe)?;
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                return Err(Error::Divergence { step, breakdown });
            }
            Err(e) => return Err(e),
        };
        let line = LogLine {
            step: before,
            epoch,
            lr,
            loss,
        };
        serde_json::to_writer(&mut log, &line)?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < total {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            state.save(&out_dir.join(checkpoint_name(state.step)), cfg, spe)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    state.save(&final_path, cfg, spe)?;
    Ok(final_path)
}

/// [`fit`] on a corpus manifest. Only inputs and self-supervised targets
/// are loaded.
pub fn fit_manifest(manifest: &Path, cfg: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let (_, samples) = load_samples(manifest, Access::Training)?;
    let state = match resume {
        Some(p) => Some(TrainState::load(p)?.0),
        None => None,
    };
    fit(&samples, cfg, out_dir, state)
}
