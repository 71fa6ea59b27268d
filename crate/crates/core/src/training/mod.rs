//! Pretraining loop.

mod checkpoint;
mod optim;
mod schedule;

use std::io::Write;
use std::path::{Path, PathBuf};

use eomae_grad::{Gradients, Graph, ParamStore};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{fingerprint, Checkpoint, OptimizerState, TensorEntry, CHECKPOINT_FILE, CHECKPOINT_FORMAT_VERSION};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use schedule::cosine_lr;

use crate::datamodel::{load_sample, DatasetManifest, Modality, Split};
use crate::error::{Error, Result};
use crate::masking::{plan_from_proportions, sample_mask_plan, sample_proportions, MaskConfig};
use crate::model::{MultiMae, ModelConfig, PreparedSample};
use crate::objective::{combine_losses, LossReport};
use crate::rng::{stream, Purpose};

/// Whether each sample draws its own modality proportions or a batch shares one draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirichletScope {
    #[default]
    PerSample,
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    /// Masking budget and Dirichlet concentration; the modality list is taken from `model`.
    pub visible_fraction: f64,
    pub dirichlet_alpha: f64,
    #[serde(default)]
    pub dirichlet_scope: DirichletScope,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub optimizer: AdamWConfig,
    pub clip_grad_norm: Option<f64>,
    /// Save a checkpoint every this many epochs (and always at the end); 0 = end only.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl PretrainConfig {
    /// Desk-scale defaults.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            visible_fraction: 1.0 / 6.0,
            dirichlet_alpha: 1.0,
            dirichlet_scope: DirichletScope::PerSample,
            epochs: 100,
            batch_size: 8,
            base_lr: 1e-3,
            warmup_epochs: 10,
            optimizer: AdamWConfig::default(),
            clip_grad_norm: Some(1.0),
            checkpoint_every: 0,
            seed: 0,
        }
    }

    /// Settings as reported for the full-scale run.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::base(),
            epochs: 1000,
            batch_size: 128,
            base_lr: 1e-6,
            warmup_epochs: 40,
            clip_grad_norm: None,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::config(format!("unknown pretrain preset {name:?}"))),
        }
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            visible_fraction: self.visible_fraction,
            alpha: self.dirichlet_alpha,
            modalities: self.model.modalities.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("clip_grad_norm must be positive"));
        }
        Ok(())
    }
}

/// One JSON-lines record per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub per_modality_losses: std::collections::BTreeMap<Modality, f64>,
}

/// Where to write artifacts and when to stop; none of it affects the numbers.
#[derive(Clone, Debug, Default)]
pub struct RunControl {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop (and checkpoint) once this many epochs are complete.
    pub stop_after_epoch: Option<usize>,
    /// JSON-lines file receiving every sampled mask plan.
    pub mask_dump_path: Option<PathBuf>,
    pub verbose: bool,
}

pub struct PretrainOutcome {
    pub model: MultiMae,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
    /// Mean loss report per completed epoch of this run.
    pub epoch_reports: Vec<LossReport>,
}

/// Loads and prepares the train split of a dataset for pretraining.
pub fn load_pretrain_samples(manifest: &DatasetManifest, config: &ModelConfig) -> Result<Vec<PreparedSample>> {
    let have = manifest.modality_list();
    for m in &config.modalities {
        if !have.contains(m) {
            return Err(Error::config(format!("dataset lacks modality {m} required by the model")));
        }
    }
    if manifest.patch_size != config.patch_size {
        return Err(Error::config(format!(
            "dataset patch size {} differs from model patch size {}",
            manifest.patch_size, config.patch_size
        )));
    }
    if let (Some(k), true) = (manifest.seg_classes(), config.modalities.contains(&Modality::Seg)) {
        if k != config.seg_classes {
            return Err(Error::config(format!("dataset has {k} SEG classes, model expects {}", config.seg_classes)));
        }
    }
    let mut mods = config.modalities.clone();
    mods.sort();
    mods.dedup();
    let ids = manifest.split_ids(Split::Train);
    if ids.is_empty() {
        return Err(Error::config("train split is empty"));
    }
    ids.iter()
        .map(|id| crate::model::prepare_sample(&load_sample(manifest, id, true)?, &mods, config))
        .collect()
}

pub fn pretrain(manifest: &DatasetManifest, config: &PretrainConfig, control: RunControl) -> Result<PretrainOutcome> {
    config.validate()?;
    let samples = load_pretrain_samples(manifest, &config.model)?;
    pretrain_on(&samples, config, control)
}

/// The training loop over in-memory samples.
///
/// Each epoch shuffles with its own stream, every sample gets its own mask
/// stream keyed by epoch and sample index, and per-sample gradients are summed
/// in batch order, so the result depends only on the config and the data.
pub fn pretrain_on(samples: &[PreparedSample], config: &PretrainConfig, control: RunControl) -> Result<PretrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::config("no training samples"));
    }
    let grid = samples[0].grid;
    let mask_cfg = config.mask_config();
    mask_cfg.validate(grid)?;
    let (model, mut store) = MultiMae::build(config.model.clone(), config.seed)?;
    let mut optimizer = AdamW::new(config.optimizer.clone(), &store);
    let fp = fingerprint(config)?;

    let steps_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup_steps = steps_per_epoch * config.warmup_epochs;

    let (mut epoch, mut step) = (0, 0);
    if let Some(ckpt) = &control.resume {
        if ckpt.fingerprint != fp {
            return Err(Error::config("checkpoint fingerprint does not match this configuration"));
        }
        ckpt.restore(&mut store, &mut optimizer)?;
        epoch = ckpt.epoch;
        step = ckpt.step;
    }

    let resuming = control.resume.is_some();
    let mut metrics = control.metrics_path.as_ref().map(|p| open_log(p, resuming)).transpose()?;
    let mut mask_dump = control.mask_dump_path.as_ref().map(|p| open_log(p, resuming)).transpose()?;

    let mut history = Vec::new();
    let mut epoch_reports = Vec::new();
    let stop = control.stop_after_epoch.unwrap_or(config.epochs).min(config.epochs);
    let save = |store: &ParamStore, opt: &AdamW, epoch: usize, step: usize| -> Result<Checkpoint> {
        let ckpt = Checkpoint::capture("pretrain", config, store, Some(opt), epoch, step, config.seed)?;
        if let Some(dir) = &control.checkpoint_dir {
            ckpt.save(dir)?;
        }
        Ok(ckpt)
    };

    while epoch < stop {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream(config.seed, Purpose::EpochShuffle, epoch as u64));
        let mut epoch_sum = LossAccumulator::default();
        for batch in order.chunks(config.batch_size) {
            let lr = cosine_lr(step, total_steps, config.base_lr, warmup_steps)?;
            let mut grads = Gradients::empty(store.len());
            let mut batch_sum = LossAccumulator::default();
            let shared = match config.dirichlet_scope {
                DirichletScope::PerSample => None,
                DirichletScope::PerBatch => {
                    Some(sample_proportions(&mask_cfg, &mut stream(config.seed, Purpose::BatchProportions, step as u64))?)
                }
            };
            for &i in batch {
                let mut rng = stream(config.seed, Purpose::Masks, (epoch * samples.len() + i) as u64);
                let plan = match &shared {
                    None => sample_mask_plan(&mask_cfg, grid, &mut rng)?,
                    Some(props) => plan_from_proportions(&mask_cfg, grid, props, &mut rng)?,
                };
                if let Some((w, p)) = mask_dump.as_mut() {
                    let rec = serde_json::json!({ "epoch": epoch, "step": step, "sample_id": samples[i].sample_id, "plan": plan });
                    writeln!(w, "{rec}").map_err(Error::io(p.clone()))?;
                }
                let mut g = Graph::new(&store);
                let fwd = model.forward(&mut g, &samples[i], &plan)?;
                let report = fwd.report(&g);
                if !report.all_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at step {step} (sample {}): {report:?}", samples[i].sample_id)));
                }
                grads.accumulate(&g.backward(fwd.loss));
                batch_sum.add(&report);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradients at step {step}")));
            }
            if let Some(c) = config.clip_grad_norm {
                clip_grad_norm(&mut grads, c);
            }
            optimizer.update(&mut store, &grads, lr);
            let report = batch_sum.mean(config.model.objective.combine)?;
            let record = StepRecord { step, epoch, lr, total_loss: report.total, per_modality_losses: report.per_modality.clone() };
            if let Some((w, p)) = metrics.as_mut() {
                let line = serde_json::to_string(&record).map_err(Error::json(p.clone()))?;
                writeln!(w, "{line}").map_err(Error::io(p.clone()))?;
            }
            epoch_sum.merge(&batch_sum);
            history.push(record);
            step += 1;
        }
        let report = epoch_sum.mean(config.model.objective.combine)?;
        if control.verbose {
            eprintln!("epoch {:>4}  loss {:.5}", epoch + 1, report.total);
        }
        epoch_reports.push(report);
        epoch += 1;
        let due = config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0;
        if due && epoch < stop {
            save(&store, &optimizer, epoch, step)?;
        }
    }
    for (w, p) in metrics.iter_mut().chain(mask_dump.iter_mut()) {
        w.flush().map_err(Error::io(p.clone()))?;
    }
    let checkpoint = save(&store, &optimizer, epoch, step)?;
    Ok(PretrainOutcome { model, store, optimizer, checkpoint, history, epoch_reports })
}

/// Opens a JSON-lines log, appending when resuming.
fn open_log(p: &Path, append: bool) -> Result<(std::io::BufWriter<std::fs::File>, PathBuf)> {
    let f = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(p)
        .map_err(Error::io(p))?;
    Ok((std::io::BufWriter::new(f), p.to_path_buf()))
}

/// Sums of per-sample loss reports, averaged on demand.
#[derive(Default)]
struct LossAccumulator {
    count: usize,
    per_modality: std::collections::BTreeMap<Modality, f64>,
    masked_counts: std::collections::BTreeMap<Modality, usize>,
}

impl LossAccumulator {
    fn add(&mut self, r: &LossReport) {
        self.count += 1;
        for (&m, &v) in &r.per_modality {
            *self.per_modality.entry(m).or_default() += v;
        }
        for (&m, &c) in &r.masked_counts {
            *self.masked_counts.entry(m).or_default() += c;
        }
    }

    fn merge(&mut self, o: &LossAccumulator) {
        self.count += o.count;
        for (&m, &v) in &o.per_modality {
            *self.per_modality.entry(m).or_default() += v;
        }
        for (&m, &c) in &o.masked_counts {
            *self.masked_counts.entry(m).or_default() += c;
        }
    }

    fn mean(&self, mode: crate::objective::CombineMode) -> Result<LossReport> {
        let n = self.count.max(1) as f64;
        let per_modality: std::collections::BTreeMap<_, _> = self.per_modality.iter().map(|(&m, &v)| (m, v / n)).collect();
        Ok(LossReport { total: combine_losses(&per_modality, mode)?, per_modality, masked_counts: self.masked_counts.clone() })
    }
}
