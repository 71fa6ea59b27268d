//! Downstream heads and fine-tuning regimes.
//!
//! Any subset of the pretrained modalities can be fed to the backbone; the
//! others are simply left out of the token sequence. Fine-tuning never masks.

mod heads;
pub mod metrics;

use std::io::Write;
use std::path::{Path, PathBuf};

use eomae_grad::{Gradients, Graph, Matrix, ParamStore, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use heads::{
    pool_features, ClassifierHead, ConvNextBlock, Pooling, SegmentationHead, CONVNEXT_KERNEL, SEG_HEAD_BLOCKS,
};

use crate::datamodel::{load_sample, DatasetManifest, Label, Modality, Split, Task};
use crate::encoder::EncodedSequence;
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::model::{prepare_sample, Backbone, ModelConfig, PreparedSample};
use crate::rng::{stream, Purpose};
use crate::training::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig, Checkpoint, PretrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Linear probe on a frozen encoder.
    Lp,
    /// Everything trains.
    Ff,
    /// Segmentation head on a frozen encoder.
    Fe,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lp" => Ok(Regime::Lp),
            "ff" => Ok(Regime::Ff),
            "fe" => Ok(Regime::Fe),
            _ => Err(Error::config(format!("unknown regime {s:?}; expected lp, ff or fe"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Lp => "LP",
            Regime::Ff => "FF",
            Regime::Fe => "FE",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Top1,
    Map,
    Miou,
}

impl Metric {
    pub fn for_task(task: Task) -> Result<Self> {
        match task {
            Task::Classification => Ok(Metric::Top1),
            Task::Multilabel => Ok(Metric::Map),
            Task::Segmentation => Ok(Metric::Miou),
            Task::Pretrain => Err(Error::config("pretraining datasets carry no downstream labels")),
        }
    }
}

/// How per-modality token grids are combined for the segmentation head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Mean,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub regime: Regime,
    pub modalities: Vec<Modality>,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub optimizer: AdamWConfig,
    pub clip_grad_norm: Option<f64>,
    pub pooling: Pooling,
    pub fusion: Fusion,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn classification(regime: Regime) -> Self {
        Self {
            regime,
            modalities: vec![Modality::Rgb],
            epochs: 50,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_epochs: 5,
            optimizer: AdamWConfig { weight_decay: 0.01, ..AdamWConfig::default() },
            clip_grad_norm: Some(1.0),
            pooling: Pooling::Global,
            fusion: Fusion::Mean,
            seed: 0,
        }
    }

    pub fn segmentation(regime: Regime) -> Self {
        Self { epochs: 40, batch_size: 8, ..Self::classification(regime) }
    }

    pub fn for_task(task: Task, regime: Regime) -> Self {
        match task {
            Task::Segmentation => Self::segmentation(regime),
            _ => Self::classification(regime),
        }
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::config("fine-tuning needs at least one modality"));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.base_lr > 0.0) {
            return Err(Error::config("epochs, batch_size and base_lr must be positive"));
        }
        match (self.regime, task) {
            (_, Task::Pretrain) => Err(Error::config("cannot fine-tune on a pretraining dataset")),
            (Regime::Lp, Task::Segmentation) => Err(Error::config("LP is a classification regime; use FE or FF")),
            (Regime::Fe, Task::Classification | Task::Multilabel) => {
                Err(Error::config("FE is a segmentation regime; use LP or FF"))
            }
            _ => Ok(()),
        }
    }

    pub fn sorted_modalities(&self) -> Vec<Modality> {
        let mut m = self.modalities.clone();
        m.sort();
        m.dedup();
        m
    }
}

/// Everything needed to rebuild a fine-tuned model from its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub model: ModelConfig,
    pub finetune: FinetuneConfig,
    pub task: Task,
    pub classes: usize,
}

#[derive(Clone, Debug)]
pub enum Head {
    Classifier(ClassifierHead),
    Segmentation(SegmentationHead),
}

#[derive(Clone, Debug)]
pub struct TransferModel {
    pub spec: TransferSpec,
    pub backbone: Backbone,
    pub head: Head,
}

/// Encodes only `modalities` of a sample, with every token visible.
pub fn forward_features(
    backbone: &Backbone,
    g: &mut Graph,
    sample: &PreparedSample,
    modalities: &[Modality],
) -> Result<EncodedSequence> {
    if modalities.is_empty() {
        return Err(Error::config("empty modality set"));
    }
    for m in modalities {
        if !backbone.tokenizer.projections.contains_key(m) {
            return Err(Error::config(format!("modality {m} has no pretrained tokenizer")));
        }
    }
    let plan = MaskPlan::full(modalities, sample.grid);
    backbone.encode(g, &sample.inputs, &plan)
}

impl TransferModel {
    /// A fresh backbone (seeded by `backbone_seed`) plus a fresh head.
    pub fn new(store: &mut ParamStore, spec: TransferSpec, backbone_seed: u64) -> Result<Self> {
        let mods = spec.finetune.sorted_modalities();
        for m in &mods {
            if !spec.model.modalities.contains(m) {
                return Err(Error::config(format!("modality {m} is not part of the pretrained model")));
            }
        }
        let backbone = Backbone::new(store, &spec.model, backbone_seed)?;
        let mut rng = stream(spec.finetune.seed, Purpose::HeadInit, 0);
        let width = spec.model.encoder.width;
        let head = match spec.task {
            Task::Classification | Task::Multilabel => Head::Classifier(ClassifierHead::new(store, &mut rng, width, spec.classes)),
            Task::Segmentation => {
                let channels = match spec.finetune.fusion {
                    Fusion::Mean => width,
                    Fusion::Concat => width * mods.len(),
                };
                Head::Segmentation(SegmentationHead::new(store, &mut rng, channels, spec.classes, spec.model.patch_size))
            }
            Task::Pretrain => return Err(Error::config("no head for the pretraining task")),
        };
        Ok(Self { spec, backbone, head })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ParamStore)> {
        if ckpt.kind != "finetune" {
            return Err(Error::config(format!("expected a fine-tuned checkpoint, found kind {:?}", ckpt.kind)));
        }
        let spec: TransferSpec = ckpt.config_as()?;
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, spec, ckpt.seed)?;
        ckpt.apply_to(&mut store, |_| true)?;
        Ok((model, store))
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.spec.finetune.sorted_modalities()
    }

    /// What the head consumes: pooled `(1, D)` features for classification,
    /// fused `(Gh*Gw, C)` grid features for segmentation.
    pub fn head_input(&self, g: &mut Graph, sample: &PreparedSample) -> Result<Var> {
        let mods = self.modalities();
        let enc = forward_features(&self.backbone, g, sample, &mods)?;
        match &self.head {
            Head::Classifier(_) => pool_features(g, &enc, self.spec.finetune.pooling),
            Head::Segmentation(_) => {
                let grids: Vec<Var> = enc
                    .layout
                    .segments
                    .iter()
                    .map(|s| g.gather_rows(enc.tokens, &s.rows().collect::<Vec<_>>()))
                    .collect();
                Ok(match self.spec.finetune.fusion {
                    Fusion::Concat => g.concat_cols(&grids),
                    Fusion::Mean => {
                        let mut acc = grids[0];
                        for &v in &grids[1..] {
                            acc = g.add(acc, v);
                        }
                        g.scale(acc, 1.0 / grids.len() as f64)
                    }
                })
            }
        }
    }

    /// Class scores `(1, K)` or per-pixel logits `(H*W, K)`.
    pub fn head_output(&self, g: &mut Graph, input: Var, grid: (usize, usize)) -> Var {
        match &self.head {
            Head::Classifier(h) => h.forward(g, input),
            Head::Segmentation(h) => h.forward(g, input, grid),
        }
    }

    pub fn predict(&self, store: &ParamStore, sample: &PreparedSample) -> Result<Matrix> {
        let mut g = Graph::with_trainable(store, |_| false);
        let x = self.head_input(&mut g, sample)?;
        let y = self.head_output(&mut g, x, sample.grid);
        Ok(g.value(y).clone())
    }
}

/// A prepared sample with its downstream label.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub sample: PreparedSample,
    pub label: Label,
}

/// Loads one split, keeping only `modalities`; other rasters are never read into the model.
pub fn load_labeled(
    manifest: &DatasetManifest,
    split: Split,
    model: &ModelConfig,
    modalities: &[Modality],
) -> Result<Vec<LabeledSample>> {
    if manifest.patch_size != model.patch_size {
        return Err(Error::config(format!(
            "dataset patch size {} differs from model patch size {}",
            manifest.patch_size, model.patch_size
        )));
    }
    let have = manifest.modality_list();
    if let Some(m) = modalities.iter().find(|m| !have.contains(m)) {
        return Err(Error::config(format!("dataset lacks requested modality {m}")));
    }
    manifest
        .split_ids(split)
        .iter()
        .map(|id| {
            let s = load_sample(manifest, id, true)?;
            let label = s.label.clone().ok_or_else(|| Error::Load {
                sample: id.clone(),
                modality: "LABEL".into(),
                reason: "missing label".into(),
            })?;
            Ok(LabeledSample { sample: prepare_sample(&s, modalities, model)?, label })
        })
        .collect()
}

fn mask_classes(label: &Label) -> Result<Vec<usize>> {
    match label {
        Label::Mask(r) => Ok(r.data().iter().map(|&v| v as usize).collect()),
        _ => Err(Error::config("segmentation needs mask labels")),
    }
}

/// Scalar training loss of one head output against its label.
fn loss_var(g: &mut Graph, output: Var, label: &Label) -> Result<Var> {
    Ok(match label {
        Label::Class(c) => g.softmax_cross_entropy(output, &[*c]),
        Label::MultiLabel(bits) => {
            let t = Matrix::from_vec(1, bits.len(), bits.iter().map(|&b| f64::from(u8::from(b))).collect());
            g.bce_with_logits(output, t)
        }
        Label::Mask(_) => g.softmax_cross_entropy(output, &mask_classes(label)?),
    })
}

/// Metric value from per-sample head outputs.
pub fn compute_metric(task: Task, classes: usize, outputs: &[Matrix], labels: &[&Label]) -> Result<f64> {
    match Metric::for_task(task)? {
        Metric::Top1 => {
            let scores: Vec<Vec<f64>> = outputs.iter().map(|o| o.row(0).to_vec()).collect();
            let ys = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c),
                    _ => Err(Error::config("metric/task mismatch: top-1 needs class labels")),
                })
                .collect::<Result<Vec<_>>>()?;
            metrics::top1_accuracy(&scores, &ys)
        }
        Metric::Map => {
            let scores: Vec<Vec<f64>> = outputs.iter().map(|o| o.row(0).to_vec()).collect();
            let ys = labels
                .iter()
                .map(|l| match l {
                    Label::MultiLabel(b) => Ok(b.clone()),
                    _ => Err(Error::config("metric/task mismatch: mAP needs multi-label targets")),
                })
                .collect::<Result<Vec<_>>>()?;
            metrics::mean_average_precision(&scores, &ys)
        }
        Metric::Miou => {
            let mut cm = metrics::ConfusionMatrix::new(classes);
            for (o, l) in outputs.iter().zip(labels) {
                let truth = mask_classes(l)?;
                if truth.len() != o.rows() {
                    return Err(Error::Schema("mask size does not match prediction size".into()));
                }
                for (px, &t) in truth.iter().enumerate() {
                    cm.add(t, metrics::argmax(o.row(px)));
                }
            }
            cm.mean_iou()
        }
    }
}

pub fn evaluate(model: &TransferModel, store: &ParamStore, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("cannot evaluate on an empty split"));
    }
    let outputs = samples.iter().map(|s| model.predict(store, &s.sample)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<&Label> = samples.iter().map(|s| &s.label).collect();
    compute_metric(model.spec.task, model.spec.classes, &outputs, &labels)
}

/// Loads `split` of `manifest` and evaluates on it.
pub fn evaluate_split(manifest: &DatasetManifest, split: Split, model: &TransferModel, store: &ParamStore) -> Result<f64> {
    if manifest.task != model.spec.task {
        return Err(Error::config(format!(
            "metric/task mismatch: model was built for {:?}, dataset is {:?}",
            model.spec.task, manifest.task
        )));
    }
    let samples = load_labeled(manifest, split, &model.spec.model, &model.modalities())?;
    evaluate(model, store, &samples)
}

/// Source of backbone weights.
#[derive(Clone, Debug)]
pub enum BackboneSource<'a> {
    Pretrained(&'a Checkpoint),
    /// A randomly initialized backbone with this config and seed.
    Random(ModelConfig, u64),
}

impl BackboneSource<'_> {
    pub fn model_config(&self) -> Result<ModelConfig> {
        match self {
            BackboneSource::Pretrained(c) => {
                if c.kind != "pretrain" {
                    return Err(Error::config(format!("expected a pretraining checkpoint, found kind {:?}", c.kind)));
                }
                Ok(c.config_as::<PretrainConfig>()?.model)
            }
            BackboneSource::Random(m, _) => Ok(m.clone()),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FinetuneControl {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
}

pub struct FinetuneOutcome {
    pub model: TransferModel,
    /// Best-on-validation parameters (last epoch without a validation split).
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    /// Train-split metric of the final-epoch parameters.
    pub final_train_metric: f64,
    pub checkpoint: Checkpoint,
}

pub fn finetune(
    manifest: &DatasetManifest,
    source: BackboneSource,
    config: &FinetuneConfig,
    control: &FinetuneControl,
) -> Result<FinetuneOutcome> {
    config.validate(manifest.task)?;
    let model_cfg = source.model_config()?;
    let classes = manifest.label_classes.ok_or_else(|| Error::config("dataset manifest has no label_classes"))?;
    let mods = config.sorted_modalities();
    let train = load_labeled(manifest, Split::Train, &model_cfg, &mods)?;
    let val = load_labeled(manifest, Split::Val, &model_cfg, &mods)?;
    let spec = TransferSpec { model: model_cfg, finetune: config.clone(), task: manifest.task, classes };
    finetune_on(&train, &val, spec, source, control)
}

/// Fine-tunes on in-memory splits.
pub fn finetune_on(
    train: &[LabeledSample],
    val: &[LabeledSample],
    spec: TransferSpec,
    source: BackboneSource,
    control: &FinetuneControl,
) -> Result<FinetuneOutcome> {
    let config = spec.finetune.clone();
    config.validate(spec.task)?;
    if train.is_empty() {
        return Err(Error::config("train split is empty"));
    }
    let mut store = ParamStore::new();
    let backbone_seed = match &source {
        BackboneSource::Pretrained(c) => c.seed,
        BackboneSource::Random(_, s) => *s,
    };
    let model = TransferModel::new(&mut store, spec, backbone_seed)?;
    if let BackboneSource::Pretrained(ckpt) = &source {
        ckpt.apply_to(&mut store, Backbone::owns)?;
    }
    let frozen = config.regime != Regime::Ff;
    let owns: Vec<bool> = store.ids().map(|id| Backbone::owns(store.name(id))).collect();
    let trainable = |id: eomae_grad::ParamId| !(frozen && owns[id.index()]);

    // A frozen backbone maps each sample to a fixed head input; compute it once.
    let cache = |samples: &[LabeledSample], store: &ParamStore| -> Result<Vec<Matrix>> {
        samples
            .iter()
            .map(|s| {
                let mut g = Graph::with_trainable(store, |_| false);
                let x = model.head_input(&mut g, &s.sample)?;
                Ok(g.value(x).clone())
            })
            .collect()
    };
    let (train_cache, val_cache) =
        if frozen { (Some(cache(train, &store)?), Some(cache(val, &store)?)) } else { (None, None) };

    let eval = |store: &ParamStore, samples: &[LabeledSample], cached: Option<&Vec<Matrix>>| -> Result<f64> {
        let outputs = match cached {
            Some(c) => c
                .iter()
                .zip(samples)
                .map(|(x, s)| {
                    let mut g = Graph::with_trainable(store, |_| false);
                    let xv = g.constant(x.clone());
                    let y = model.head_output(&mut g, xv, s.sample.grid);
                    g.value(y).clone()
                })
                .collect(),
            None => samples.iter().map(|s| model.predict(store, &s.sample)).collect::<Result<Vec<_>>>()?,
        };
        let labels: Vec<&Label> = samples.iter().map(|s| &s.label).collect();
        compute_metric(model.spec.task, model.spec.classes, &outputs, &labels)
    };

    let mut optimizer = AdamW::new(config.optimizer.clone(), &store);
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup_steps = steps_per_epoch * config.warmup_epochs;
    let mut metrics_out = match &control.metrics_path {
        Some(p) => Some((std::io::BufWriter::new(std::fs::File::create(p).map_err(Error::io(p))?), p.clone())),
        None => None,
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(config.seed, Purpose::EpochShuffle, epoch as u64));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            lr = cosine_lr(step, total_steps, config.base_lr, warmup_steps)?;
            let mut grads = Gradients::empty(store.len());
            for &i in batch {
                let mut g = Graph::with_trainable(&store, trainable);
                let x = match &train_cache {
                    Some(c) => g.constant(c[i].clone()),
                    None => model.head_input(&mut g, &train[i].sample)?,
                };
                let y = model.head_output(&mut g, x, train[i].sample.grid);
                let loss = loss_var(&mut g, y, &train[i].label)?;
                let l = g.value(loss).item();
                if !l.is_finite() {
                    return Err(Error::Numeric(format!("non-finite fine-tuning loss at step {step}")));
                }
                loss_sum += l;
                grads.accumulate(&g.backward(loss));
            }
            grads.scale(1.0 / batch.len() as f64);
            if let Some(c) = config.clip_grad_norm {
                clip_grad_norm(&mut grads, c);
            }
            optimizer.update(&mut store, &grads, lr);
            step += 1;
        }
        let val_metric = if val.is_empty() { None } else { Some(eval(&store, val, val_cache.as_ref())?) };
        let record = EpochRecord { epoch, lr, train_loss: loss_sum / train.len() as f64, val_metric };
        if control.verbose {
            eprintln!("epoch {:>3}  loss {:.4}  val {:?}", epoch + 1, record.train_loss, record.val_metric);
        }
        if let Some((w, p)) = metrics_out.as_mut() {
            let line = serde_json::to_string(&record).map_err(Error::json(p.clone()))?;
            writeln!(w, "{line}").map_err(Error::io(p.clone()))?;
        }
        history.push(record);
        if let Some(v) = val_metric {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, store.clone()));
            }
        }
    }
    if let Some((w, p)) = metrics_out.as_mut() {
        w.flush().map_err(Error::io(p.clone()))?;
    }
    let final_train_metric = eval(&store, train, train_cache.as_ref())?;
    let (best_val, best_epoch, store) = match best {
        Some((v, e, s)) => (Some(v), e, s),
        None => (None, config.epochs - 1, store),
    };
    let checkpoint = Checkpoint::capture("finetune", &model.spec, &store, None, best_epoch + 1, step, backbone_seed)?;
    if let Some(dir) = &control.checkpoint_dir {
        checkpoint.save(dir)?;
    }
    Ok(FinetuneOutcome { model, store, history, best_epoch, best_val, final_train_metric, checkpoint })
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub regime: Regime,
    pub modalities: String,
    pub metric: Metric,
    pub value: f64,
}

pub fn modality_label(mods: &[Modality]) -> String {
    mods.iter().map(|m| m.name()).collect::<Vec<_>>().join("+")
}

/// Writes `results.csv` and `results.json` into `dir`.
pub fn write_results(rows: &[ResultRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut csv = String::from("dataset,regime,modalities,metric,value\n");
    for r in rows {
        let metric = serde_json::to_value(r.metric).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{},{:.6}\n", r.dataset, r.regime, r.modalities, metric, r.value));
    }
    let path = dir.join("results.csv");
    std::fs::write(&path, csv).map_err(Error::io(&path))?;
    let path = dir.join("results.json");
    let json = serde_json::to_string_pretty(rows).map_err(Error::json(&path))?;
    std::fs::write(&path, json + "\n").map_err(Error::io(&path))
}
