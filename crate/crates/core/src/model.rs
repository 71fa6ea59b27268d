//! The full multi-modal masked autoencoder: tokenizer, shared encoder and one decoder per modality.

use std::collections::BTreeMap;

use eomae_grad::{Graph, Matrix, ParamId, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Modality, MultiModalSample};
use crate::decoders::{DecoderConfig, ModalityDecoder};
use crate::encoder::{EncodedSequence, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::masking::{flatten_mask, MaskPlan};
use crate::objective::{
    build_targets, combine_vars, masked_cross_entropy_var, masked_mse_var, LossReport, ObjectiveConfig, SegLoss,
};
use crate::rng::{stream, Purpose};
use crate::tokenizer::{patchify, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub global_token: bool,
    pub modalities: Vec<Modality>,
    /// Land-cover classes of the SEG modality.
    pub seg_classes: usize,
    #[serde(default)]
    pub objective: ObjectiveConfig,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            patch_size: 8,
            encoder: EncoderConfig::tiny(),
            decoder: DecoderConfig::tiny(),
            global_token: true,
            modalities: Modality::ALL.to_vec(),
            seg_classes: 5,
            objective: ObjectiveConfig::default(),
        }
    }

    pub fn base() -> Self {
        Self { encoder: EncoderConfig::base(), decoder: DecoderConfig::default(), ..Self::tiny() }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be positive"));
        }
        if self.modalities.is_empty() {
            return Err(Error::config("model needs at least one modality"));
        }
        if self.modalities.contains(&Modality::Seg) && self.seg_classes < 2 {
            return Err(Error::config("SEG modality needs at least 2 classes"));
        }
        Ok(())
    }

    /// Width of one predicted patch row for modality `m`.
    pub fn output_dim(&self, m: Modality) -> usize {
        let pixels = self.patch_size * self.patch_size;
        match (m.is_categorical(), self.objective.seg_loss) {
            (true, SegLoss::CrossEntropy) => pixels * self.seg_classes,
            _ => pixels * m.channels(),
        }
    }
}

/// Tokenizer plus encoder; everything a downstream head builds on.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Purpose::ParamInit, 0);
        let mut mods = config.modalities.clone();
        mods.sort();
        mods.dedup();
        let tokenizer =
            Tokenizer::new(store, &mut rng, &mods, config.patch_size, config.encoder.width, config.global_token);
        let encoder = Encoder::new(store, &mut rng, config.encoder.clone())?;
        Ok(Self { tokenizer, encoder })
    }

    pub fn encode(&self, g: &mut Graph, patches: &BTreeMap<Modality, Matrix>, plan: &MaskPlan) -> Result<EncodedSequence> {
        let seq = self.tokenizer.embed_visible(g, patches, plan)?;
        self.encoder.encode(g, &seq)
    }

    /// Every tokenizer and encoder parameter name starts with one of these.
    pub fn owns(name: &str) -> bool {
        name.starts_with("tokenizer.") || name.starts_with("encoder.")
    }
}

/// Patch rows of one sample: encoder inputs and reconstruction targets.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample_id: String,
    pub grid: (usize, usize),
    pub inputs: BTreeMap<Modality, Matrix>,
    pub targets: BTreeMap<Modality, Matrix>,
}

/// Patchifies a (normalized) sample. SEG inputs are class indices scaled to
/// [0, 1]; targets follow the objective configuration.
pub fn prepare_sample(sample: &MultiModalSample, modalities: &[Modality], config: &ModelConfig) -> Result<PreparedSample> {
    let p = config.patch_size;
    let mut raw = BTreeMap::new();
    for &m in modalities {
        let r = sample
            .raster(m)
            .ok_or_else(|| Error::Load { sample: sample.sample_id.clone(), modality: m.name().into(), reason: "missing raster".into() })?;
        raw.insert(m, patchify(r, p)?);
    }
    let (h, w) = sample.spatial()?;
    let obj = &config.objective;
    let inputs = build_targets(&raw, false, config.seg_classes, SegLoss::Mse);
    let targets = build_targets(&raw, obj.normalize_per_patch, config.seg_classes, obj.seg_loss);
    Ok(PreparedSample { sample_id: sample.sample_id.clone(), grid: (h / p, w / p), inputs, targets })
}

pub struct PretrainForward {
    pub encoded: EncodedSequence,
    pub predictions: BTreeMap<Modality, Var>,
    pub per_modality: BTreeMap<Modality, Var>,
    pub masked_counts: BTreeMap<Modality, usize>,
    pub loss: Var,
}

impl PretrainForward {
    pub fn report(&self, g: &Graph) -> LossReport {
        LossReport {
            total: g.value(self.loss).item(),
            per_modality: self.per_modality.iter().map(|(&m, &v)| (m, g.value(v).item())).collect(),
            masked_counts: self.masked_counts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiMae {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub decoders: BTreeMap<Modality, ModalityDecoder>,
}

impl MultiMae {
    /// Registers all parameters in `store` in a fixed order: tokenizer,
    /// encoder, then decoders in canonical modality order.
    pub fn new(store: &mut ParamStore, config: ModelConfig, seed: u64) -> Result<Self> {
        let backbone = Backbone::new(store, &config, seed)?;
        let mut rng = stream(seed, Purpose::ParamInit, 1);
        let mut decoders = BTreeMap::new();
        for m in backbone.tokenizer.modalities().collect::<Vec<_>>() {
            let d = ModalityDecoder::new(store, &mut rng, m, config.encoder.width, config.output_dim(m), &config.decoder)?;
            decoders.insert(m, d);
        }
        Ok(Self { config, backbone, decoders })
    }

    pub fn build(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, config, seed)?;
        Ok((model, store))
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.decoders.keys().copied().collect()
    }

    pub fn prepare(&self, sample: &MultiModalSample) -> Result<PreparedSample> {
        prepare_sample(sample, &self.modalities(), &self.config)
    }

    pub fn backbone_params(store: &ParamStore) -> Vec<ParamId> {
        store.ids().filter(|&id| Backbone::owns(store.name(id))).collect()
    }

    /// Embed visible tokens, encode, decode every modality of `plan` and
    /// combine the masked-token losses.
    pub fn forward(&self, g: &mut Graph, sample: &PreparedSample, plan: &MaskPlan) -> Result<PretrainForward> {
        let encoded = self.backbone.encode(g, &sample.inputs, plan)?;
        let mut predictions = BTreeMap::new();
        let mut per_modality = BTreeMap::new();
        let mut masked_counts = BTreeMap::new();
        for (&m, grid) in &plan.grids {
            let dec = self.decoders.get(&m).ok_or_else(|| Error::config(format!("no decoder for modality {m}")))?;
            let pred = dec.decode(g, &encoded, grid)?;
            let target = &sample.targets[&m];
            let (_, masked) = flatten_mask(grid);
            let loss = if m.is_categorical() && self.config.objective.seg_loss == SegLoss::CrossEntropy {
                masked_cross_entropy_var(g, pred, target, &masked, self.config.seg_classes)
            } else {
                masked_mse_var(g, pred, target, &masked)
            };
            predictions.insert(m, pred);
            per_modality.insert(m, loss);
            masked_counts.insert(m, masked.len());
        }
        let terms: Vec<Var> = per_modality.values().copied().collect();
        let loss = combine_vars(g, &terms, self.config.objective.combine)?;
        Ok(PretrainForward { encoded, predictions, per_modality, masked_counts, loss })
    }

    /// Predicted patch rows in target scale; SEG rows become class indices.
    pub fn reconstruct(&self, store: &ParamStore, sample: &PreparedSample, plan: &MaskPlan) -> Result<BTreeMap<Modality, Matrix>> {
        let mut g = Graph::with_trainable(store, |_| false);
        let fwd = self.forward(&mut g, sample, plan)?;
        let k = self.config.seg_classes;
        Ok(fwd
            .predictions
            .iter()
            .map(|(&m, &v)| {
                let pred = g.value(v);
                let out = if m.is_categorical() && self.config.objective.seg_loss == SegLoss::CrossEntropy {
                    let pixels = pred.cols() / k;
                    Matrix::from_fn(pred.rows(), pixels, |r, px| {
                        let logits = &pred.row(r)[px * k..(px + 1) * k];
                        let best = (0..k).fold(0, |b, c| if logits[c] > logits[b] { c } else { b });
                        best as f64
                    })
                } else if m.is_categorical() {
                    pred.map(|v| (v * (k - 1) as f64).round().clamp(0.0, (k - 1) as f64))
                } else {
                    pred.clone()
                };
                (m, out)
            })
            .collect())
    }
}
