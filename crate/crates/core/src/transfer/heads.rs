//! Classification and segmentation heads.

use eomae_grad::{bilinear_taps, Graph, Init, ParamId, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncodedSequence;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// The global token's output.
    #[default]
    Global,
    /// Mean over all patch tokens.
    Mean,
}

/// Pools an encoded sequence to a `(1, D)` row, then applies a
/// parameter-free layer norm.
pub fn pool_features(g: &mut Graph, enc: &EncodedSequence, pooling: Pooling) -> Result<Var> {
    let pooled = match pooling {
        Pooling::Global => {
            if !enc.layout.global {
                return Err(Error::config("global pooling requested but the model has no global token"));
            }
            g.gather_rows(enc.tokens, &[0])
        }
        Pooling::Mean => {
            let start = usize::from(enc.layout.global);
            let rows: Vec<usize> = (start..enc.layout.len()).collect();
            let patches = g.gather_rows(enc.tokens, &rows);
            g.mean_rows(patches)
        }
    };
    Ok(g.layer_norm(pooled))
}

/// A single linear map from pooled features to class scores.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub linear: Linear,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, width: usize, classes: usize) -> Self {
        Self { linear: Linear::new(store, rng, "head.classifier", width, classes, Init::XavierUniform), classes }
    }

    /// `pooled` is `(B, D)`; returns `(B, classes)` scores.
    pub fn forward(&self, g: &mut Graph, pooled: Var) -> Var {
        self.linear.forward(g, pooled)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.params().to_vec()
    }
}

pub const CONVNEXT_KERNEL: usize = 7;
pub const SEG_HEAD_BLOCKS: usize = 4;

/// Depthwise 7x7 conv, layer norm, 4x pointwise expansion, GELU, pointwise
/// projection, residual.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub norm: LayerNorm,
    pub expand: Linear,
    pub project: Linear,
}

impl ConvNextBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Self {
        let k2 = CONVNEXT_KERNEL * CONVNEXT_KERNEL;
        Self {
            dw_weight: store.add_init(format!("{name}.dw.weight"), k2, channels, Init::TruncNormal(0.02), true, rng),
            dw_bias: store.add_init(format!("{name}.dw.bias"), 1, channels, Init::Zeros, false, rng),
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), channels),
            expand: Linear::new(store, rng, &format!("{name}.expand"), channels, 4 * channels, Init::XavierUniform),
            project: Linear::new(store, rng, &format!("{name}.project"), 4 * channels, channels, Init::XavierUniform),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, grid: (usize, usize)) -> Var {
        let (w, b) = (g.param(self.dw_weight), g.param(self.dw_bias));
        let h = g.depthwise_conv(x, w, b, grid.0, grid.1, CONVNEXT_KERNEL);
        let h = self.norm.forward(g, h);
        let h = self.expand.forward(g, h);
        let h = g.gelu(h);
        let h = self.project.forward(g, h);
        g.add(x, h)
    }
}

/// Four ConvNeXt blocks on the token grid, a per-position class projection
/// and bilinear upsampling by the patch size.
///
/// Projecting before upsampling equals projecting after: both maps are linear
/// and the interpolation weights of every output pixel sum to one.
#[derive(Clone, Debug)]
pub struct SegmentationHead {
    pub blocks: Vec<ConvNextBlock>,
    pub classifier: Linear,
    pub classes: usize,
    pub patch: usize,
}

impl SegmentationHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, channels: usize, classes: usize, patch: usize) -> Self {
        Self {
            blocks: (0..SEG_HEAD_BLOCKS).map(|i| ConvNextBlock::new(store, rng, &format!("head.seg.blocks.{i}"), channels)).collect(),
            classifier: Linear::new(store, rng, "head.seg.classifier", channels, classes, Init::XavierUniform),
            classes,
            patch,
        }
    }

    /// `features` is `(Gh*Gw, C)` in row-major grid order; returns per-pixel
    /// logits `(Gh*patch * Gw*patch, classes)` in row-major pixel order.
    pub fn forward(&self, g: &mut Graph, features: Var, grid: (usize, usize)) -> Var {
        let mut x = features;
        for b in &self.blocks {
            x = b.forward(g, x, grid);
        }
        let logits = self.classifier.forward(g, x);
        g.row_mix(logits, bilinear_taps(grid.0, grid.1, self.patch))
    }
}
