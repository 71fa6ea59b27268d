//! Per-modality shallow decoders with cross-attention onto all encoded tokens.

use eomae_grad::{Graph, Init, ParamId, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Modality;
use crate::encoder::EncodedSequence;
use crate::error::{Error, Result};
use crate::masking::VisibilityGrid;
use crate::nn::{Block, CrossBlock, LayerNorm, Linear};
use crate::tokenizer::sincos_posembed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { width: 256, blocks: 2, heads: 8, mlp_ratio: 4.0 }
    }
}

impl DecoderConfig {
    /// Narrow decoders for the desk-scale preset.
    pub fn tiny() -> Self {
        Self { width: 128, blocks: 2, heads: 4, mlp_ratio: 4.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 || self.width % 4 != 0 {
            return Err(Error::config(format!(
                "decoder width {} must be a multiple of 4 and of {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ModalityDecoder {
    pub modality: Modality,
    pub out_dim: usize,
    pub input_proj: Linear,
    pub mask_token: ParamId,
    pub modality_embed: ParamId,
    pub cross: CrossBlock,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub output_proj: Linear,
}

impl ModalityDecoder {
    /// `out_dim` is the width of one predicted patch row.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        modality: Modality,
        enc_width: usize,
        out_dim: usize,
        cfg: &DecoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let name = format!("decoder.{}", modality.name().to_lowercase());
        let w = cfg.width;
        Ok(Self {
            modality,
            out_dim,
            input_proj: Linear::new(store, rng, &format!("{name}.input_proj"), enc_width, w, Init::XavierUniform),
            mask_token: store.add_init(format!("{name}.mask_token"), 1, w, Init::TruncNormal(0.02), false, rng),
            modality_embed: store.add_init(format!("{name}.embed"), 1, w, Init::TruncNormal(0.02), false, rng),
            cross: CrossBlock::new(store, rng, &format!("{name}.cross"), w, cfg.heads, cfg.mlp_ratio),
            blocks: (0..cfg.blocks)
                .map(|i| Block::new(store, rng, &format!("{name}.blocks.{i}"), w, cfg.heads, cfg.mlp_ratio))
                .collect(),
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), w),
            output_proj: Linear::new(store, rng, &format!("{name}.output_proj"), w, out_dim, Init::XavierUniform),
        })
    }

    /// Predicts one row per grid position (row-major) for this decoder's modality.
    ///
    /// Queries are this modality's projected visible tokens with mask tokens
    /// at its masked positions; keys/values are every encoded token, the
    /// global token included.
    pub fn decode(&self, g: &mut Graph, enc: &EncodedSequence, grid: &VisibilityGrid) -> Result<Var> {
        let m = self.modality;
        let seg = enc
            .layout
            .segment(m)
            .ok_or_else(|| Error::config(format!("encoded sequence has no {m} tokens to decode")))?;
        if (grid.rows, grid.cols) != enc.layout.grid {
            return Err(Error::Schema(format!("{m} visibility grid does not match encoded geometry")));
        }
        let n = grid.len();
        let width = g.store().get(self.mask_token).cols();
        let context = self.input_proj.forward(g, enc.tokens);

        // Row k of `pool` is the k-th visible token, the last row is the mask token.
        let own_rows: Vec<usize> = seg.rows().collect();
        let mask = g.param(self.mask_token);
        let pool = if own_rows.is_empty() {
            mask
        } else {
            let own = g.gather_rows(context, &own_rows);
            g.concat_rows(&[own, mask])
        };
        let mask_row = own_rows.len();
        let mut pick = vec![mask_row; n];
        for (k, &p) in seg.positions.iter().enumerate() {
            pick[p] = k;
        }
        let queries = g.gather_rows(pool, &pick);
        let pos = g.constant(sincos_posembed(grid.rows, grid.cols, width)?);
        let queries = g.add(queries, pos);
        let emb = g.param(self.modality_embed);
        let mut x = g.add_row(queries, emb);

        x = self.cross.forward(g, x, context);
        for b in &self.blocks {
            x = b.forward(g, x);
        }
        let x = self.norm.forward(g, x);
        Ok(self.output_proj.forward(g, x))
    }
}
