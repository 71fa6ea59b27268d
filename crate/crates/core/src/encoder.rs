//! Shared transformer encoder over the visible-token sequence.

use std::cell::Cell;

use eomae_grad::{Graph, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Block;
use crate::tokenizer::{TokenLayout, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    /// Desk-scale preset used by tests and examples.
    pub fn tiny() -> Self {
        Self { width: 192, depth: 4, heads: 3, mlp_ratio: 4.0 }
    }

    /// ViT-B.
    pub fn base() -> Self {
        Self { width: 768, depth: 12, heads: 12, mlp_ratio: 4.0 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "base" => Ok(Self::base()),
            _ => Err(Error::config(format!("unknown encoder preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!("encoder width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.width % 4 != 0 {
            return Err(Error::config("encoder width must be a multiple of 4 for positional embeddings"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// Encoder output; same layout as its input.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub tokens: Var,
    pub layout: TokenLayout,
}

thread_local! {
    static TOKENS_ENCODED: Cell<usize> = const { Cell::new(0) };
}

/// Number of tokens passed through [`Encoder::encode`] on this thread so far.
pub fn tokens_encoded() -> usize {
    TOKENS_ENCODED.with(Cell::get)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub blocks: Vec<Block>,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.depth)
            .map(|i| Block::new(store, rng, &format!("encoder.blocks.{i}"), config.width, config.heads, config.mlp_ratio))
            .collect();
        Ok(Self { config, blocks })
    }

    pub fn encode(&self, g: &mut Graph, seq: &TokenSequence) -> Result<EncodedSequence> {
        let (t, d) = g.shape(seq.tokens);
        if d != self.config.width {
            return Err(Error::config(format!("token width {d} does not match encoder width {}", self.config.width)));
        }
        TOKENS_ENCODED.with(|c| c.set(c.get() + t));
        let mut x = seq.tokens;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x);
            if !g.value(x).all_finite() {
                return Err(Error::Numeric(format!("non-finite activations after encoder block {i}")));
            }
        }
        Ok(EncodedSequence { tokens: x, layout: seq.layout.clone() })
    }
}
