//! Transformer building blocks shared by the encoder, decoders and heads.

use eomae_grad::{Graph, Init, ParamId, ParamStore, Var};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Self {
        let weight = store.add_init(format!("{name}.weight"), fan_in, fan_out, init, true, rng);
        let bias = store.add_init(format!("{name}.bias"), 1, fan_out, Init::Zeros, false, rng);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        let b = g.param(self.bias);
        g.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize) -> Self {
        let gain = store.add_init(format!("{name}.gain"), 1, width, Init::Ones, false, rng);
        let bias = store.add_init(format!("{name}.bias"), 1, width, Init::Zeros, false, rng);
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm_affine(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, ratio: f64) -> Self {
        let hidden = ((width as f64) * ratio).round() as usize;
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), width, hidden, Init::XavierUniform),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, width, Init::XavierUniform),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, heads: usize) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        let lin = |store: &mut ParamStore, rng: &mut R, part: &str| {
            Linear::new(store, rng, &format!("{name}.{part}"), width, width, Init::XavierUniform)
        };
        Self { q: lin(store, rng, "q"), k: lin(store, rng, "k"), v: lin(store, rng, "v"), out: lin(store, rng, "out"), heads }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var) -> Var {
        let width = g.shape(queries).1;
        let dh = width / self.heads;
        let q = self.q.forward(g, queries);
        let q = g.scale(q, 1.0 / (dh as f64).sqrt());
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh));
            let scores = g.matmul_t(qh, false, kh, true);
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.out.forward(g, merged)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, heads: usize, mlp_ratio: f64) -> Self {
        Self {
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), width),
            attn: Attention::new(store, rng, &format!("{name}.attn"), width, heads),
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), width),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), width, mlp_ratio),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = self.ln1.forward(g, x);
        let a = self.attn.forward(g, n, n);
        let x = g.add(x, a);
        let n = self.ln2.forward(g, x);
        let m = self.mlp.forward(g, n);
        g.add(x, m)
    }
}

/// Cross-attention from a query set onto a context, followed by an MLP.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub ln_query: LayerNorm,
    pub ln_context: LayerNorm,
    pub attn: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, heads: usize, mlp_ratio: f64) -> Self {
        Self {
            ln_query: LayerNorm::new(store, rng, &format!("{name}.ln_query"), width),
            ln_context: LayerNorm::new(store, rng, &format!("{name}.ln_context"), width),
            attn: Attention::new(store, rng, &format!("{name}.attn"), width, heads),
            ln_mlp: LayerNorm::new(store, rng, &format!("{name}.ln_mlp"), width),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), width, mlp_ratio),
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var) -> Var {
        let q = self.ln_query.forward(g, queries);
        let c = self.ln_context.forward(g, context);
        let a = self.attn.forward(g, q, c);
        let x = g.add(queries, a);
        let n = self.ln_mlp.forward(g, x);
        let m = self.mlp.forward(g, n);
        g.add(x, m)
    }
}
