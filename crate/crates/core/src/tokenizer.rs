//! Rasters to patch tokens and back.

use std::collections::BTreeMap;

use eomae_grad::{Graph, Init, Matrix, ParamId, ParamStore, Var};
use rand::Rng;

use crate::datamodel::{Modality, Raster};
use crate::error::{Error, Result};
use crate::masking::{flatten_mask, MaskPlan};

/// `(C, H, W)` raster to `(Gh * Gw, C * patch^2)` rows.
///
/// Patches are enumerated row-major over the grid; each row holds the
/// `(C, patch, patch)` block flattened channel-major.
pub fn patchify(raster: &Raster, patch: usize) -> Result<Matrix> {
    let (c, h, w) = raster.shape();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Schema(format!("{h}x{w} raster is not divisible into {patch}x{patch} patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let p2 = patch * patch;
    let mut out = Matrix::zeros(gh * gw, c * p2);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            for ch in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        row[ch * p2 + py * patch + px] = raster.get(ch, gy * patch + py, gx * patch + px) as f64;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(rows: &Matrix, channels: usize, patch: usize, grid: (usize, usize)) -> Result<Raster> {
    let (gh, gw) = grid;
    let p2 = patch * patch;
    if rows.shape() != (gh * gw, channels * p2) {
        return Err(Error::Schema(format!(
            "patch rows {:?} do not match grid {gh}x{gw} with {channels} channels at patch {patch}",
            rows.shape()
        )));
    }
    let mut r = Raster::zeros(channels, gh * patch, gw * patch);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = rows.row(gy * gw + gx);
            for ch in 0..channels {
                for py in 0..patch {
                    for px in 0..patch {
                        r.set(ch, gy * patch + py, gx * patch + px, row[ch * p2 + py * patch + px] as f32);
                    }
                }
            }
        }
    }
    Ok(r)
}

/// Fixed 2-D sine-cosine embedding, one row per grid position (row-major).
///
/// The first `d/2` columns encode the grid row, the last `d/2` the grid
/// column; each half is `[sin(p * w_i)..., cos(p * w_i)...]` with
/// `w_i = 10000^(-i / (d/4))`.
pub fn sincos_posembed(gh: usize, gw: usize, d: usize) -> Result<Matrix> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::config(format!("positional embedding width {d} must be a positive multiple of 4")));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let mut out = Matrix::zeros(gh * gw, d);
    for y in 0..gh {
        for x in 0..gw {
            let row = out.row_mut(y * gw + x);
            for (half, pos) in [(0, y as f64), (1, x as f64)] {
                for (i, w) in omega.iter().enumerate() {
                    row[half * 2 * quarter + i] = (pos * w).sin();
                    row[half * 2 * quarter + quarter + i] = (pos * w).cos();
                }
            }
        }
    }
    Ok(out)
}

/// Linear map from a flattened patch to the encoder width, one per modality.
#[derive(Clone, Debug)]
pub struct PatchProjection {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// One modality's run of tokens inside a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub modality: Modality,
    pub offset: usize,
    /// Row-major grid positions, ascending.
    pub positions: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.positions.len()
    }
}

/// Token bookkeeping: optional global token at row 0, then per-modality segments.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub global: bool,
    pub grid: (usize, usize),
    pub segments: Vec<Segment>,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.global as usize + self.segments.iter().map(Segment::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, m: Modality) -> Option<&Segment> {
        self.segments.iter().find(|s| s.modality == m)
    }

    /// Modality of every row; `None` for the global token.
    pub fn modality_ids(&self) -> Vec<Option<Modality>> {
        let mut v = Vec::with_capacity(self.len());
        if self.global {
            v.push(None);
        }
        for s in &self.segments {
            v.extend(std::iter::repeat_n(Some(s.modality), s.len()));
        }
        v
    }

    /// `(row, col)` grid coordinate of every row; `None` for the global token.
    pub fn positions(&self) -> Vec<Option<(usize, usize)>> {
        let gw = self.grid.1;
        let mut v = Vec::with_capacity(self.len());
        if self.global {
            v.push(None);
        }
        for s in &self.segments {
            v.extend(s.positions.iter().map(|&p| Some((p / gw, p % gw))));
        }
        v
    }
}

/// Tokens on a graph together with their layout.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub layout: TokenLayout,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub patch: usize,
    pub width: usize,
    pub projections: BTreeMap<Modality, PatchProjection>,
    pub modality_embed: BTreeMap<Modality, ParamId>,
    pub global_token: Option<ParamId>,
}

impl Tokenizer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        modalities: &[Modality],
        patch: usize,
        width: usize,
        global_token: bool,
    ) -> Self {
        let mut projections = BTreeMap::new();
        let mut modality_embed = BTreeMap::new();
        for &m in modalities {
            let fan_in = m.channels() * patch * patch;
            let name = format!("tokenizer.{}", m.name().to_lowercase());
            let weight = store.add_init(format!("{name}.proj.weight"), fan_in, width, Init::TruncNormal(0.02), true, rng);
            let bias = store.add_init(format!("{name}.proj.bias"), 1, width, Init::Zeros, false, rng);
            projections.insert(m, PatchProjection { weight, bias });
            modality_embed.insert(m, store.add_init(format!("{name}.embed"), 1, width, Init::TruncNormal(0.02), false, rng));
        }
        let global_token =
            global_token.then(|| store.add_init("tokenizer.global_token", 1, width, Init::TruncNormal(0.02), false, rng));
        Self { patch, width, projections, modality_embed, global_token }
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.projections.keys().copied()
    }

    /// Tokens for the visible patches of every modality in `plan`.
    ///
    /// Token = projection(patch) + positional embedding + modality embedding,
    /// concatenated in canonical modality order and row-major position order,
    /// with the global token (if any) first. Masked patches never enter the graph.
    pub fn embed_visible(
        &self,
        g: &mut Graph,
        patches: &BTreeMap<Modality, Matrix>,
        plan: &MaskPlan,
    ) -> Result<TokenSequence> {
        let grid = match plan.grids.values().next() {
            Some(v) => (v.rows, v.cols),
            None => return Err(Error::config("mask plan has no modalities")),
        };
        let pos = sincos_posembed(grid.0, grid.1, self.width)?;
        let mut parts = Vec::new();
        let mut segments = Vec::new();
        let mut offset = 0;
        if let Some(gt) = self.global_token {
            parts.push(g.param(gt));
            offset = 1;
        }
        for (&m, vis) in &plan.grids {
            let proj = self
                .projections
                .get(&m)
                .ok_or_else(|| Error::config(format!("no patch projection for modality {m}")))?;
            let rows = patches.get(&m).ok_or_else(|| Error::config(format!("sample lacks modality {m} required by the mask plan")))?;
            if (vis.rows, vis.cols) != grid || rows.rows() != grid.0 * grid.1 {
                return Err(Error::Schema(format!("{m} geometry does not match the mask plan")));
            }
            let (visible, _) = flatten_mask(vis);
            if visible.is_empty() {
                segments.push(Segment { modality: m, offset, positions: visible });
                continue;
            }
            let x = g.constant(rows.gather_rows(&visible));
            let w = g.param(proj.weight);
            let t = g.matmul(x, w);
            let b = g.param(proj.bias);
            let t = g.add_row(t, b);
            let p = g.constant(pos.gather_rows(&visible));
            let t = g.add(t, p);
            let e = g.param(self.modality_embed[&m]);
            parts.push(g.add_row(t, e));
            segments.push(Segment { modality: m, offset, positions: visible.clone() });
            offset += visible.len();
        }
        if parts.is_empty() {
            return Err(Error::config("no visible tokens to embed"));
        }
        let tokens = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        Ok(TokenSequence { tokens, layout: TokenLayout { global: self.global_token.is_some(), grid, segments } })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::VisibilityGrid;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::{any, prop_assert_eq, proptest};

    #[test]
    fn unit_patches() {
        let r = Raster::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = patchify(&r, 1).unwrap();
        assert_eq!(m.shape(), (4, 1));
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn patch_shape_at_96() {
        assert_eq!(patchify(&Raster::zeros(3, 96, 96), 8).unwrap().shape(), (144, 192));
        assert!(patchify(&Raster::zeros(3, 20, 20), 8).is_err());
    }

    #[test]
    fn unpatchify_locality() {
        let mut rows = Matrix::zeros(4, 2 * 4);
        assert!(unpatchify(&rows, 2, 2, (2, 2)).unwrap().data().iter().all(|&v| v == 0.0));
        rows.row_mut(3).iter_mut().for_each(|v| *v = 1.0);
        let r = unpatchify(&rows, 2, 2, (2, 2)).unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(r.get(c, y, x) != 0.0, y >= 2 && x >= 2);
                }
            }
        }
        assert!(unpatchify(&rows, 3, 2, (2, 2)).is_err());
    }

    #[test]
    fn posembed_properties() {
        let t = sincos_posembed(12, 12, 192).unwrap();
        let origin = t.row(0);
        assert!(origin[..48].iter().all(|&v| v == 0.0) && origin[48..96].iter().all(|&v| v == 1.0));
        let norms: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        assert!(norms.iter().all(|n| (n - norms[0]).abs() < 1e-5));
        let mut min = f64::INFINITY;
        for a in 0..t.rows() {
            for b in a + 1..t.rows() {
                let d: f64 = t.row(a).iter().zip(t.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
                min = min.min(d);
            }
        }
        assert!(min > 0.0);
        assert!(sincos_posembed(2, 2, 6).is_err());
    }

    fn tokenizer_and_store(mods: &[Modality], width: usize) -> (Tokenizer, ParamStore) {
        let mut store = ParamStore::new();
        let tok = Tokenizer::new(&mut store, &mut stream(0, Purpose::ParamInit, 0), mods, 2, width, true);
        (tok, store)
    }

    #[test]
    fn zero_parameters_give_zero_tokens() {
        let (tok, mut store) = tokenizer_and_store(&[Modality::Rgb, Modality::Depth], 8);
        let ids: Vec<_> = store.ids().collect();
        ids.into_iter().for_each(|id| store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0));
        let mut plan = MaskPlan::full(&[Modality::Rgb, Modality::Depth], (2, 2));
        plan.grids.insert(Modality::Depth, VisibilityGrid::from_visible_indices(2, 2, &[1]));
        let patches: BTreeMap<_, _> = [
            (Modality::Rgb, patchify(&Raster::from_fn(3, 4, 4, |c, y, x| (c + y + x) as f32), 2).unwrap()),
            (Modality::Depth, patchify(&Raster::from_fn(1, 4, 4, |_, y, x| (y * x) as f32), 2).unwrap()),
        ]
        .into();
        let mut g = Graph::new(&store);
        let seq = tok.embed_visible(&mut g, &patches, &plan).unwrap();
        // Zero weights and embeddings; the positional table is added but is
        // itself non-zero, so subtract it back out for the linearity check.
        let v = g.value(seq.tokens).clone();
        assert_eq!(v.shape(), (1 + 4 + 1, 8));
        assert!(v.row(0).iter().all(|&x| x == 0.0));
        let pos = sincos_posembed(2, 2, 8).unwrap();
        assert_eq!(v.row(1), pos.row(0));
        assert_eq!(v.row(5), pos.row(1));
        assert_eq!(seq.layout.len(), 6);
        assert_eq!(seq.layout.positions()[5], Some((0, 1)));
    }

    #[test]
    fn missing_projection_is_config_error() {
        let (tok, store) = tokenizer_and_store(&[Modality::Rgb], 8);
        let plan = MaskPlan::full(&[Modality::Rgb, Modality::Eb], (1, 1));
        let patches: BTreeMap<_, _> =
            [(Modality::Rgb, Matrix::zeros(1, 12)), (Modality::Eb, Matrix::zeros(1, 8))].into();
        let mut g = Graph::new(&store);
        assert!(matches!(tok.embed_visible(&mut g, &patches, &plan), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn patchify_roundtrip(c in 1usize..4, gh in 1usize..4, gw in 1usize..4, p in 1usize..4, seed in any::<u64>()) {
            let mut rng = stream(seed, Purpose::Probe, 0);
            let r = Raster::from_fn(c, gh * p, gw * p, |_, _, _| rng.random_range(-100.0f32..100.0));
            let rows = patchify(&r, p).unwrap();
            let back = unpatchify(&rows, c, p, (gh, gw)).unwrap();
            prop_assert_eq!(&back, &r);
            prop_assert_eq!(patchify(&back, p).unwrap(), rows);
        }
    }
}
