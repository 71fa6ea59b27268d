//! Visible-token sampling under a global budget.
//!
//! A plan keeps `B = round(visible_fraction * M * Gh * Gw)` tokens visible in
//! total across `M` modalities. Proportions over modalities come from a
//! symmetric Dirichlet draw; positions inside each modality are uniform
//! without replacement.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::datamodel::Modality;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub visible_fraction: f64,
    pub alpha: f64,
    pub modalities: Vec<Modality>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { visible_fraction: 1.0 / 6.0, alpha: 1.0, modalities: Modality::ALL.to_vec() }
    }
}

impl MaskConfig {
    pub fn budget(&self, grid: (usize, usize)) -> usize {
        let total = self.modalities.len() * grid.0 * grid.1;
        (self.visible_fraction * total as f64).round() as usize
    }

    pub fn validate(&self, grid: (usize, usize)) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::config("mask config needs at least one modality"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("Dirichlet alpha must be positive, got {}", self.alpha)));
        }
        if !(self.visible_fraction > 0.0 && self.visible_fraction <= 1.0) {
            return Err(Error::config(format!("visible_fraction {} outside (0, 1]", self.visible_fraction)));
        }
        let b = self.budget(grid);
        let cap = self.modalities.len() * grid.0 * grid.1;
        if b == 0 || b > cap {
            return Err(Error::config(format!("visible budget {b} outside [1, {cap}]")));
        }
        Ok(())
    }
}

/// Row-major visibility flags of one modality's patch grid; `true` = visible.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityGrid {
    pub rows: usize,
    pub cols: usize,
    pub visible: Vec<bool>,
}

impl VisibilityGrid {
    pub fn all(rows: usize, cols: usize, visible: bool) -> Self {
        Self { rows, cols, visible: vec![visible; rows * cols] }
    }

    pub fn from_visible_indices(rows: usize, cols: usize, idx: &[usize]) -> Self {
        let mut g = Self::all(rows, cols, false);
        idx.iter().for_each(|&i| g.visible[i] = true);
        g
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn count_visible(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.cols + col]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub grids: BTreeMap<Modality, VisibilityGrid>,
    pub visible_budget: usize,
    pub alpha: f64,
}

impl MaskPlan {
    /// Every token of every listed modality visible.
    pub fn full(modalities: &[Modality], grid: (usize, usize)) -> Self {
        let grids: BTreeMap<_, _> = modalities.iter().map(|&m| (m, VisibilityGrid::all(grid.0, grid.1, true))).collect();
        let visible_budget = grids.len() * grid.0 * grid.1;
        Self { grids, visible_budget, alpha: f64::INFINITY }
    }

    pub fn grid(&self, m: Modality) -> Option<&VisibilityGrid> {
        self.grids.get(&m)
    }

    pub fn total_visible(&self) -> usize {
        self.grids.values().map(VisibilityGrid::count_visible).sum()
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.grids.keys().copied()
    }
}

/// Draws a plan whose total visible count is exactly the configured budget.
pub fn sample_mask_plan<R: Rng + ?Sized>(cfg: &MaskConfig, grid: (usize, usize), rng: &mut R) -> Result<MaskPlan> {
    cfg.validate(grid)?;
    let props = sample_proportions(cfg, rng)?;
    plan_from_proportions(cfg, grid, &props, rng)
}

/// One symmetric Dirichlet draw over the configured modalities (canonical order).
pub fn sample_proportions<R: Rng + ?Sized>(cfg: &MaskConfig, rng: &mut R) -> Result<Vec<f64>> {
    if !(cfg.alpha > 0.0 && cfg.alpha.is_finite()) {
        return Err(Error::config(format!("Dirichlet alpha must be positive, got {}", cfg.alpha)));
    }
    Ok(dirichlet(cfg.alpha, canonical(cfg).len(), rng))
}

/// Allocates the budget by `props` and picks visible positions uniformly.
///
/// Lets several samples share one proportion draw (per-batch allocation).
pub fn plan_from_proportions<R: Rng + ?Sized>(
    cfg: &MaskConfig,
    grid: (usize, usize),
    props: &[f64],
    rng: &mut R,
) -> Result<MaskPlan> {
    cfg.validate(grid)?;
    let mods = canonical(cfg);
    if props.len() != mods.len() {
        return Err(Error::config(format!("{} proportions for {} modalities", props.len(), mods.len())));
    }
    let capacity = grid.0 * grid.1;
    let budget = cfg.budget(grid);
    if budget > mods.len() * capacity {
        return Err(Error::config("visible budget exceeds total tokens"));
    }
    let counts = allocate(props, budget, capacity);
    let grids = mods
        .iter()
        .zip(&counts)
        .map(|(&m, &k)| {
            let picks = index::sample(rng, capacity, k).into_vec();
            (m, VisibilityGrid::from_visible_indices(grid.0, grid.1, &picks))
        })
        .collect();
    Ok(MaskPlan { grids, visible_budget: budget, alpha: cfg.alpha })
}

fn canonical(cfg: &MaskConfig) -> Vec<Modality> {
    let mut mods = cfg.modalities.clone();
    mods.sort();
    mods.dedup();
    mods
}

fn dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // All-zero draws only happen for tiny alpha underflow; redraw.
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Largest-remainder rounding of `props * budget`, capped at `capacity` per
/// entry. Overflow from capped entries goes one unit at a time to the
/// uncapped entry with the largest residual `p_i * budget - count_i`; ties
/// go to the lower index.
pub fn allocate(props: &[f64], budget: usize, capacity: usize) -> Vec<usize> {
    assert!(budget <= capacity * props.len(), "budget exceeds total capacity");
    let ideal: Vec<f64> = props.iter().map(|p| p * budget as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (ideal[a] - counts[a] as f64, ideal[b] - counts[b] as f64);
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    // Floating-point sums can leave the floors a unit or two off either way.
    let mut short = budget as isize - assigned as isize;
    let mut i = 0;
    while short > 0 {
        counts[order[i % order.len()]] += 1;
        short -= 1;
        i += 1;
    }
    while short < 0 {
        let j = (0..counts.len()).rev().filter(|&j| counts[j] > 0).min_by(|&a, &b| {
            (ideal[a] - counts[a] as f64).total_cmp(&(ideal[b] - counts[b] as f64))
        });
        counts[j.expect("positive total")] -= 1;
        short += 1;
    }
    let mut overflow = 0;
    for c in counts.iter_mut() {
        if *c > capacity {
            overflow += *c - capacity;
            *c = capacity;
        }
    }
    while overflow > 0 {
        let target = (0..counts.len())
            .filter(|&j| counts[j] < capacity)
            .max_by(|&a, &b| {
                let (ra, rb) = (ideal[a] - counts[a] as f64, ideal[b] - counts[b] as f64);
                ra.total_cmp(&rb).then(b.cmp(&a))
            })
            .expect("budget fits in capacity");
        counts[target] += 1;
        overflow -= 1;
    }
    counts
}

/// Row-major visible and masked positions of one grid.
pub fn flatten_mask(grid: &VisibilityGrid) -> (Vec<usize>, Vec<usize>) {
    (0..grid.len()).partition(|&i| grid.visible[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;

    #[test]
    fn geometry_96px_budget() {
        // Six 12x12 grids (96 px at patch 8), one sixth visible.
        let cfg = MaskConfig::default();
        assert_eq!(cfg.budget((12, 12)), 144);
        let plan = sample_mask_plan(&cfg, (12, 12), &mut stream(1, Purpose::Masks, 0)).unwrap();
        assert_eq!(plan.total_visible(), 144);
        assert_eq!(plan.grids.len(), 6);
    }

    #[test]
    fn single_modality_full_visibility() {
        let cfg = MaskConfig { visible_fraction: 1.0, alpha: 1.0, modalities: vec![Modality::Rgb] };
        let plan = sample_mask_plan(&cfg, (3, 4), &mut stream(1, Purpose::Masks, 0)).unwrap();
        assert!(plan.grids[&Modality::Rgb].visible.iter().all(|&v| v));
    }

    #[test]
    fn zero_budget_rejected() {
        let cfg = MaskConfig { visible_fraction: 0.01, ..Default::default() };
        assert!(matches!(sample_mask_plan(&cfg, (2, 2), &mut stream(1, Purpose::Masks, 0)), Err(Error::Config(_))));
        let cfg = MaskConfig { modalities: vec![], ..Default::default() };
        assert!(sample_mask_plan(&cfg, (2, 2), &mut stream(1, Purpose::Masks, 0)).is_err());
    }

    #[test]
    fn flatten_examples() {
        let g = VisibilityGrid::from_visible_indices(2, 2, &[0, 3]);
        assert_eq!(flatten_mask(&g), (vec![0, 3], vec![1, 2]));
        let full = VisibilityGrid::all(3, 3, true);
        assert!(flatten_mask(&full).1.is_empty());
    }

    #[test]
    fn allocation_caps_and_redistributes() {
        // All mass on one modality of a 2x2 grid: 4 capped, 2 overflow to the others.
        let c = allocate(&[1.0, 0.0, 0.0], 6, 4);
        assert_eq!(c, vec![4, 1, 1]);
        let c = allocate(&[0.5, 0.5], 3, 10);
        assert_eq!(c, vec![2, 1], "ties go to the lower index");
    }

    #[test]
    fn same_seed_same_plan() {
        let cfg = MaskConfig::default();
        let a = sample_mask_plan(&cfg, (4, 4), &mut stream(9, Purpose::Masks, 2)).unwrap();
        let b = sample_mask_plan(&cfg, (4, 4), &mut stream(9, Purpose::Masks, 2)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn budget_is_exact(
            seed in any::<u64>(),
            m in 1usize..=6,
            gh in 1usize..8,
            gw in 1usize..8,
            frac in 0.05f64..=1.0,
            alpha in 0.05f64..5.0,
        ) {
            let cfg = MaskConfig { visible_fraction: frac, alpha, modalities: Modality::ALL[..m].to_vec() };
            prop_assume!(cfg.budget((gh, gw)) >= 1);
            let plan = sample_mask_plan(&cfg, (gh, gw), &mut stream(seed, Purpose::Masks, 0)).unwrap();
            prop_assert_eq!(plan.total_visible(), cfg.budget((gh, gw)));
            for g in plan.grids.values() {
                prop_assert_eq!(g.len(), gh * gw);
                let (v, k) = flatten_mask(g);
                prop_assert_eq!(v.len() + k.len(), gh * gw);
            }
        }
    }
}
