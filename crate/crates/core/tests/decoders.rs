use std::collections::BTreeMap;

use eomae::datamodel::Modality;
use eomae::masking::{flatten_mask, sample_mask_plan, MaskConfig, MaskPlan};
use eomae::model::{ModelConfig, MultiMae, PreparedSample};
use eomae_grad::{Graph, Matrix, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(grid: (usize, usize), rng: &mut ChaCha8Rng) -> PreparedSample {
    let rows: BTreeMap<Modality, Matrix> = Modality::ALL
        .iter()
        .map(|&m| (m, Matrix::from_fn(grid.0 * grid.1, m.channels() * 64, |_, _| rng.random_range(-1.0..1.0))))
        .collect();
    PreparedSample { sample_id: "s".into(), grid, inputs: rows.clone(), targets: rows }
}

fn predictions(model: &MultiMae, store: &ParamStore, s: &PreparedSample, plan: &MaskPlan) -> BTreeMap<Modality, Matrix> {
    let mut g = Graph::new(store);
    let fwd = model.forward(&mut g, s, plan).unwrap();
    fwd.predictions.iter().map(|(&m, &v)| (m, g.value(v).clone())).collect()
}

#[test]
fn shapes_cover_every_position() {
    let (model, store) = MultiMae::build(ModelConfig::tiny(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = sample((12, 12), &mut rng);
    let plan = sample_mask_plan(&MaskConfig::default(), (12, 12), &mut rng).unwrap();
    let preds = predictions(&model, &store, &s, &plan);
    assert_eq!(preds.len(), 6);
    assert_eq!(preds[&Modality::Rgb].shape(), (144, 192));
    for (m, p) in &preds {
        assert_eq!(p.shape(), (144, m.channels() * 64), "{m}");
    }
}

#[test]
fn zero_output_projection_predicts_zeros() {
    let (model, mut store) = MultiMae::build(ModelConfig::tiny(), 2).unwrap();
    for dec in model.decoders.values() {
        for id in dec.output_proj.params() {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
    let s = sample((4, 4), &mut ChaCha8Rng::seed_from_u64(3));
    let plan = MaskPlan::full(&Modality::ALL, (4, 4));
    for (m, p) in predictions(&model, &store, &s, &plan) {
        assert_eq!(p.shape(), (16, m.channels() * 64));
        assert!(p.data().iter().all(|&v| v == 0.0), "{m}");
    }
}

#[test]
fn other_modalities_reach_masked_predictions() {
    let (model, store) = MultiMae::build(ModelConfig::tiny(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = sample((4, 4), &mut rng);
    // RGB fully visible, DEPTH fully masked, everything else absent from the plan.
    let mut plan = MaskPlan::full(&[Modality::Rgb, Modality::Depth], (4, 4));
    plan.grids.get_mut(&Modality::Depth).unwrap().visible.fill(false);
    plan.visible_budget = 16;

    let before = predictions(&model, &store, &s, &plan);
    let mut perturbed = s.clone();
    perturbed.inputs.get_mut(&Modality::Rgb).unwrap().row_mut(5)[0] += 0.5;
    let after = predictions(&model, &store, &perturbed, &plan);
    let masked = flatten_mask(plan.grid(Modality::Depth).unwrap()).1;
    assert_eq!(masked.len(), 16);
    let d = before[&Modality::Depth].gather_rows(&masked).max_abs_diff(&after[&Modality::Depth].gather_rows(&masked));
    assert!(d > 0.0);
}
