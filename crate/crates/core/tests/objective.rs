use std::collections::BTreeMap;

use eomae::datamodel::Modality;
use eomae::masking::{flatten_mask, VisibilityGrid};
use eomae::objective::{build_targets, combine_losses, masked_mse, CombineMode, SegLoss};
use eomae_grad::Matrix;
use proptest::prelude::*;

fn grid_and_rows() -> impl Strategy<Value = (VisibilityGrid, Matrix, Matrix)> {
    (1usize..5, 1usize..5, 1usize..6).prop_flat_map(|(gh, gw, p)| {
        let n = gh * gw;
        (
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(-10.0f64..10.0, n * p),
            proptest::collection::vec(-10.0f64..10.0, n * p),
        )
            .prop_map(move |(vis, a, b)| {
                (VisibilityGrid { rows: gh, cols: gw, visible: vis }, Matrix::from_vec(n, p, a), Matrix::from_vec(n, p, b))
            })
    })
}

proptest! {
    #[test]
    fn visible_predictions_do_not_matter((grid, pred, target) in grid_and_rows(), noise in -100.0f64..100.0) {
        let mut moved = pred.clone();
        for r in flatten_mask(&grid).0 {
            moved.row_mut(r).iter_mut().for_each(|v| *v += noise);
        }
        prop_assert_eq!(masked_mse(&pred, &target, &grid).unwrap(), masked_mse(&moved, &target, &grid).unwrap());
    }

    #[test]
    fn loss_is_zero_exactly_when_masked_rows_agree((grid, pred, target) in grid_and_rows()) {
        let loss = masked_mse(&pred, &target, &grid).unwrap();
        prop_assert!(loss >= 0.0);
        let masked = flatten_mask(&grid).1;
        let agree = masked.iter().all(|&r| pred.row(r) == target.row(r));
        prop_assert_eq!(loss == 0.0, agree);

        let mut fixed = pred.clone();
        for &r in &masked {
            fixed.row_mut(r).copy_from_slice(target.row(r));
        }
        prop_assert_eq!(masked_mse(&fixed, &target, &grid).unwrap(), 0.0);
    }

    #[test]
    fn mean_and_sum_agree_up_to_count(values in proptest::collection::vec(0.0f64..5.0, 1..7)) {
        let map: BTreeMap<Modality, f64> = Modality::ALL.iter().copied().zip(values.iter().copied()).collect();
        let mean = combine_losses(&map, CombineMode::Mean).unwrap();
        let sum = combine_losses(&map, CombineMode::Sum).unwrap();
        prop_assert!((mean * map.len() as f64 - sum).abs() < 1e-12);
    }
}

#[test]
fn empty_loss_map_is_an_error() {
    assert!(combine_losses(&BTreeMap::new(), CombineMode::Mean).is_err());
}

#[test]
fn per_patch_normalization_and_seg_scaling() {
    let mut rows = BTreeMap::new();
    rows.insert(Modality::Depth, Matrix::from_vec(2, 4, vec![3.0, 3.0, 3.0, 3.0, 1.0, 2.0, 3.0, 4.0]));
    rows.insert(Modality::Seg, Matrix::from_vec(1, 2, vec![4.0, 0.0]));
    let t = build_targets(&rows, true, 5, SegLoss::Mse);
    assert!(t[&Modality::Depth].row(0).iter().all(|&v| v == 0.0));
    let second = t[&Modality::Depth].row(1);
    let mean: f64 = second.iter().sum::<f64>() / 4.0;
    let var: f64 = second.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    assert_eq!(t[&Modality::Seg].data(), &[1.0, 0.0]);
    assert_eq!(build_targets(&rows, false, 5, SegLoss::Mse)[&Modality::Depth], rows[&Modality::Depth]);
}
