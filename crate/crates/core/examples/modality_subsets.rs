//! Fine-tunes one six-modality checkpoint on several modality subsets and
//! writes the results table.
//!
//! cargo run --release --example modality_subsets

use eomae::datamodel::{generate_synthetic_dataset, Modality, Split, SyntheticConfig, Task};
use eomae::training::{pretrain, PretrainConfig, RunControl};
use eomae::transfer::{
    evaluate_split, finetune, modality_label, write_results, BackboneSource, FinetuneConfig, FinetuneControl, Metric,
    Regime, ResultRow,
};

fn main() -> eomae::Result<()> {
    let root = std::env::temp_dir().join("eomae-modality-subsets");
    let _ = std::fs::remove_dir_all(&root);
    let unlabeled = generate_synthetic_dataset(
        &SyntheticConfig { n_samples: 16, val_fraction: 0.0, test_fraction: 0.0, ..Default::default() },
        &root.join("pretrain"),
    )?;
    let labeled = generate_synthetic_dataset(
        &SyntheticConfig { n_samples: 40, seed: 3, task: Task::Classification, ..Default::default() },
        &root.join("classify"),
    )?;
    let cfg = PretrainConfig { epochs: 10, warmup_epochs: 1, ..PretrainConfig::tiny() };
    let pre = pretrain(&unlabeled, &cfg, RunControl::default())?;

    use Modality::*;
    let subsets = [vec![Rgb], vec![Rgb, Ired], vec![Rgb, Ired, Sired, Eb], vec![Rgb, Ired, Depth]];
    let mut rows = Vec::new();
    for mods in subsets {
        let ft = FinetuneConfig { epochs: 10, modalities: mods.clone(), ..FinetuneConfig::classification(Regime::Lp) };
        let out = finetune(&labeled, BackboneSource::Pretrained(&pre.checkpoint), &ft, &FinetuneControl::default())?;
        let value = evaluate_split(&labeled, Split::Test, &out.model, &out.store)?;
        println!("{:<16} test top-1 {value:.3}", modality_label(&mods));
        rows.push(ResultRow { dataset: "synthetic".into(), regime: Regime::Lp, modalities: modality_label(&mods), metric: Metric::Top1, value });
    }
    write_results(&rows, &root)?;
    println!("results in {}", root.join("results.csv").display());
    Ok(())
}
