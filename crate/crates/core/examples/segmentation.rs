//! Segmentation with a frozen encoder (FE) and end to end (FF).
//!
//! cargo run --release --example segmentation

use eomae::datamodel::{generate_synthetic_dataset, Modality, Split, SyntheticConfig, Task};
use eomae::model::ModelConfig;
use eomae::transfer::{evaluate_split, finetune, BackboneSource, FinetuneConfig, FinetuneControl, Regime};

fn main() -> eomae::Result<()> {
    let root = std::env::temp_dir().join("eomae-segmentation");
    let _ = std::fs::remove_dir_all(&root);
    let data = generate_synthetic_dataset(
        &SyntheticConfig { n_samples: 24, task: Task::Segmentation, num_classes: 4, ..Default::default() },
        &root,
    )?;
    let mut model = ModelConfig::tiny();
    model.seg_classes = 4;

    for regime in [Regime::Fe, Regime::Ff] {
        let cfg = FinetuneConfig {
            epochs: 10,
            modalities: vec![Modality::Rgb, Modality::Ired],
            ..FinetuneConfig::segmentation(regime)
        };
        let out = finetune(&data, BackboneSource::Random(model.clone(), 0), &cfg, &FinetuneControl::default())?;
        let test = evaluate_split(&data, Split::Test, &out.model, &out.store)?;
        let losses: Vec<String> = out.history.iter().map(|e| format!("{:.3}", e.train_loss)).collect();
        println!("{regime}: train loss {}", losses.join(" "));
        println!("{regime}: train mIoU {:.3}, test mIoU {:.3}", out.final_train_metric, test);
    }
    Ok(())
}
