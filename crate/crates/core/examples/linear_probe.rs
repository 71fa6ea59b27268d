//! Linear probing on a synthetic classification set, from a pretrained
//! backbone and from a random one.
//!
//! cargo run --release --example linear_probe [PRETRAIN_EPOCHS]

use eomae::datamodel::{generate_synthetic_dataset, Split, SyntheticConfig, Task};
use eomae::training::{pretrain, PretrainConfig, RunControl};
use eomae::transfer::{evaluate_split, finetune, BackboneSource, FinetuneConfig, FinetuneControl, Regime};

fn main() -> eomae::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let root = std::env::temp_dir().join("eomae-linear-probe");
    let _ = std::fs::remove_dir_all(&root);

    let unlabeled = generate_synthetic_dataset(
        &SyntheticConfig { n_samples: 32, seed: 1, val_fraction: 0.0, test_fraction: 0.0, ..Default::default() },
        &root.join("pretrain"),
    )?;
    let labeled = generate_synthetic_dataset(
        &SyntheticConfig { n_samples: 80, seed: 2, task: Task::Classification, ..Default::default() },
        &root.join("classify"),
    )?;

    let mut cfg = PretrainConfig::tiny();
    cfg.epochs = epochs;
    cfg.warmup_epochs = epochs / 10;
    let pre = pretrain(&unlabeled, &cfg, RunControl::default())?;
    println!("pretrained {epochs} epochs, final loss {:.4}", pre.epoch_reports.last().unwrap().total);

    let lp = FinetuneConfig { epochs: 30, ..FinetuneConfig::classification(Regime::Lp) };
    let sources = [
        ("pretrained", BackboneSource::Pretrained(&pre.checkpoint)),
        ("random", BackboneSource::Random(cfg.model.clone(), 99)),
    ];
    for (name, source) in sources {
        let out = finetune(&labeled, source, &lp, &FinetuneControl::default())?;
        let test = evaluate_split(&labeled, Split::Test, &out.model, &out.store)?;
        println!(
            "{name:>10}: train top-1 {:.3}, best val {:.3} (epoch {}), test {:.3}",
            out.final_train_metric,
            out.best_val.unwrap_or(f64::NAN),
            out.best_epoch,
            test
        );
    }
    Ok(())
}
