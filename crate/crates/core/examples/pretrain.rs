//! Pretrains the tiny model on synthetic data, checkpoints halfway and
//! resumes, then checks the resumed run matches an uninterrupted one.
//!
//! cargo run --release --example pretrain [EPOCHS]

use eomae::datamodel::{generate_synthetic_dataset, SyntheticConfig};
use eomae::training::{pretrain, Checkpoint, PretrainConfig, RunControl};

fn main() -> eomae::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let root = std::env::temp_dir().join("eomae-pretrain");
    let _ = std::fs::remove_dir_all(&root);

    let data = SyntheticConfig { n_samples: 8, val_fraction: 0.0, test_fraction: 0.0, ..Default::default() };
    let manifest = generate_synthetic_dataset(&data, &root.join("data"))?;

    let mut cfg = PretrainConfig::tiny();
    cfg.epochs = epochs;
    cfg.warmup_epochs = epochs / 10;

    let full = pretrain(
        &manifest,
        &cfg,
        RunControl { metrics_path: Some(root.join("metrics.jsonl")), verbose: true, ..Default::default() },
    )?;
    let first = &full.epoch_reports[0];
    let last = full.epoch_reports.last().unwrap();
    println!("loss {:.4} -> {:.4}", first.total, last.total);
    for (m, v) in &last.per_modality {
        println!("  {:<5} {:.4} (from {:.4})", m.name(), v, first.per_modality[m]);
    }

    // Stop halfway, reload the checkpoint from disk and finish.
    let ckpt_dir = root.join("ckpt");
    pretrain(
        &manifest,
        &cfg,
        RunControl { checkpoint_dir: Some(ckpt_dir.clone()), stop_after_epoch: Some(epochs / 2), ..Default::default() },
    )?;
    let resumed = pretrain(&manifest, &cfg, RunControl { resume: Some(Checkpoint::load(&ckpt_dir)?), ..Default::default() })?;
    let same = resumed.checkpoint.params == full.checkpoint.params;
    println!("resumed from epoch {} matches the uninterrupted run: {same}", epochs / 2);
    println!("metrics log: {}", root.join("metrics.jsonl").display());
    Ok(())
}
