//! Pretrains briefly, reconstructs a training sample under a fresh mask and
//! saves the masked input / prediction / ground truth grid as a PNG.
//!
//! cargo run --release --example reconstruct [EPOCHS]

use eomae::datamodel::{generate_synthetic_dataset, load_sample, Split, SyntheticConfig};
use eomae::masking::sample_mask_plan;
use eomae::plot::{reconstruct_sample, save_png, triptych};
use eomae::rng::{stream, Purpose};
use eomae::training::{pretrain, PretrainConfig, RunControl};

fn main() -> eomae::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let root = std::env::temp_dir().join("eomae-reconstruct");
    let _ = std::fs::remove_dir_all(&root);
    let manifest = generate_synthetic_dataset(
        &SyntheticConfig { n_samples: 8, val_fraction: 0.0, test_fraction: 0.0, ..Default::default() },
        &root.join("data"),
    )?;
    let cfg = PretrainConfig { epochs, warmup_epochs: epochs / 10, ..PretrainConfig::tiny() };
    let out = pretrain(&manifest, &cfg, RunControl::default())?;

    let id = &manifest.split_ids(Split::Train)[0];
    let sample = load_sample(&manifest, id, true)?;
    let grid = (manifest.image_size / manifest.patch_size, manifest.image_size / manifest.patch_size);
    let plan = sample_mask_plan(&cfg.mask_config(), grid, &mut stream(1, Purpose::Reconstruct, 0))?;
    let (rasters, rows) = reconstruct_sample(&out.model, &out.store, &sample, &plan)?;
    for (m, r) in &rasters {
        let truth = sample.raster(*m).unwrap();
        let mse = r.data().iter().zip(truth.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / r.data().len() as f64;
        println!("{:<5} visible {:>2}/{}  pixel mse {mse:.4}", m.name(), plan.grid(*m).unwrap().count_visible(), grid.0 * grid.1);
    }
    let path = root.join("triptych.png");
    save_png(&triptych(&rows), &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
