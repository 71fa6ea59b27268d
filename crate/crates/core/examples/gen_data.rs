//! Writes a small synthetic pretraining dataset and inspects one sample.
//!
//! cargo run --release --example gen_data [OUT_DIR]

use std::path::PathBuf;

use eomae::datamodel::{generate_synthetic_dataset, load_sample, DatasetManifest, Split, SyntheticConfig};

fn main() -> eomae::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("eomae-gen-data"));
    let _ = std::fs::remove_dir_all(&out);

    let cfg = SyntheticConfig { n_samples: 16, image_size: 32, seed: 7, ..Default::default() };
    generate_synthetic_dataset(&cfg, &out)?;
    let manifest = DatasetManifest::load(&out)?;
    println!("dataset at {}", out.display());
    println!("task {:?}, {}x{} px, patch {}", manifest.task, manifest.image_size, manifest.image_size, manifest.patch_size);
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("  {split:?}: {} samples", manifest.split_ids(split).len());
    }

    let id = &manifest.split_ids(Split::Train)[0];
    let raw = load_sample(&manifest, id, false)?;
    let normalized = load_sample(&manifest, id, true)?;
    println!("sample {id}:");
    for m in raw.modalities() {
        let (r, n) = (raw.raster(m).unwrap(), normalized.raster(m).unwrap());
        let mean = |d: &[f32]| d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        println!(
            "  {:<5} shape {:?}  raw mean {:>9.3}  normalized mean {:>7.3}",
            m.name(),
            r.shape(),
            mean(r.data()),
            mean(n.data())
        );
    }
    Ok(())
}
