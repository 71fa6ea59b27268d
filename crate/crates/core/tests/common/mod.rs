#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use eomae::datamodel::{generate_synthetic_dataset, DatasetManifest, SyntheticConfig, Task};

/// Relative path -> bytes of every file under `root`.
pub fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn dataset(dir: &Path, cfg: SyntheticConfig) -> DatasetManifest {
    generate_synthetic_dataset(&cfg, dir).unwrap()
}

/// Pretraining data with every sample in the train split.
pub fn pretrain_set(dir: &Path, n: usize, seed: u64) -> DatasetManifest {
    dataset(dir, SyntheticConfig { n_samples: n, seed, val_fraction: 0.0, test_fraction: 0.0, ..Default::default() })
}

pub fn labeled_set(dir: &Path, n: usize, seed: u64, task: Task) -> DatasetManifest {
    dataset(dir, SyntheticConfig { n_samples: n, seed, task, ..Default::default() })
}

/// Prints one pass/fail line and then asserts.
pub fn verdict(criterion: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {criterion:>2} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}
