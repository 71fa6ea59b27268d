mod common;

use eomae::encoder::EncoderConfig;
use eomae::training::{
    cosine_lr, pretrain, Checkpoint, DirichletScope, PretrainConfig, RunControl, StepRecord,
};
use eomae::Error;

use common::{pretrain_set, tree_bytes};

/// Tiny preset with a one-block encoder, for tests that only exercise plumbing.
fn small() -> PretrainConfig {
    let mut cfg = PretrainConfig { epochs: 4, batch_size: 2, warmup_epochs: 1, ..PretrainConfig::tiny() };
    cfg.model.encoder = EncoderConfig { depth: 1, ..EncoderConfig::tiny() };
    cfg
}

#[test]
fn equal_seeds_give_equal_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let m = pretrain_set(&dir.path().join("data"), 4, 1);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pretrain(&m, &small(), RunControl { checkpoint_dir: Some(a.clone()), ..Default::default() }).unwrap();
    pretrain(&m, &small(), RunControl { checkpoint_dir: Some(b.clone()), ..Default::default() }).unwrap();
    assert_eq!(tree_bytes(&a), tree_bytes(&b));

    let other = PretrainConfig { seed: 1, ..small() };
    let c = pretrain(&m, &other, RunControl::default()).unwrap();
    let d = Checkpoint::load(&a).unwrap();
    assert_ne!(c.checkpoint.params, d.params);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = pretrain_set(&dir.path().join("data"), 4, 2);
    let cfg = small();
    let full = pretrain(&m, &cfg, RunControl::default()).unwrap();
    let ckpt = dir.path().join("half");
    let half = RunControl { checkpoint_dir: Some(ckpt.clone()), stop_after_epoch: Some(3), ..Default::default() };
    pretrain(&m, &cfg, half).unwrap();
    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.epoch, 3);
    let resumed = pretrain(&m, &cfg, RunControl { resume: Some(loaded), ..Default::default() }).unwrap();
    assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    assert_eq!(resumed.checkpoint.optimizer, full.checkpoint.optimizer);
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let m = pretrain_set(&dir.path().join("data"), 2, 3);
    let first = pretrain(&m, &PretrainConfig { epochs: 1, ..small() }, RunControl::default()).unwrap();
    let other = PretrainConfig { epochs: 1, base_lr: 5e-4, ..small() };
    let err = pretrain(&m, &other, RunControl { resume: Some(first.checkpoint), ..Default::default() }).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = pretrain_set(&dir.path().join("data"), 2, 4);
    let out = pretrain(&m, &PretrainConfig { epochs: 1, ..small() }, RunControl::default()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    out.checkpoint.save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn metrics_log_has_one_record_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let m = pretrain_set(&dir.path().join("data"), 4, 5);
    let log = dir.path().join("metrics.jsonl");
    let out = pretrain(&m, &small(), RunControl { metrics_path: Some(log.clone()), ..Default::default() }).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let records: Vec<StepRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4 * 2);
    let total = records.len();
    for (i, (r, h)) in records.iter().zip(&out.history).enumerate() {
        assert_eq!((r.step, r.epoch, r.per_modality_losses.len()), (i, i / 2, 6));
        assert!((r.total_loss - h.total_loss).abs() <= 1e-12 * h.total_loss.abs());
        assert!((r.lr - cosine_lr(r.step, total, 1e-3, 2).unwrap()).abs() <= 1e-15);
    }
}

#[test]
fn per_batch_dirichlet_shares_allocations_within_a_batch() {
    let dir = tempfile::tempdir().unwrap();
    let m = pretrain_set(&dir.path().join("data"), 4, 6);
    let masks = dir.path().join("masks.jsonl");
    let cfg = PretrainConfig { epochs: 1, batch_size: 4, dirichlet_scope: DirichletScope::PerBatch, ..small() };
    pretrain(&m, &cfg, RunControl { mask_dump_path: Some(masks.clone()), ..Default::default() }).unwrap();
    let counts: Vec<Vec<usize>> = std::fs::read_to_string(&masks)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let grids = v["plan"]["grids"].as_object().unwrap();
            grids.values().map(|g| g["visible"].as_array().unwrap().iter().filter(|b| b.as_bool().unwrap()).count()).collect()
        })
        .collect();
    assert_eq!(counts.len(), 4);
    assert!(counts.iter().all(|c| c == &counts[0]), "{counts:?}");
    assert_eq!(counts[0].iter().sum::<usize>(), 16);
}

#[test]
fn diverging_run_aborts_with_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = pretrain_set(&dir.path().join("data"), 2, 7);
    let cfg = PretrainConfig { base_lr: 1e30, warmup_epochs: 0, clip_grad_norm: None, ..small() };
    let err = pretrain(&m, &cfg, RunControl::default()).err().unwrap();
    assert!(matches!(&err, Error::Numeric(msg) if msg.contains("step")), "{err:?}");
}

#[test]
fn tiny_preset_learns_within_50_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let m = pretrain_set(dir.path(), 8, 8);
    let cfg = PretrainConfig { epochs: 50, ..PretrainConfig::tiny() };
    let out = pretrain(&m, &cfg, RunControl::default()).unwrap();
    let first = out.history[0].total_loss;
    let last = out.epoch_reports.last().unwrap().total;
    assert!(last < first, "{first} -> {last}");
}
