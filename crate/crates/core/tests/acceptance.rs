//! The ten acceptance criteria, one test each. Every test prints a single
//! `criterion N [PASS|FAIL]` line before asserting.
//!
//! cargo test --release --test acceptance -- --nocapture --test-threads 1

mod common;

use std::collections::BTreeMap;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use eomae::datamodel::{load_sample, write_sample, DatasetManifest, Modality, Split, SyntheticConfig, Task};
use eomae::masking::{flatten_mask, sample_mask_plan, MaskConfig, MaskPlan};
use eomae::model::{prepare_sample, Backbone, ModelConfig, MultiMae, PreparedSample};
use eomae::rng::{stream, Purpose};
use eomae::training::{pretrain, Checkpoint, PretrainConfig, RunControl};
use eomae::transfer::metrics::{mean_average_precision, mean_iou, top1_accuracy};
use eomae::transfer::{
    evaluate_split, finetune, finetune_on, load_labeled, BackboneSource, FinetuneConfig, FinetuneControl, Regime,
    TransferSpec,
};
use eomae_grad::{Graph, Matrix, ParamStore};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{dataset, labeled_set, pretrain_set, tree_bytes, verdict};

/// Criteria run one at a time so each runtime limit is measured without
/// competing test threads.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.1}s of {:.0}s", e.as_secs_f64(), limit.as_secs_f64()))
}

// ---------------------------------------------------------------- 1

#[test]
fn c01_mask_budget_exactness() {
    let _serial = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut bad = Vec::new();
    for i in 0..10_000u64 {
        let grid = (rng.random_range(2..=16), rng.random_range(2..=16));
        let k = rng.random_range(1..=6);
        let modalities: Vec<Modality> = Modality::ALL.choose_multiple(&mut rng, k).copied().collect();
        let alpha = 10f64.powf(rng.random_range(-1.5..1.5));
        let cfg = MaskConfig { visible_fraction: 1.0 / 6.0, alpha, modalities };
        let plan = sample_mask_plan(&cfg, grid, &mut stream(rng.random(), Purpose::Masks, i)).unwrap();
        let total = k * grid.0 * grid.1;
        // round(total / 6), half up, in integer arithmetic.
        let expected = (2 * total + 6) / 12;
        if plan.total_visible() != expected {
            bad.push((grid, k, plan.total_visible(), expected));
        }
    }
    let (fast, time) = within(t, Duration::from_secs(10));
    verdict(1, "mask budget exactness", bad.is_empty() && fast, format!("{} of 10000 plans off budget; {time}", bad.len()));
}

// ---------------------------------------------------------------- 2

/// Two-sample Kolmogorov-Smirnov distance between integer samples on `0..=max`.
fn ks_distance(a: &[usize], b: &[usize], max: usize) -> f64 {
    let cdf = |s: &[usize]| {
        let mut h = vec![0usize; max + 1];
        s.iter().for_each(|&v| h[v] += 1);
        let mut acc = 0;
        h.iter()
            .map(|&c| {
                acc += c;
                acc as f64 / s.len() as f64
            })
            .collect::<Vec<_>>()
    };
    let (fa, fb) = (cdf(a), cdf(b));
    fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn c02_dirichlet_symmetry() {
    let _serial = serial();
    let t = Instant::now();
    let grid = (12, 12);
    let cfg = MaskConfig::default();
    let budget = cfg.budget(grid);
    let n = 100_000;
    let mut counts: BTreeMap<Modality, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let plan = sample_mask_plan(&cfg, grid, &mut stream(202, Purpose::Masks, i as u64)).unwrap();
        for (m, g) in &plan.grids {
            counts.entry(*m).or_default().push(g.count_visible());
        }
    }
    let target = budget as f64 / 6.0;
    let mut worst_mean: f64 = 0.0;
    for c in counts.values() {
        let mean = c.iter().sum::<usize>() as f64 / n as f64;
        worst_mean = worst_mean.max((mean - target).abs());
    }
    let cols: Vec<&Vec<usize>> = counts.values().collect();
    let mut worst_ks: f64 = 0.0;
    for i in 0..cols.len() {
        for j in i + 1..cols.len() {
            worst_ks = worst_ks.max(ks_distance(cols[i], cols[j], grid.0 * grid.1));
        }
    }
    let (fast, time) = within(t, Duration::from_secs(60));
    verdict(
        2,
        "Dirichlet symmetry",
        counts.len() == 6 && worst_mean <= 0.5 && worst_ks < 0.02 && fast,
        format!("B/6 = {target:.2}, worst |mean - B/6| = {worst_mean:.4}, worst pairwise KS = {worst_ks:.4}; {time}"),
    )
}

// ---------------------------------------------------------------- 3

fn loss_value(model: &MultiMae, store: &ParamStore, s: &PreparedSample, plan: &MaskPlan) -> f64 {
    let mut g = Graph::new(store);
    let f = model.forward(&mut g, s, plan).unwrap();
    g.value(f.loss).item()
}

fn input_tokens(model: &MultiMae, store: &ParamStore, s: &PreparedSample, plan: &MaskPlan) -> Matrix {
    let mut g = Graph::new(store);
    let seq = model.backbone.tokenizer.embed_visible(&mut g, &s.inputs, plan).unwrap();
    g.value(seq.tokens).clone()
}

fn predictions(model: &MultiMae, store: &ParamStore, s: &PreparedSample, plan: &MaskPlan) -> BTreeMap<Modality, Matrix> {
    let mut g = Graph::new(store);
    let f = model.forward(&mut g, s, plan).unwrap();
    f.predictions.iter().map(|(&m, &v)| (m, g.value(v).clone())).collect()
}

#[test]
fn c03_masked_content_independence() {
    let _serial = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = pretrain_set(dir.path(), 100, 303);
    let cfg = ModelConfig::tiny();
    let (model, store) = MultiMae::build(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut token_diffs, mut loss_diffs, mut insensitive) = (0usize, 0usize, Vec::new());
    for (i, id) in manifest.split_ids(Split::Train).iter().enumerate() {
        let raw = load_sample(&manifest, id, true).unwrap();
        let s = prepare_sample(&raw, &Modality::ALL, &cfg).unwrap();
        let plan = sample_mask_plan(&MaskConfig::default(), s.grid, &mut stream(303, Purpose::Masks, i as u64)).unwrap();

        // Perturb every masked input patch; targets stay the originals.
        let mut masked_noise = s.clone();
        for (m, grid) in &plan.grids {
            let rows = masked_noise.inputs.get_mut(m).unwrap();
            for r in flatten_mask(grid).1 {
                rows.row_mut(r).iter_mut().for_each(|v| *v += rng.random_range(-5.0..5.0));
            }
        }
        if input_tokens(&model, &store, &s, &plan).max_abs_diff(&input_tokens(&model, &store, &masked_noise, &plan)) != 0.0 {
            token_diffs += 1;
        }
        if loss_value(&model, &store, &s, &plan).to_bits() != loss_value(&model, &store, &masked_noise, &plan).to_bits() {
            loss_diffs += 1;
        }

        // Perturb one visible patch of modality n; every other decoder must react.
        let visible: Vec<(Modality, usize)> =
            plan.grids.iter().flat_map(|(m, g)| flatten_mask(g).0.into_iter().map(move |r| (*m, r))).collect();
        let &(n, row) = visible.choose(&mut rng).unwrap();
        let mut visible_noise = s.clone();
        visible_noise.inputs.get_mut(&n).unwrap().row_mut(row).iter_mut().for_each(|v| *v += 1.0);
        let (before, after) = (predictions(&model, &store, &s, &plan), predictions(&model, &store, &visible_noise, &plan));
        for (m, grid) in &plan.grids {
            let masked = flatten_mask(grid).1;
            if *m == n || masked.is_empty() {
                continue;
            }
            if before[m].gather_rows(&masked).max_abs_diff(&after[m].gather_rows(&masked)) == 0.0 {
                insensitive.push((id.clone(), n, *m));
            }
        }
    }
    let (fast, time) = within(t, Duration::from_secs(120));
    verdict(
        3,
        "masked-content independence",
        token_diffs == 0 && loss_diffs == 0 && insensitive.is_empty() && fast,
        format!(
            "100 samples: {token_diffs} token diffs, {loss_diffs} loss diffs under masked perturbation, \
             {} insensitive cross-modal decoder pairs; {time}",
            insensitive.len()
        ),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_gradient_correctness() {
    let _serial = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = pretrain_set(dir.path(), 1, 404);
    let cfg = ModelConfig::tiny();
    let (model, store) = MultiMae::build(cfg.clone(), 4).unwrap();
    let raw = load_sample(&manifest, &manifest.sample_ids[0], true).unwrap();
    let s = prepare_sample(&raw, &Modality::ALL, &cfg).unwrap();
    let plan = sample_mask_plan(&MaskConfig::default(), s.grid, &mut stream(404, Purpose::Masks, 0)).unwrap();

    let mut g = Graph::new(&store);
    let loss = model.forward(&mut g, &s, &plan).unwrap().loss;
    let grads = g.backward(loss);

    // Ten entries from the backbone, ten from the RGB decoder.
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let backbone: Vec<_> = store.ids().filter(|&id| Backbone::owns(store.name(id))).collect();
    let decoder: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("decoder.rgb.")).collect();
    assert!(!backbone.is_empty() && !decoder.is_empty());
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    for pool in [&backbone, &decoder] {
        for _ in 0..10 {
            let id = *pool.choose(&mut rng).unwrap();
            let k = rng.random_range(0..store.get(id).len());
            let analytic = grads.get(id).map(|m| m.data()[k]).unwrap_or(0.0);
            let mut probe = store.clone();
            let x = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = x + h;
            let up = loss_value(&model, &probe, &s, &plan);
            probe.get_mut(id).data_mut()[k] = x - h;
            let down = loss_value(&model, &probe, &s, &plan);
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
                worst_name = format!("{}[{k}] analytic {analytic:.6e} numeric {numeric:.6e}", store.name(id));
            }
        }
    }
    let (fast, time) = within(t, Duration::from_secs(300));
    verdict(4, "gradient correctness", worst < 1e-4 && fast, format!("20 entries, worst relative error {worst:.2e} at {worst_name}; {time}"));
}

// ---------------------------------------------------------------- 5

#[test]
fn c05_overfit_oracle() {
    let _serial = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = pretrain_set(dir.path(), 8, 505);
    let cfg = PretrainConfig { epochs: 300, ..PretrainConfig::tiny() };
    let out = pretrain(&manifest, &cfg, RunControl::default()).unwrap();
    let initial = out.history[0].total_loss;
    let final_loss = out.epoch_reports.last().unwrap().total;

    // Per-modality: mean over the last tenth of epochs against the first tenth.
    let reports = &out.epoch_reports;
    let w = (reports.len() / 10).max(1);
    let avg = |rs: &[eomae::objective::LossReport], m: Modality| rs.iter().map(|r| r.per_modality[&m]).sum::<f64>() / rs.len() as f64;
    let mut stuck = Vec::new();
    let mut trend = Vec::new();
    for m in Modality::ALL {
        let (head, tail) = (avg(&reports[..w], m), avg(&reports[reports.len() - w..], m));
        trend.push(format!("{}={head:.3}->{tail:.3}", m.name()));
        if tail >= head {
            stuck.push(m);
        }
    }
    let ratio = final_loss / initial;
    let (fast, time) = within(t, Duration::from_secs(900));
    verdict(
        5,
        "overfit oracle",
        ratio < 0.1 && stuck.is_empty() && fast,
        format!("initial {initial:.4}, final {final_loss:.4}, ratio {ratio:.3} (< 0.1 required); {}; {time}", trend.join(" ")),
    );
}

// ---------------------------------------------------------------- 6

fn small_pretrained(dir: &std::path::Path, seed: u64) -> Checkpoint {
    let manifest = pretrain_set(dir, 8, seed);
    let cfg = PretrainConfig { epochs: 2, warmup_epochs: 1, seed, ..PretrainConfig::tiny() };
    pretrain(&manifest, &cfg, RunControl::default()).unwrap().checkpoint
}

#[test]
fn c06_modality_subset_contract() {
    let _serial = serial();
    use Modality::*;
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = small_pretrained(&dir.path().join("pre"), 606);
    let labeled = labeled_set(&dir.path().join("cls"), 40, 606, Task::Classification);

    let subsets = [vec![Rgb], vec![Rgb, Ired], vec![Rgb, Ired, Sired, Eb], vec![Rgb, Ired, Depth]];
    let mut results = Vec::new();
    let mut rgb_model = None;
    for mods in subsets {
        for regime in [Regime::Lp, Regime::Ff] {
            let ft = FinetuneConfig { epochs: 2, modalities: mods.clone(), ..FinetuneConfig::classification(regime) };
            let out = finetune(&labeled, BackboneSource::Pretrained(&ckpt), &ft, &FinetuneControl::default());
            let value = out.and_then(|o| {
                let v = evaluate_split(&labeled, Split::Test, &o.model, &o.store)?;
                if mods == [Rgb] && regime == Regime::Ff {
                    rgb_model = Some((o.model, o.store));
                }
                Ok(v)
            });
            results.push((mods.clone(), regime, value));
        }
    }
    let failures: Vec<String> = results
        .iter()
        .filter(|(_, _, r)| !matches!(r, Ok(v) if v.is_finite()))
        .map(|(m, reg, r)| format!("{reg} {m:?}: {r:?}"))
        .collect();

    // {RGB} predictions must not depend on any other raster.
    let (model, store) = rgb_model.expect("RGB fine-tune failed");
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut leaks = 0;
    for id in labeled.split_ids(Split::Test) {
        let raw = load_sample(&labeled, id, true).unwrap();
        let mut scrambled = raw.clone();
        for (m, r) in scrambled.rasters.iter_mut() {
            if *m != Rgb {
                r.data_mut().iter_mut().for_each(|v| *v = if m.is_categorical() { rng.random_range(0..5) as f32 } else { rng.random_range(-9.0..9.0) });
            }
        }
        let a = model.predict(&store, &prepare_sample(&raw, &Modality::ALL, &model.spec.model).unwrap()).unwrap();
        let b = model.predict(&store, &prepare_sample(&scrambled, &Modality::ALL, &model.spec.model).unwrap()).unwrap();
        if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            leaks += 1;
        }
    }
    let (fast, time) = within(t, Duration::from_secs(600));
    verdict(
        6,
        "modality-subset contract",
        failures.is_empty() && leaks == 0 && fast,
        format!("4 subsets x LP/FF fine-tuned and evaluated, {} failures {failures:?}; {{RGB}} leaks from other rasters: {leaks}; {time}", failures.len()),
    );
}

// ---------------------------------------------------------------- 7

fn backbone_bits(store: &ParamStore) -> BTreeMap<String, Vec<u64>> {
    store
        .ids()
        .filter(|&id| Backbone::owns(store.name(id)))
        .map(|id| (store.name(id).to_string(), store.get(id).data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn checkpoint_backbone_bits(ckpt: &Checkpoint) -> BTreeMap<String, Vec<u64>> {
    ckpt.tensors
        .iter()
        .zip(&ckpt.params)
        .filter(|(e, _)| Backbone::owns(&e.name))
        .map(|(e, m)| (e.name.clone(), m.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn c07_frozen_regime_contract() {
    let _serial = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = small_pretrained(&dir.path().join("pre"), 707);
    let before = checkpoint_backbone_bits(&ckpt);
    let cls = labeled_set(&dir.path().join("cls"), 24, 707, Task::Classification);
    let seg = labeled_set(&dir.path().join("seg"), 12, 707, Task::Segmentation);
    let mods = vec![Modality::Rgb, Modality::Ired];

    let mut same = BTreeMap::new();
    for (regime, data) in [(Regime::Lp, &cls), (Regime::Fe, &seg), (Regime::Ff, &cls)] {
        // No warmup: a zero-lr first epoch could win best-on-val and hide an FF update.
        let ft = FinetuneConfig { epochs: 3, warmup_epochs: 0, modalities: mods.clone(), ..FinetuneConfig::for_task(data.task, regime) };
        let out = finetune(data, BackboneSource::Pretrained(&ckpt), &ft, &FinetuneControl::default()).unwrap();
        let after = backbone_bits(&out.store);
        assert_eq!(after.len(), before.len());
        same.insert(regime.to_string(), after == before);
    }
    let pass = same["LP"] && same["FE"] && !same["FF"];
    let (fast, time) = within(t, Duration::from_secs(300));
    verdict(7, "frozen-regime contract", pass && fast, format!("backbone bit-identical after training: {same:?}; {time}"));
}

// ---------------------------------------------------------------- 8

fn brute_top1(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut hits = 0;
    for (s, &l) in scores.iter().zip(labels) {
        // Predicted class: the lowest index holding the maximum.
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pred = s.iter().position(|&v| v == max).unwrap();
        hits += usize::from(pred == l);
    }
    hits as f64 / labels.len() as f64
}

/// AP by direct enumeration of every distinct threshold, highest first.
fn brute_ap(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos = positive.iter().filter(|&&p| p).count();
    if pos == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| positive[i]).count();
        let (precision, recall) = (tp as f64 / selected.len() as f64, tp as f64 / pos as f64);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

fn brute_map(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> f64 {
    let k = scores[0].len();
    let aps: Vec<f64> = (0..k)
        .filter_map(|c| brute_ap(&scores.iter().map(|s| s[c]).collect::<Vec<_>>(), &labels.iter().map(|l| l[c]).collect::<Vec<_>>()))
        .collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

fn brute_miou(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..classes {
        if !truth.contains(&c) {
            continue;
        }
        let inter = pred.iter().zip(truth).filter(|(&p, &t)| p == c && t == c).count();
        let union = pred.iter().zip(truth).filter(|(&p, &t)| p == c || t == c).count();
        ious.push(inter as f64 / union as f64);
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

#[test]
fn c08_metric_oracles() {
    let _serial = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (mut top1_bad, mut map_worst, mut miou_bad) = (0, 0.0f64, 0);
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let k = rng.random_range(2..=5);
        // Scores on a coarse grid so ties occur.
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(0..6) as f64 / 5.0).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        if top1_accuracy(&scores, &labels).unwrap() != brute_top1(&scores, &labels) {
            top1_bad += 1;
        }

        let mut multi: Vec<Vec<bool>> = (0..n).map(|_| (0..k).map(|_| rng.random_bool(0.4)).collect()).collect();
        multi[0][0] = true;
        let lib = mean_average_precision(&scores, &multi).unwrap();
        map_worst = map_worst.max((lib - brute_map(&scores, &multi)).abs());

        let pixels = rng.random_range(1..=30);
        let truth: Vec<usize> = (0..pixels).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..pixels).map(|_| rng.random_range(0..k)).collect();
        if mean_iou(&pred, &truth, k).unwrap() != brute_miou(&pred, &truth, k) {
            miou_bad += 1;
        }
    }
    let (fast, time) = within(t, Duration::from_secs(30));
    verdict(
        8,
        "metric oracles",
        top1_bad == 0 && miou_bad == 0 && map_worst <= 1e-9 && fast,
        format!("200 instances: top-1 mismatches {top1_bad}, mIoU mismatches {miou_bad}, max mAP deviation {map_worst:.1e}; {time}"),
    );
}

// ---------------------------------------------------------------- 9

const TRANSFER_SEEDS: [u64; 5] = [11, 12, 13, 14, 15];
const TRANSFER_PRETRAIN_SAMPLES: usize = 16;
const TRANSFER_PRETRAIN_EPOCHS: usize = 40;

#[test]
fn c09_transfer_benefit() {
    let _serial = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut gains = Vec::new();
    let mut rows = Vec::new();
    for &seed in &TRANSFER_SEEDS {
        let root = dir.path().join(seed.to_string());
        let unlabeled = pretrain_set(&root.join("pre"), TRANSFER_PRETRAIN_SAMPLES, seed);
        let cfg = PretrainConfig {
            epochs: TRANSFER_PRETRAIN_EPOCHS,
            warmup_epochs: TRANSFER_PRETRAIN_EPOCHS / 10,
            seed,
            ..PretrainConfig::tiny()
        };
        let pre = pretrain(&unlabeled, &cfg, RunControl::default()).unwrap();
        let labeled = dataset(
            &root.join("cls"),
            SyntheticConfig { n_samples: 300, seed: seed + 1000, task: Task::Classification, ..Default::default() },
        );
        let ft = FinetuneConfig { seed, ..FinetuneConfig::classification(Regime::Lp) };
        let mods = ft.sorted_modalities();
        let train = load_labeled(&labeled, Split::Train, &cfg.model, &mods).unwrap();
        let val = load_labeled(&labeled, Split::Val, &cfg.model, &mods).unwrap();
        let test = load_labeled(&labeled, Split::Test, &cfg.model, &mods).unwrap();
        let spec = TransferSpec { model: cfg.model.clone(), finetune: ft, task: Task::Classification, classes: labeled.label_classes.unwrap() };
        let mut acc = Vec::new();
        for source in [BackboneSource::Pretrained(&pre.checkpoint), BackboneSource::Random(cfg.model.clone(), seed)] {
            let out = finetune_on(&train, &val, spec.clone(), source, &FinetuneControl::default()).unwrap();
            acc.push(eomae::transfer::evaluate(&out.model, &out.store, &test).unwrap());
        }
        rows.push(format!("seed {seed}: pretrained {:.3} random {:.3}", acc[0], acc[1]));
        // Exact counts, so a gain of one sample in 20 is not 4.999... points.
        let n = test.len() as f64;
        let correct = |a: f64| (a * n).round();
        gains.push(100.0 * (correct(acc[0]) - correct(acc[1])) / n);
    }
    gains.sort_by(f64::total_cmp);
    let median = gains[gains.len() / 2];
    let (fast, time) = within(t, Duration::from_secs(1800));
    verdict(
        9,
        "transfer benefit",
        median >= 5.0 && fast,
        format!("median LP gain {median:.1} points (>= 5 required); {}; {time}", rows.join(", ")),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_format_round_trips() {
    let _serial = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut mismatched = Vec::new();
    for task in [Task::Pretrain, Task::Classification, Task::Multilabel, Task::Segmentation] {
        let src = dir.path().join(format!("{task:?}"));
        let manifest = labeled_set(&src, 6, 1010, task);
        let copy = dir.path().join(format!("{task:?}-copy"));
        let mut reloaded = DatasetManifest::load(&src).unwrap();
        reloaded.root = copy.clone();
        std::fs::create_dir_all(&copy).unwrap();
        reloaded.save().unwrap();
        for id in &manifest.sample_ids {
            write_sample(&copy, &load_sample(&manifest, id, false).unwrap()).unwrap();
        }
        if tree_bytes(&src) != tree_bytes(&copy) {
            mismatched.push(format!("{task:?} dataset"));
        }
    }

    let pre = pretrain_set(&dir.path().join("pre"), 4, 1010);
    let cfg = PretrainConfig { epochs: 1, warmup_epochs: 0, ..PretrainConfig::tiny() };
    let out = pretrain(&pre, &cfg, RunControl::default()).unwrap();
    let (a, b) = (dir.path().join("ckpt-a"), dir.path().join("ckpt-b"));
    out.checkpoint.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.save(&b).unwrap();
    if tree_bytes(&a) != tree_bytes(&b) || loaded.params != out.checkpoint.params {
        mismatched.push("checkpoint".into());
    }
    let (fast, time) = within(t, Duration::from_secs(10));
    verdict(
        10,
        "format round-trips",
        mismatched.is_empty() && fast,
        format!("4 dataset layouts and a pretraining checkpoint with optimizer state; mismatches {mismatched:?}; {time}"),
    );
}
