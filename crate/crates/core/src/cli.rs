//! The `eomae` command line: dataset generation, pretraining, fine-tuning,
//! evaluation, reconstruction and plotting.
//!
//! Every command resolves its configuration as preset defaults, then the
//! `--config` file, then `--override key=value` pairs (dotted keys, values
//! parsed as JSON with a plain-string fallback), then dedicated flags. The
//! resolved configuration is written to `run.json` in the output directory,
//! which is assembled under a temporary name and renamed into place at the end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::datamodel::{
    generate_synthetic_dataset, load_sample, write_raster, DatasetManifest, Modality, Split, SyntheticConfig, Task,
};
use crate::error::{Error, Result};
use crate::masking::sample_mask_plan;
use crate::model::{ModelConfig, MultiMae};
use crate::plot::{line_chart, loss_series, reconstruct_sample, render, save_png, stretch_range, triptych, Series};
use crate::rng::{stream, Purpose};
use crate::training::{pretrain, Checkpoint, PretrainConfig, RunControl};
use crate::transfer::{
    evaluate_split, finetune, modality_label, write_results, BackboneSource, FinetuneConfig, FinetuneControl, Metric,
    Regime, ResultRow, TransferModel, TransferSpec,
};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Schema(_) | Error::Load { .. } | Error::Format { .. } | Error::Io { .. } | Error::Json { .. } => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(name = "eomae", version, about = "Multi-modal masked autoencoder for Earth-observation rasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file; a previous run's run.json is accepted too.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `epochs=1` or `optimizer.weight_decay=0.01`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        /// pretrain, classification, multilabel or segmentation.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the multi-modal autoencoder.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// tiny or paper.
        #[arg(long, default_value = "tiny")]
        preset: String,
        /// Continue from a pretraining checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write every sampled mask plan to masks.jsonl.
        #[arg(long)]
        dump_masks: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, short)]
        verbose: bool,
    },
    /// Fine-tune a head (and optionally the encoder) on a labeled dataset.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Pretraining checkpoint; a random backbone is used when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        regime: Option<String>,
        /// Comma-separated modality subset, e.g. `rgb,ired,depth`.
        #[arg(long)]
        modalities: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, short)]
        verbose: bool,
    },
    /// Evaluate a fine-tuned checkpoint, or a random model when none is given.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        modalities: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct one sample under a random mask.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample id; defaults to the first sample of `--split`.
        #[arg(long)]
        sample: Option<String>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Also write the mask plan to mask.json.
        #[arg(long)]
        dump_masks: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw loss and learning-rate curves from a metrics log.
    Plot {
        /// A metrics.jsonl file or a run directory containing one.
        #[arg(long)]
        metrics: PathBuf,
        /// With `--data`, also draw a reconstruction triptych.
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long)]
        sample: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { cfg, n, size, task, out } => gen_data(cfg, n, size, task, &out),
        Command::Pretrain { cfg, data, preset, resume, dump_masks, out, verbose } => {
            run_pretrain(cfg, &data, &preset, resume.as_deref(), dump_masks, &out, verbose)
        }
        Command::Finetune { cfg, data, checkpoint, regime, modalities, out, verbose } => {
            run_finetune(cfg, &data, checkpoint.as_deref(), regime, modalities, &out, verbose)
        }
        Command::Eval { cfg, data, checkpoint, split, regime, modalities, out } => {
            run_eval(cfg, &data, checkpoint.as_deref(), &split, regime, modalities, out.as_deref())
        }
        Command::Reconstruct { cfg, data, checkpoint, sample, split, dump_masks, out } => {
            run_reconstruct(cfg, &data, &checkpoint, sample, &split, dump_masks, &out)
        }
        Command::Plot { metrics, checkpoint, data, sample, seed, out } => {
            run_plot(&metrics, checkpoint.as_deref(), data.as_deref(), sample, seed, &out)
        }
    }
}

fn gen_data(cfg: ConfigArgs, n: Option<usize>, size: Option<usize>, task: Option<String>, out: &Path) -> Result<()> {
    let mut flags = Map::new();
    if let Some(n) = n {
        flags.insert("n_samples".into(), n.into());
    }
    if let Some(s) = size {
        flags.insert("image_size".into(), s.into());
    }
    if let Some(t) = task {
        flags.insert("task".into(), Value::String(t.to_ascii_lowercase()));
    }
    let config: SyntheticConfig = resolve(&SyntheticConfig::default(), &cfg, flags)?;
    with_run_dir(out, |dir| {
        generate_synthetic_dataset(&config, dir)?;
        write_run_json(dir, "gen-data", &config, json!({}))
    })
}

fn run_pretrain(
    cfg: ConfigArgs,
    data: &Path,
    preset: &str,
    resume: Option<&Path>,
    dump_masks: bool,
    out: &Path,
    verbose: bool,
) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    let inputs = json!({ "data": data, "resume": resume });
    let resume = resume.map(Checkpoint::load).transpose()?;
    let base = match &resume {
        Some(c) if cfg.config.is_none() => c.config_as::<PretrainConfig>()?,
        _ => PretrainConfig::preset(preset)?,
    };
    let config: PretrainConfig = resolve(&base, &cfg, Map::new())?;
    config.validate()?;
    with_run_dir(out, |dir| {
        write_run_json(dir, "pretrain", &config, inputs)?;
        let control = RunControl {
            metrics_path: Some(dir.join("metrics.jsonl")),
            checkpoint_dir: Some(dir.join("checkpoint")),
            resume,
            stop_after_epoch: None,
            mask_dump_path: dump_masks.then(|| dir.join("masks.jsonl")),
            verbose,
        };
        let outcome = pretrain(&manifest, &config, control)?;
        if let Some(r) = outcome.epoch_reports.last() {
            println!("final loss {:.6}", r.total);
        }
        Ok(())
    })
}

fn default_regime(task: Task) -> Regime {
    if task == Task::Segmentation {
        Regime::Fe
    } else {
        Regime::Lp
    }
}

/// Finetune defaults for the task and regime, then file, overrides and flags.
fn resolve_finetune(cfg: &ConfigArgs, task: Task, regime: Option<String>, modalities: Option<String>) -> Result<FinetuneConfig> {
    let regime: Option<Regime> = regime.map(|r| r.parse()).transpose()?;
    let base = FinetuneConfig::for_task(task, regime.unwrap_or(default_regime(task)));
    let mut flags = Map::new();
    if let Some(r) = regime {
        flags.insert("regime".into(), serde_json::to_value(r).map_err(|e| Error::config(e.to_string()))?);
    }
    if let Some(m) = modalities {
        let mods = Modality::parse_list(&m)?;
        flags.insert("modalities".into(), serde_json::to_value(mods).map_err(|e| Error::config(e.to_string()))?);
    }
    resolve(&base, cfg, flags)
}

fn run_finetune(
    cfg: ConfigArgs,
    data: &Path,
    checkpoint: Option<&Path>,
    regime: Option<String>,
    modalities: Option<String>,
    out: &Path,
    verbose: bool,
) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    let config = resolve_finetune(&cfg, manifest.task, regime, modalities)?;
    config.validate(manifest.task)?;
    let ckpt = checkpoint.map(Checkpoint::load).transpose()?;
    let source = match &ckpt {
        Some(c) => BackboneSource::Pretrained(c),
        None => BackboneSource::Random(random_model_config(&manifest), config.seed),
    };
    let inputs = json!({ "data": data, "checkpoint": checkpoint });
    with_run_dir(out, |dir| {
        write_run_json(dir, "finetune", &config, inputs)?;
        let control = FinetuneControl {
            metrics_path: Some(dir.join("metrics.jsonl")),
            checkpoint_dir: Some(dir.join("checkpoint")),
            verbose,
        };
        let outcome = finetune(&manifest, source, &config, &control)?;
        let metric = Metric::for_task(manifest.task)?;
        let mut rows = Vec::new();
        let dataset = dataset_name(data);
        let mods = modality_label(&config.sorted_modalities());
        if let Some(v) = outcome.best_val {
            rows.push(ResultRow { dataset: format!("{dataset}:val"), regime: config.regime, modalities: mods.clone(), metric, value: v });
        }
        if !manifest.split_ids(Split::Test).is_empty() {
            let v = evaluate_split(&manifest, Split::Test, &outcome.model, &outcome.store)?;
            rows.push(ResultRow { dataset: format!("{dataset}:test"), regime: config.regime, modalities: mods, metric, value: v });
        }
        for r in &rows {
            println!("{} {} {} {:?} {:.4}", r.dataset, r.regime, r.modalities, r.metric, r.value);
        }
        write_results(&rows, dir)
    })
}

/// Backbone config for runs without a pretraining checkpoint.
fn random_model_config(manifest: &DatasetManifest) -> ModelConfig {
    let mut m = ModelConfig::tiny();
    m.patch_size = manifest.patch_size;
    if let Some(k) = manifest.seg_classes() {
        m.seg_classes = k;
    }
    m
}

fn dataset_name(data: &Path) -> String {
    data.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}

fn run_eval(
    cfg: ConfigArgs,
    data: &Path,
    checkpoint: Option<&Path>,
    split: &str,
    regime: Option<String>,
    modalities: Option<String>,
    out: Option<&Path>,
) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    let split: Split = split.parse()?;
    let (model, store, config) = match checkpoint {
        Some(p) => {
            let (model, store) = TransferModel::from_checkpoint(&Checkpoint::load(p)?)?;
            let config = model.spec.finetune.clone();
            (model, store, config)
        }
        None => {
            let config = resolve_finetune(&cfg, manifest.task, regime, modalities)?;
            config.validate(manifest.task)?;
            let classes = manifest.label_classes.ok_or_else(|| Error::config("dataset manifest has no label_classes"))?;
            let spec = TransferSpec { model: random_model_config(&manifest), finetune: config.clone(), task: manifest.task, classes };
            let mut store = eomae_grad::ParamStore::new();
            let model = TransferModel::new(&mut store, spec, config.seed)?;
            (model, store, config)
        }
    };
    if model.spec.task != manifest.task {
        return Err(Error::config(format!("model was trained for {:?} but the dataset task is {:?}", model.spec.task, manifest.task)));
    }
    let value = evaluate_split(&manifest, split, &model, &store)?;
    let metric = Metric::for_task(manifest.task)?;
    println!("{metric:?} {value:.6}");
    if let Some(out) = out {
        let row = ResultRow {
            dataset: format!("{}:{}", dataset_name(data), split_name(split)),
            regime: config.regime,
            modalities: modality_label(&config.sorted_modalities()),
            metric,
            value,
        };
        let inputs = json!({ "data": data, "checkpoint": checkpoint, "split": split });
        with_run_dir(out, |dir| {
            write_run_json(dir, "eval", &config, inputs)?;
            write_results(&[row], dir)
        })?;
    }
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Loads a pretraining checkpoint into a fresh model.
fn load_pretrained(path: &Path) -> Result<(MultiMae, eomae_grad::ParamStore, PretrainConfig)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != "pretrain" {
        return Err(Error::config(format!("expected a pretraining checkpoint, found kind {:?}", ckpt.kind)));
    }
    let config: PretrainConfig = ckpt.config_as()?;
    let (model, mut store) = MultiMae::build(config.model.clone(), config.seed)?;
    ckpt.apply_to(&mut store, |_| true)?;
    Ok((model, store, config))
}

fn pick_sample(manifest: &DatasetManifest, sample: Option<String>, split: Split) -> Result<String> {
    if let Some(s) = sample {
        if !manifest.sample_ids.contains(&s) {
            return Err(Error::config(format!("unknown sample id {s:?}")));
        }
        return Ok(s);
    }
    [split, Split::Val, Split::Train]
        .into_iter()
        .find_map(|s| manifest.split_ids(s).first().cloned())
        .ok_or_else(|| Error::config("dataset has no samples"))
}

/// Writes predicted rasters, previews and a triptych for one sample into `dir`.
fn reconstruct_into(dir: &Path, ckpt: &Path, data: &Path, sample: Option<String>, split: Split, seed: Option<u64>, dump_masks: bool) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    let (model, store, config) = load_pretrained(ckpt)?;
    let id = pick_sample(&manifest, sample, split)?;
    let sample = load_sample(&manifest, &id, true)?;
    let grid = (sample.spatial()?.0 / config.model.patch_size, sample.spatial()?.1 / config.model.patch_size);
    let plan = sample_mask_plan(&config.mask_config(), grid, &mut stream(seed.unwrap_or(config.seed), Purpose::Reconstruct, 0))?;
    let (rasters, rows) = reconstruct_sample(&model, &store, &sample, &plan)?;
    for (m, r) in &rasters {
        write_raster(&dir.join(format!("pred_{}.bin", m.name())), r, m.element_type())?;
        if matches!(m, Modality::Rgb | Modality::Depth | Modality::Seg) {
            save_png(&render(*m, r, stretch_range(&[r])), &dir.join(format!("pred_{}.png", m.name())))?;
        }
    }
    save_png(&triptych(&rows), &dir.join("triptych.png"))?;
    if dump_masks {
        let path = dir.join("mask.json");
        let text = serde_json::to_string_pretty(&plan).map_err(Error::json(&path))?;
        std::fs::write(&path, text + "\n").map_err(Error::io(&path))?;
    }
    println!("reconstructed sample {id}");
    Ok(())
}

fn run_reconstruct(
    cfg: ConfigArgs,
    data: &Path,
    checkpoint: &Path,
    sample: Option<String>,
    split: &str,
    dump_masks: bool,
    out: &Path,
) -> Result<()> {
    if cfg.config.is_some() || !cfg.overrides.is_empty() {
        return Err(Error::config("reconstruct takes its configuration from the checkpoint"));
    }
    let split: Split = split.parse()?;
    with_run_dir(out, |dir| {
        let inputs = json!({ "data": data, "checkpoint": checkpoint, "sample": sample, "split": split });
        write_run_json(dir, "reconstruct", &json!({ "seed": cfg.seed }), inputs)?;
        reconstruct_into(dir, checkpoint, data, sample.clone(), split, cfg.seed, dump_masks)
    })
}

/// One parsed line of a pretraining or fine-tuning metrics log.
struct LogPoint {
    x: f64,
    lr: Option<f64>,
    total: f64,
    per_modality: BTreeMap<Modality, f64>,
}

fn read_metrics(path: &Path) -> Result<(Vec<LogPoint>, &'static str)> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let bad = |line: usize, reason: &str| Error::Format { path: path.to_path_buf(), reason: format!("line {line}: {reason}") };
    let mut points = Vec::new();
    let mut axis = "step";
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).map_err(|e| bad(i + 1, &e.to_string()))?;
        let x = match (v.get("step").and_then(Value::as_f64), v.get("epoch").and_then(Value::as_f64)) {
            (Some(s), _) => s,
            (None, Some(e)) => {
                axis = "epoch";
                e
            }
            _ => return Err(bad(i + 1, "record has neither step nor epoch")),
        };
        let total = v
            .get("total_loss")
            .or_else(|| v.get("train_loss"))
            .and_then(Value::as_f64)
            .ok_or_else(|| bad(i + 1, "record has no loss"))?;
        let per_modality = match v.get("per_modality_losses") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| bad(i + 1, &e.to_string()))?,
            None => BTreeMap::new(),
        };
        points.push(LogPoint { x, lr: v.get("lr").and_then(Value::as_f64), total, per_modality });
    }
    if points.is_empty() {
        return Err(Error::Format { path: path.to_path_buf(), reason: "metrics log is empty".into() });
    }
    Ok((points, axis))
}

fn run_plot(metrics: &Path, checkpoint: Option<&Path>, data: Option<&Path>, sample: Option<String>, seed: Option<u64>, out: &Path) -> Result<()> {
    let path = if metrics.is_dir() { metrics.join("metrics.jsonl") } else { metrics.to_path_buf() };
    let (points, axis) = read_metrics(&path)?;
    with_run_dir(out, |dir| {
        let series = loss_series(&points.iter().map(|p| (p.x, p.total, p.per_modality.clone())).collect::<Vec<_>>());
        line_chart(&dir.join("loss_curves.png"), "Training loss", axis, &series, true)?;
        let lr: Vec<(f64, f64)> = points.iter().filter_map(|p| p.lr.map(|lr| (p.x, lr))).collect();
        if !lr.is_empty() {
            let s: Vec<Series> = vec![("lr".into(), lr)];
            line_chart(&dir.join("lr_schedule.png"), "Learning rate", axis, &s, false)?;
        }
        if let (Some(c), Some(d)) = (checkpoint, data) {
            reconstruct_into(dir, c, d, sample.clone(), Split::Val, seed, false)?;
        }
        write_run_json(dir, "plot", &json!({ "seed": seed }), json!({ "metrics": path, "checkpoint": checkpoint, "data": data }))
    })
}

/// Resolves a config: `base`, then the config file, then overrides, then
/// `flags` and `--seed`. Every overridden key must exist in `base`.
pub fn resolve<T: Serialize + DeserializeOwned>(base: &T, args: &ConfigArgs, flags: Map<String, Value>) -> Result<T> {
    let mut value = serde_json::to_value(base).map_err(|e| Error::config(e.to_string()))?;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut file: Value = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        // A run.json wraps the resolved config.
        if file.get("command").is_some() {
            if let Some(inner) = file.get_mut("config") {
                file = inner.take();
            }
        }
        merge(&mut value, file, "")?;
    }
    for o in &args.overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_dotted(&mut value, key.trim(), parsed)?;
    }
    for (k, v) in flags {
        set_dotted(&mut value, &k, v)?;
    }
    if let Some(seed) = args.seed {
        set_dotted(&mut value, "seed", seed.into())?;
    }
    serde_json::from_value(value).map_err(|e| Error::config(format!("invalid configuration: {e}")))
}

/// Deep-merges `patch` into `target`; unknown keys are errors.
fn merge(target: &mut Value, patch: Value, prefix: &str) -> Result<()> {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = t.get_mut(&k).ok_or_else(|| Error::config(format!("unknown config key {path:?}")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (t, p) => {
            *t = p;
            Ok(())
        }
    }
}

pub fn set_dotted(value: &mut Value, key: &str, new: Value) -> Result<()> {
    let mut cur = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::config(format!("config key {key:?}: {:?} is not an object", parts[..i].join("."))))?;
        let slot = obj.get_mut(*part).ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = new;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::config("empty override key"))
}

fn write_run_json<T: Serialize>(dir: &Path, command: &str, config: &T, inputs: Value) -> Result<()> {
    let path = dir.join("run.json");
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "inputs": inputs,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(Error::json(&path))?;
    std::fs::write(&path, text + "\n").map_err(Error::io(&path))
}

/// Runs `f` on a fresh temporary sibling of `out` and renames it to `out` on
/// success. `out` must not exist or be an empty directory.
fn with_run_dir(out: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if out.exists() {
        let empty = std::fs::read_dir(out).map_err(Error::io(out))?.next().is_none();
        if !empty {
            return Err(Error::config(format!("output directory {} is not empty", out.display())));
        }
    }
    let name = out.file_name().ok_or_else(|| Error::config(format!("bad output path {}", out.display())))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(Error::io(&tmp))?;
    }
    std::fs::create_dir(&tmp).map_err(Error::io(&tmp))?;
    if let Err(e) = f(&tmp) {
        let _ = std::fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if out.exists() {
        std::fs::remove_dir(out).map_err(Error::io(out))?;
    }
    std::fs::rename(&tmp, out).map_err(Error::io(out))
}
