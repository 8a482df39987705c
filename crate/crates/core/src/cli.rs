//! Command implementations behind the `vlfat` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic_dataset, load_split, write_dataset, Manifest, Split, SplitCounts,
    SyntheticTaskSpec, Volume, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::model::{CheckpointMeta, Model, ModelConfig};
use crate::numerics::fnv1a;
use crate::training::{evaluate_volumes, train, write_metrics_csv, SliceCount, TrainConfig, TrainOutcome};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train.log";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub task: SyntheticTaskSpec,
    /// Samples per class and split.
    pub counts: SplitCounts,
    /// Dataset seed; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory holding `manifest.json`.
    pub data_dir: PathBuf,
    /// Run outputs: checkpoint, metrics, summary, config echo.
    pub output_dir: PathBuf,
}

/// One experiment, as a single JSON document. Relative paths resolve
/// against the directory containing the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Json {
            context: origin.to_string(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        // absolute, so the echoed config can be rerun from anywhere
        let base = fs::canonicalize(parent).map_err(|e| Error::io(parent, e))?;
        cfg.paths.data_dir = base.join(&cfg.paths.data_dir);
        cfg.paths.output_dir = base.join(&cfg.paths.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let t = &self.data.task;
        let e = &self.model.encoder;
        if (t.height, t.width) != (e.image_height, e.image_width) {
            return Err(Error::Config(format!(
                "dataset slices are {}x{} but the encoder expects {}x{}",
                t.height, t.width, e.image_height, e.image_width
            )));
        }
        if t.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model has {}",
                t.num_classes, self.model.num_classes
            )));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.data_dir.join(MANIFEST_FILE)
    }

    /// Desk-scale experiment for `mode`: 25/10/10 volumes per class.
    pub fn toy(mode: crate::aggregator::AggregatorMode, seed: u64) -> Self {
        Self {
            seed,
            data: DataSection {
                task: SyntheticTaskSpec::default(),
                counts: SplitCounts {
                    train: 25,
                    val: 10,
                    test: 10,
                },
                seed: Some(0),
            },
            model: ModelConfig::toy(mode),
            train: TrainConfig::toy(0),
            paths: Paths {
                data_dir: "data".into(),
                output_dir: format!("runs/{mode}-{seed}").into(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct GenDataReport {
    pub manifest: PathBuf,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn cmd_gen_data(config: &Path) -> Result<GenDataReport> {
    let cfg = RunConfig::load(config)?;
    gen_data(&cfg)
}

pub fn gen_data(cfg: &RunConfig) -> Result<GenDataReport> {
    let vols = generate_synthetic_dataset(&cfg.data.task, &cfg.data.counts, cfg.data_seed())?;
    create_dir(&cfg.paths.data_dir)?;
    let manifest = write_dataset(&cfg.paths.data_dir, &cfg.data.task, &vols)?;
    write_text(&cfg.paths.data_dir.join(CONFIG_ECHO_FILE), &cfg.to_json())?;
    Ok(GenDataReport {
        manifest: cfg.manifest_path(),
        train: manifest.split(Split::Train).count(),
        val: manifest.split(Split::Val).count(),
        test: manifest.split(Split::Test).count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_bacc: f64,
    pub num_params: usize,
    /// How often each slice count was used across optimizer steps.
    pub length_counts: Vec<(usize, usize)>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub fn cmd_train(config: &Path) -> Result<TrainSummary> {
    let cfg = RunConfig::load(config)?;
    run_training(&cfg)
}

fn load_splits(manifest_path: &Path, splits: &[Split]) -> Result<Vec<Vec<Volume>>> {
    let manifest = Manifest::read(manifest_path)?;
    splits
        .iter()
        .map(|&s| {
            let v = load_split(manifest_path, &manifest, s)?;
            if v.is_empty() {
                return Err(Error::Config(format!(
                    "split {} in {} is empty",
                    s.name(),
                    manifest_path.display()
                )));
            }
            Ok(v)
        })
        .collect()
}

/// Trains per `cfg` and writes the run directory.
pub fn run_training(cfg: &RunConfig) -> Result<TrainSummary> {
    let mut splits = load_splits(&cfg.manifest_path(), &[Split::Train, Split::Val])?;
    let val = splits.pop().unwrap();
    let tr = splits.pop().unwrap();
    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    write_text(&out.join(CONFIG_ECHO_FILE), &cfg.to_json())?;

    let started = Instant::now();
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let num_params = model.params().num_scalars();
    let tc = cfg.train_config();
    let TrainOutcome {
        best,
        best_epoch,
        best_val_bacc,
        history,
        length_draws,
        ..
    } = train(model, &tr, &val, &tc)?;

    let checkpoint = out.join(CHECKPOINT_FILE);
    best.save(
        &checkpoint,
        &CheckpointMeta {
            epoch: best_epoch,
            val_bacc: best_val_bacc,
            seed: cfg.seed,
        },
    )?;
    let metrics = out.join(METRICS_FILE);
    write_metrics_csv(&metrics, &history)?;

    let mut length_counts: Vec<(usize, usize)> = Vec::new();
    let mut sorted = length_draws;
    sorted.sort_unstable();
    for n in sorted {
        match length_counts.last_mut() {
            Some((m, c)) if *m == n => *c += 1,
            _ => length_counts.push((n, 1)),
        }
    }
    let summary = TrainSummary {
        mode: cfg.model.aggregator_mode.to_string(),
        seed: cfg.seed,
        epochs: tc.epochs,
        best_epoch,
        best_val_bacc,
        num_params,
        length_counts,
        checkpoint,
        metrics,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_text(&out.join(SUMMARY_FILE), &json)?;

    // wall-clock data stays out of the deterministic outputs
    let mut log = String::new();
    for r in history.iter().filter(|r| r.split == "val") {
        log.push_str(&format!("epoch {} val bacc {:.4} loss {:.4}\n", r.epoch, r.bacc, r.loss));
    }
    log.push_str(&format!("elapsed_seconds {:.1}\n", started.elapsed().as_secs_f64()));
    write_text(&out.join(LOG_FILE), &log)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    /// FNV-1a of the checkpoint bytes, hex.
    pub checkpoint_id: String,
    pub split: Split,
    pub n_slices: String,
    pub seed: u64,
    pub num_volumes: usize,
    pub mean_slices_used: f64,
    #[serde(flatten)]
    pub result: EvalResult,
}

fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:016x}", fnv1a(&bytes)))
}

fn slice_count_label(c: SliceCount) -> String {
    match c {
        SliceCount::All => "all".into(),
        SliceCount::Fixed(n) => n.to_string(),
    }
}

/// Evaluates a checkpoint on one split. `seed` defaults to the seed stored
/// in the checkpoint, which makes evaluation at the validation length
/// reproduce the training-time validation metrics.
pub fn cmd_eval(checkpoint: &Path, manifest: &Path, split: Split, n_slices: SliceCount, seed: Option<u64>) -> Result<EvalReport> {
    let (model, meta) = Model::load(checkpoint)?;
    let vols = load_splits(manifest, &[split])?.pop().unwrap();
    let seed = seed.unwrap_or(meta.seed);
    let ev = evaluate_volumes(&model, &vols, n_slices, seed, None)?;
    let mean_slices_used = ev.mean_length();
    let mut result = ev.result;
    result.warnings.extend(ev.warnings);
    Ok(EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        checkpoint_id: checkpoint_id(checkpoint)?,
        split,
        n_slices: slice_count_label(n_slices),
        seed,
        num_volumes: vols.len(),
        mean_slices_used,
        result,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub resolution: usize,
    pub bacc: f64,
    pub auroc_macro: Option<f64>,
}

pub fn parse_resolutions(s: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = s
        .split(',')
        .map(|t| match t.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("bad resolution {t:?} in {s:?}"))),
        })
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config("empty resolution list".into()));
    }
    Ok(out)
}

/// Sweeps test-time slice counts for a PE-bearing model. Only test volumes
/// with at least `min_slices` slices take part (default: the largest
/// resolution, so no volume is ever evaluated below a requested count).
pub fn robustness(model: &Model, test: &[Volume], resolutions: &[usize], min_slices: Option<usize>, seed: u64) -> Result<Vec<RobustnessRow>> {
    let mode = model.config().aggregator_mode;
    if !mode.has_pe_bank() {
        return Err(Error::Mode(format!(
            "robustness sweep requires PE-bearing aggregator (FAT or VLFAT), checkpoint is {mode}"
        )));
    }
    let floor = min_slices.unwrap_or_else(|| resolutions.iter().copied().max().unwrap_or(1));
    let kept: Vec<Volume> = test.iter().filter(|v| v.n_slices() >= floor).cloned().collect();
    if kept.is_empty() {
        return Err(Error::Config(format!("no test volume has at least {floor} slices")));
    }
    resolutions
        .iter()
        .map(|&r| {
            let ev = evaluate_volumes(model, &kept, SliceCount::Fixed(r), seed, None)?;
            Ok(RobustnessRow {
                resolution: r,
                bacc: ev.result.bacc,
                auroc_macro: ev.result.auroc_macro,
            })
        })
        .collect()
}

pub fn cmd_robustness(checkpoint: &Path, manifest: &Path, resolutions: &[usize], min_slices: Option<usize>, seed: Option<u64>, output: &Path) -> Result<Vec<RobustnessRow>> {
    let (model, meta) = Model::load(checkpoint)?;
    if !model.config().aggregator_mode.has_pe_bank() {
        return robustness(&model, &[], resolutions, min_slices, 0);
    }
    let test = load_splits(manifest, &[Split::Test])?.pop().unwrap();
    let rows = robustness(&model, &test, resolutions, min_slices, seed.unwrap_or(meta.seed))?;
    let mut w = csv::Writer::from_path(output)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(output, e))?;
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}
