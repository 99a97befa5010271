//! Experiment driver: dataset generation, training, evaluation and logit
//! dumps, as used by the `vct` binary.

mod checkpoint;
mod config;
mod optim;
mod pgm;
mod train;

pub use checkpoint::{Checkpoint, Role, TensorEntry, CHECKPOINT_MAGIC};
pub use config::{DataConfig, ExperimentConfig, OptimConfig, TrainConfig};
pub use optim::AdamW;
pub use pgm::Pgm;
pub use train::{
    batch_gradients, batch_indices, encoders_for, evaluate_prepared, initial_checkpoint, initial_params, train, LogLine,
    Prepared, StepStats, TrainOutcome,
};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{generate_dataset, read_dataset, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::tensor::{sigmoid, Rng};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Per-category and off-screen counts of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub samples: usize,
    pub objects: usize,
    /// On-screen objects per category.
    pub objects_per_category: Vec<usize>,
    /// Sounding on-screen objects per category.
    pub sounding_per_category: Vec<usize>,
    /// Fraction of samples with at least one off-screen sounding category.
    pub offscreen_fraction: f64,
}

impl DatasetSummary {
    pub fn of(ds: &Dataset) -> Self {
        let k = ds.scene.num_categories;
        let mut objects_per_category = vec![0; k];
        let mut sounding_per_category = vec![0; k];
        let mut objects = 0;
        let mut offscreen = 0;
        for s in &ds.samples {
            for (i, &c) in s.categories.iter().enumerate() {
                objects += 1;
                objects_per_category[c] += 1;
                if s.sounding[i] {
                    sounding_per_category[c] += 1;
                }
            }
            if !s.offscreen_categories().is_empty() {
                offscreen += 1;
            }
        }
        let n = ds.samples.len();
        DatasetSummary {
            samples: n,
            objects,
            objects_per_category,
            sounding_per_category,
            offscreen_fraction: if n == 0 { 0.0 } else { offscreen as f64 / n as f64 },
        }
    }
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Generate `cfg.data.count` scenes from `seed` into `out`. A non-empty
/// `out` is refused unless `overwrite` is set, in which case it is cleared.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path, seed: u64, overwrite: bool) -> Result<DatasetSummary> {
    cfg.validate()?;
    if dir_is_nonempty(out)? {
        if !overwrite {
            return Err(Error::validation(format!(
                "{} exists and is not empty (pass --overwrite to replace it)",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let samples = generate_dataset(&cfg.scene, cfg.data.count, seed)?;
    let ds = Dataset { seed, scene: cfg.scene.clone(), samples };
    write_dataset(&ds, out)?;
    Ok(DatasetSummary::of(&ds))
}

/// Options for [`run_train`].
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    pub force: bool,
}

/// Train on the dataset at `data`, writing checkpoints and the JSON-lines
/// log into `out`. `on_log` sees every log line as it is written.
pub fn run_train(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    opts: &TrainOptions,
    mut on_log: impl FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = read_dataset(data)?;
    let prepared = Prepared::new(cfg, &ds)?;
    let start = match &opts.resume {
        Some(path) => {
            let mut ck = Checkpoint::load(path)?;
            ck.check_config(cfg, opts.force)?;
            ck.config = cfg.clone();
            ck
        }
        None => initial_checkpoint(cfg)?,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(TRAIN_LOG);
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(opts.resume.is_some())
        .write(true)
        .truncate(opts.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut io_err = None;
    let outcome = train(cfg, &prepared, start, |line| {
        let text = serde_json::to_string(line).expect("log line serialises");
        if let Err(e) = writeln!(file, "{text}") {
            io_err.get_or_insert(e);
        }
        on_log(&text);
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&log_path, e));
    }
    outcome.last.save(&out.join(FINAL_CHECKPOINT))?;
    if let Some(best) = &outcome.best {
        best.save(&out.join(BEST_CHECKPOINT))?;
    }
    Ok(outcome)
}

/// Evaluate a checkpoint on a dataset directory.
pub fn evaluate(ckpt: &Checkpoint, data: &Path) -> Result<EvalReport> {
    let ds = read_dataset(data)?;
    let prepared = Prepared::new(&ckpt.config, &ds)?;
    evaluate_prepared(&ckpt.config, &prepared, &ckpt.params)
}

/// Evaluate and write the report as pretty JSON.
pub fn run_eval(ckpt_path: &Path, data: &Path, report: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt_path)?;
    let r = evaluate(&ck, data)?;
    let text = serde_json::to_string_pretty(&r).expect("report serialises");
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(report, text + "\n").map_err(|e| Error::io(report, e))?;
    Ok(r)
}

/// Stride between dumped queries.
pub const DUMP_STRIDE: usize = 5;

/// Grey levels `round(255·σ(logit))` for every query, `[N][H2·W2]`.
pub fn logit_images(mask_logits: &[f32], num_queries: usize) -> Vec<Vec<u8>> {
    let hw = mask_logits.len() / num_queries.max(1);
    (0..num_queries)
        .map(|q| {
            mask_logits[q * hw..(q + 1) * hw]
                .iter()
                .map(|&l| (255.0 * sigmoid(l as f64)).round() as u8)
                .collect()
        })
        .collect()
}

/// A map is blank when no pixel reaches probability 0.5.
pub fn is_blank(mask_logits: &[f32]) -> bool {
    mask_logits.iter().all(|&l| l < 0.0)
}

/// Write `σ(mask logits)` of the final prediction for every fifth query as
/// `q{idx}.pgm`, skipping blank maps. Returns the written paths.
pub fn dump_logit_maps(ckpt: &Checkpoint, data: &Path, sample: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = read_dataset(data)?;
    let s = ds
        .samples
        .get(sample)
        .ok_or_else(|| Error::validation(format!("sample {sample} out of range ({} samples)", ds.samples.len())))?;
    let one = Dataset { seed: ds.seed, scene: ds.scene.clone(), samples: vec![s.clone()] };
    let prepared = Prepared::new(&ckpt.config, &one)?;
    let pred = prepared.model.predict(&ckpt.params, &prepared.features[0], &mut Rng::new(ckpt.config.train.seed))?;
    let n = pred.num_queries();
    let (h, w) = pred.mask_size;
    let logits = pred.mask_logits.data();
    let images = logit_images(logits, n);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for q in (0..n).step_by(DUMP_STRIDE) {
        if is_blank(&logits[q * h * w..(q + 1) * h * w]) {
            continue;
        }
        let path = out.join(format!("q{q}.pgm"));
        let img = Pgm { width: w, height: h, pixels: images[q].clone() };
        fs::write(&path, img.to_bytes()).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
