//! Training loop and train-set evaluation.

use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::optim::AdamW;
use crate::data::{Dataset, FeatureBundle, Sample, StubEncoders};
use crate::error::{Error, Result};
use crate::loss::{total_loss, Targets};
use crate::metrics::{EvalReport, Evaluator};
use crate::model::{assemble_semantic_map, init_params, Ctx, Model, ParamStore};
use crate::tensor::{hash_pair, Graph, Rng, Tensor};

const ENCODER_KEY: u64 = 0x454e_4344;
const INIT_KEY: u64 = 0x494e_4954;
const BATCH_KEY: u64 = 0x4241_5443;
const NOISE_KEY: u64 = 0x4e4f_4953;
const EVAL_KEY: u64 = 0x4556_414c;

/// The frozen encoders of an experiment.
pub fn encoders_for(cfg: &ExperimentConfig) -> Result<StubEncoders> {
    StubEncoders::new(&cfg.encoder, cfg.scene.num_categories, hash_pair(cfg.train.seed, ENCODER_KEY))
}

/// Freshly initialised parameters for `cfg`.
pub fn initial_params(cfg: &ExperimentConfig) -> Result<ParamStore<f32>> {
    init_params(&cfg.model, &cfg.geometry(), hash_pair(cfg.train.seed, INIT_KEY))
}

/// A checkpoint at iteration 0.
pub fn initial_checkpoint(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let params = initial_params(cfg)?;
    let optim = AdamW::new(&params);
    Ok(Checkpoint { config: cfg.clone(), iteration: 0, best_m_j: None, params, optim })
}

/// Encoded features and supervision for every sample of a dataset.
pub struct Prepared {
    pub model: Model,
    pub features: Vec<FeatureBundle<f32>>,
    pub targets: Vec<Targets>,
    pub presence: Vec<Vec<bool>>,
    pub labels: Vec<Vec<u32>>,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Self> {
        cfg.check_scene(&dataset.scene)?;
        let model = Model::new(cfg.model.clone(), cfg.geometry())?;
        let encoders = encoders_for(cfg)?;
        let mask_size = model.geometry.mask_size();
        let mut out = Prepared {
            model,
            features: Vec::with_capacity(dataset.samples.len()),
            targets: Vec::with_capacity(dataset.samples.len()),
            presence: Vec::with_capacity(dataset.samples.len()),
            labels: Vec::with_capacity(dataset.samples.len()),
        };
        for s in &dataset.samples {
            check_sample(cfg, s)?;
            out.features.push(encoders.encode(s)?);
            out.targets.push(Targets::from_sample(s, mask_size)?);
            out.presence.push(s.presence.clone());
            out.labels.push(s.label_map());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn check_sample(cfg: &ExperimentConfig, s: &Sample) -> Result<()> {
    if s.height() != cfg.scene.height || s.width() != cfg.scene.width || s.presence.len() != cfg.scene.num_categories {
        return Err(Error::validation(format!(
            "sample at frame {} does not match the configured K and image size",
            s.frame_index
        )));
    }
    Ok(())
}

/// Loss components of one iteration, averaged over the batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub loss: f64,
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub pac: f64,
}

/// Samples drawn at `iteration`: a prefix of a shuffle keyed by the
/// iteration, cycling when the batch exceeds the dataset.
pub fn batch_indices(seed: u64, iteration: u64, batch_size: usize, count: usize) -> Vec<usize> {
    let mut rng = Rng::new(seed).split(BATCH_KEY).split(iteration);
    let mut order: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut order);
    (0..batch_size).map(|i| order[i % count]).collect()
}

/// Gradients of the batch-mean loss, keyed by parameter name.
pub fn batch_gradients(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    params: &ParamStore<f32>,
    iteration: u64,
) -> Result<(ParamStore<f32>, StepStats)> {
    let idx = batch_indices(cfg.train.seed, iteration, cfg.train.batch_size, prepared.len());
    let noise_root = Rng::new(cfg.train.seed).split(NOISE_KEY).split(iteration);
    let mut grads = ParamStore::new();
    let mut stats = StepStats::default();
    let scale = 1.0 / idx.len() as f32;
    for (slot, &i) in idx.iter().enumerate() {
        let noise = prepared.model.sample_noise::<f32>(&mut noise_root.split(slot as u64));
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, params);
        let fwd = prepared.model.forward(&mut ctx, &prepared.features[i], Some(&prepared.presence[i]), noise.as_ref())?;
        let loss = total_loss(&mut g, &fwd, &prepared.targets[i], &cfg.loss)?;
        let value = g.scalar(loss.total) as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {value} at iteration {iteration} (sample {i}): cls {}, bce {}, dice {}, pac {}",
                loss.cls, loss.bce, loss.dice, loss.pac
            )));
        }
        let n = idx.len() as f64;
        stats.loss += value / n;
        stats.cls += loss.cls / n;
        stats.bce += loss.bce / n;
        stats.dice += loss.dice / n;
        stats.pac += loss.pac / n;
        let gr = g.backward(loss.total)?;
        for (name, var) in g.params() {
            let Some(d) = gr.get(*var) else { continue };
            match grads.get_mut(name) {
                Ok(acc) => {
                    let acc: &mut Tensor<f32> = acc;
                    for (a, &b) in acc.data_mut().iter_mut().zip(d.data()) {
                        *a += b * scale;
                    }
                }
                Err(_) => grads.insert(name.clone(), d.map(|v| v * scale)),
            }
        }
    }
    Ok((grads, stats))
}

/// Run the model over prepared samples and score the assembled maps.
pub fn evaluate_prepared(cfg: &ExperimentConfig, prepared: &Prepared, params: &ParamStore<f32>) -> Result<EvalReport> {
    let mut ev = Evaluator::new(cfg.scene.num_categories);
    let root = Rng::new(cfg.train.seed).split(EVAL_KEY);
    let out = (cfg.scene.height, cfg.scene.width);
    for (i, f) in prepared.features.iter().enumerate() {
        let pred = prepared.model.predict(params, f, &mut root.split(i as u64))?;
        ev.add(&assemble_semantic_map(&pred, out), &prepared.labels[i])?;
    }
    Ok(ev.finish())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogLine {
    Step {
        iteration: u64,
        #[serde(flatten)]
        stats: StepStats,
    },
    Eval {
        iteration: u64,
        train_m_j: f64,
        train_m_f: f64,
    },
}

pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Checkpoint with the best train-set `M_J` among the evaluations of
    /// this run, if one beat the incoming best.
    pub best: Option<Checkpoint>,
    pub final_report: EvalReport,
}

/// Train from `start` until `cfg.train.iterations` total iterations.
/// Every iteration's randomness is keyed by its index, so resuming from a
/// saved checkpoint reproduces an uninterrupted run exactly.
pub fn train(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    start: Checkpoint,
    mut log: impl FnMut(&LogLine),
) -> Result<TrainOutcome> {
    if prepared.is_empty() && cfg.train.iterations > start.iteration {
        return Err(Error::validation("cannot train on an empty dataset"));
    }
    let mut ck = start;
    let mut best = None;
    let total = cfg.train.iterations;
    while ck.iteration < total {
        let it = ck.iteration;
        let (grads, stats) = batch_gradients(cfg, prepared, &ck.params, it)?;
        ck.optim.update(&mut ck.params, &grads, &cfg.optim)?;
        ck.iteration += 1;
        if cfg.train.log_every > 0 && (it % cfg.train.log_every == 0 || ck.iteration == total) {
            log(&LogLine::Step { iteration: it, stats });
        }
        let eval_now = cfg.train.eval_every > 0 && ck.iteration % cfg.train.eval_every == 0 && ck.iteration < total;
        if eval_now {
            let r = evaluate_prepared(cfg, prepared, &ck.params)?;
            log(&LogLine::Eval { iteration: ck.iteration, train_m_j: r.m_j, train_m_f: r.m_f });
            if ck.best_m_j.map_or(true, |b| r.m_j > b) {
                ck.best_m_j = Some(r.m_j);
                best = Some(ck.clone());
            }
        }
    }
    let final_report = evaluate_prepared(cfg, prepared, &ck.params)?;
    log(&LogLine::Eval { iteration: ck.iteration, train_m_j: final_report.m_j, train_m_f: final_report.m_f });
    if ck.best_m_j.map_or(true, |b| final_report.m_j > b) {
        ck.best_m_j = Some(final_report.m_j);
        best = Some(ck.clone());
    }
    Ok(TrainOutcome { last: ck, best, final_report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_keyed_by_iteration() {
        assert_eq!(batch_indices(7, 3, 4, 32), batch_indices(7, 3, 4, 32));
        assert_ne!(batch_indices(7, 3, 4, 32), batch_indices(7, 4, 4, 32));
        let b = batch_indices(1, 0, 5, 3);
        assert_eq!(b.len(), 5);
        assert_eq!(b[0], b[3]);
        let mut u = batch_indices(1, 9, 8, 8);
        u.sort();
        assert_eq!(u, (0..8).collect::<Vec<_>>());
    }
}
