//! Coupled supervised steps, unsupervised steps, the training loop,
//! checkpoints and the metrics log.

mod checkpoint;
mod config;
mod log;
mod step;

pub use checkpoint::{load_model, CheckpointRecord, TrainState, CONFIG_FILE, OPTIMIZER_FILE, PARAMS_FILE, STATE_FILE};
pub use config::TrainConfig;
pub use log::{read_rows, MetricsLog, MetricsRow};
pub use step::{
    coupled_passes, draw_batch, pixel_weights, supervised_grads, supervised_step, supervised_step_with,
    unsupervised_batch_grads, unsupervised_grads, unsupervised_step, CoupledPass, SupervisedDraw, SupervisedOutcome, TrainableModel, UnsupervisedOutcome,
};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index, SliceRandom};

use crate::data::{apply_augment, AugmentParams, SampleRecord, TrainSample};
use crate::denoiser::{Denoiser, NoiseModel};
use crate::diffusion::{rollout_images, NoiseSchedule, StepSubsequence};
use crate::error::{ensure, invalid, Error, Result};
use crate::grid::{ClassMap, Image};
use crate::metrics::{Evaluation, PixelTally};
use crate::nn::AdamW;
use crate::rng;
use crate::scalar::Scalar;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_DIR: &str = "checkpoints/latest";
pub const BEST_DIR: &str = "checkpoints/best";

/// In-memory training, unlabeled and validation samples.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub labeled: Vec<SampleRecord>,
    pub unlabeled: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub best_iou: Option<f64>,
    pub stopped_early: bool,
}

/// Scores `model` on labeled samples with one reverse run per image.
/// Image `i` uses the seed `rng::sub_seed(seed, "eval", i)`.
pub fn evaluate<S: Scalar, M: NoiseModel<S> + ?Sized>(
    model: &M,
    samples: &[TrainSample<S>],
    sched: &NoiseSchedule,
    steps: &StepSubsequence,
    threshold: f64,
    seed: u64,
) -> Result<(Evaluation, Vec<ClassMap>)> {
    const BATCH: usize = 8;
    let mut eval = Evaluation::default();
    let mut preds = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(BATCH).enumerate() {
        let images: Vec<&Image<S>> = chunk.iter().map(|s| &s.image).collect();
        let seeds: Vec<u64> = (0..chunk.len())
            .map(|i| rng::sub_seed(seed, "eval", (c * BATCH + i) as u64))
            .collect();
        let set = rollout_images(model, &images, sched, steps, &seeds)?;
        for (s, tr) in chunk.iter().zip(&set.trajectories) {
            let pred = ClassMap::threshold(&tr.output.probability(), S::of(threshold));
            let gt = s
                .classes
                .as_ref()
                .ok_or_else(|| invalid!("evaluation sample without ground truth"))?;
            eval.push(PixelTally::of(&pred, gt)?);
            preds.push(pred);
        }
    }
    Ok((eval, preds))
}

pub struct Trainer<S: Scalar> {
    pub config: TrainConfig,
    pub model: Denoiser<S>,
    pub optimizer: AdamW<S>,
    pub state: TrainState,
    sched: NoiseSchedule,
    run_dir: Option<PathBuf>,
    log: MetricsLog,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh run. With a run directory, the config, metrics log and
    /// checkpoints are written there.
    pub fn new(config: TrainConfig, run_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let mut model = config.build_model(rng::sub_seed(config.seed, "init", 0))?;
        model.set_training(true);
        let optimizer = AdamW::new(config.optimizer, model.params());
        let log = match run_dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let p = d.join(CONFIG_FILE);
                fs::write(&p, config.to_toml()).map_err(|e| Error::io(&p, e))?;
                MetricsLog::create(&d.join(METRICS_FILE))?
            }
            None => MetricsLog::in_memory(),
        };
        Ok(Self {
            sched: config.schedule()?,
            state: TrainState {
                step: 0,
                epoch: 0,
                best_iou: None,
                stale_validations: 0,
                seed: config.seed,
                optimizer_steps: 0,
                scalar: S::TAG.to_string(),
            },
            config,
            model,
            optimizer,
            run_dir: run_dir.map(Path::to_path_buf),
            log,
        })
    }

    /// Continues a run from `run_dir/checkpoints/latest`; log rows written
    /// after that checkpoint are dropped.
    pub fn resume(run_dir: &Path) -> Result<Self> {
        let rec = CheckpointRecord::<S>::load(&run_dir.join(LATEST_DIR))?;
        let log = MetricsLog::resume(&run_dir.join(METRICS_FILE), rec.state.step)?;
        let mut model = rec.model;
        model.set_training(true);
        Ok(Self {
            sched: rec.config.schedule()?,
            config: rec.config,
            model,
            optimizer: rec.optimizer,
            state: rec.state,
            run_dir: Some(run_dir.to_path_buf()),
            log,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.run_dir.as_deref()
    }

    pub fn checkpoint(&self) -> CheckpointRecord<S> {
        let mut state = self.state.clone();
        state.optimizer_steps = self.optimizer.steps_taken();
        CheckpointRecord {
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            state,
        }
    }

    fn save(&self, rel: &str) -> Result<()> {
        if let Some(d) = &self.run_dir {
            self.checkpoint().save(&d.join(rel))?;
        }
        Ok(())
    }

    fn steps_per_epoch(&self, data: &TrainData) -> u64 {
        data.labeled.len().div_ceil(self.config.labeled_batch) as u64
    }

    fn uses_unlabeled(&self, data: &TrainData) -> bool {
        !self.config.supervised_only
            && !data.unlabeled.is_empty()
            && self.config.unsupervised_per_supervised > 0
            && self.state.step >= self.config.warmup_steps
    }

    fn prepare(&self, sample: &SampleRecord, aug: &mut impl rand::Rng) -> TrainSample<S> {
        if self.config.augment {
            apply_augment(sample, &AugmentParams::sample(aug))
        } else {
            TrainSample::plain(sample)
        }
    }

    /// One optimizer update on the supervised gradient plus, once past
    /// warmup, the gradients of the configured unlabeled batches.
    pub fn iteration(&mut self, data: &TrainData) -> Result<MetricsRow> {
        ensure!(!data.labeled.is_empty(), "training needs at least one labeled sample");
        let cfg = &self.config;
        let s = self.state.step;
        let spe = self.steps_per_epoch(data);
        let (epoch, pos) = ((s / spe) as usize, (s % spe) as usize);
        let mut order: Vec<usize> = (0..data.labeled.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "labeled-order", epoch as u64));
        let lo = pos * cfg.labeled_batch;
        let hi = (lo + cfg.labeled_batch).min(order.len());
        let mut aug = rng::stream(cfg.seed, "augment", s);
        let batch: Vec<TrainSample<S>> = order[lo..hi]
            .iter()
            .map(|&i| self.prepare(&data.labeled[i], &mut aug))
            .collect();
        let draws = draw_batch(&batch, &self.sched, &mut rng::stream(cfg.seed, "supervised", s))?;
        let (loss_l, mut grads) = supervised_grads(&self.model, &batch, &draws, &self.sched, cfg.scratch_weight)?;
        let mut row = MetricsRow {
            step: s + 1,
            epoch,
            loss_l,
            ..MetricsRow::default()
        };
        if self.uses_unlabeled(data) {
            let cfg = &self.config;
            let ratio = cfg.unsupervised_per_supervised;
            let (mut total, mut lambdas, mut fractions) = (0.0, Vec::new(), Vec::new());
            for k in 0..ratio {
                let idx = (s * ratio as u64) + k as u64;
                let mut pick = rng::stream(cfg.seed, "unlabeled-pick", idx);
                let count = cfg.unlabeled_batch.min(data.unlabeled.len());
                let chosen = index::sample(&mut pick, data.unlabeled.len(), count);
                let mut aug = rng::stream(cfg.seed, "augment-unlabeled", idx);
                let samples: Vec<TrainSample<S>> = chosen
                    .iter()
                    .map(|i| self.prepare(&data.unlabeled[i], &mut aug))
                    .collect();
                let images: Vec<&Image<S>> = samples.iter().map(|t| &t.image).collect();
                let (out, mut g) = unsupervised_batch_grads(
                    &self.model,
                    &images,
                    &self.sched,
                    cfg.m,
                    cfg.n,
                    &cfg.signal,
                    &mut rng::stream(cfg.seed, "unsupervised", idx),
                )?;
                g.scale(S::of(cfg.unsupervised_weight / ratio as f64));
                grads.accumulate(g);
                total += out.loss;
                lambdas.extend(out.lambdas);
                fractions.extend(out.active);
            }
            row.loss_u = Some(total / ratio as f64);
            row.set_lambdas(&lambdas, &fractions);
        }
        self.optimizer.step(self.model.params_mut(), &grads);
        self.state.step = s + 1;
        self.state.epoch = ((s + 1) / spe) as usize;
        Ok(row)
    }

    pub fn eval_steps(&self) -> Result<StepSubsequence> {
        StepSubsequence::evenly_spaced(self.config.steps, self.config.eval_steps.unwrap_or(self.config.steps))
    }

    /// Scores the current network on validation samples (no augmentation).
    pub fn validate(&self, val: &[SampleRecord]) -> Result<Evaluation> {
        let samples: Vec<TrainSample<S>> = val.iter().map(TrainSample::plain).collect();
        let steps = self.eval_steps()?;
        Ok(evaluate(&self.model, &samples, &self.sched, &steps, self.config.signal.tau_m, self.config.seed)?.0)
    }

    fn finished(&self, data: &TrainData) -> bool {
        let spe = self.steps_per_epoch(data);
        self.state.step >= spe * self.config.epochs as u64
            || self.config.max_steps.is_some_and(|m| self.state.step >= m)
            || self.config.patience.is_some_and(|p| self.state.stale_validations >= p)
    }

    /// Runs until the epoch or step budget is spent (or patience runs out).
    pub fn train(&mut self, data: &TrainData) -> Result<TrainSummary> {
        ensure!(!data.labeled.is_empty(), "training needs at least one labeled sample");
        let start = Instant::now();
        let spe = self.steps_per_epoch(data);
        while !self.finished(data) {
            let mut row = self.iteration(data)?;
            row.wall_time = start.elapsed().as_secs_f64();
            let epoch_end = self.state.step.is_multiple_of(spe);
            let epoch_done = (self.state.step / spe) as usize;
            let mut improved = false;
            if epoch_end && !data.val.is_empty() && epoch_done.is_multiple_of(self.config.validate_every_epochs) {
                let report = self.validate(&data.val)?.report();
                row.set_validation(&report);
                if self.state.best_iou.is_none_or(|b| report.iou > b) {
                    self.state.best_iou = Some(report.iou);
                    self.state.stale_validations = 0;
                    improved = true;
                } else {
                    self.state.stale_validations += 1;
                }
            }
            self.log.push(row)?;
            if improved {
                self.save(BEST_DIR)?;
            }
            let cadence = self.config.checkpoint_every_steps.is_some_and(|c| c > 0 && self.state.step.is_multiple_of(c));
            if epoch_end || cadence {
                self.save(LATEST_DIR)?;
            }
        }
        self.save(LATEST_DIR)?;
        let stopped_early = self.config.patience.is_some_and(|p| self.state.stale_validations >= p);
        Ok(TrainSummary {
            steps: self.state.step,
            epochs: self.state.step.div_ceil(spe) as usize,
            best_iou: self.state.best_iou,
            stopped_early,
        })
    }
}
