//! Semi-supervised optimisation of the joint denoising + age objective.
//!
//! Every batch contributes the noise-prediction loss; batches that carry
//! labels also contribute the standardised age MSE, computed over labeled
//! samples only. Randomness for step `s` comes from fixed seed streams, so a
//! run is reproducible and resumable from the step count alone.

mod adam;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};

use crate::data::{Cohort, ImageSet, Manifest};
use crate::diffusion::diffusion_loss;
use crate::error::{Error, Result};
use crate::networks::{AgeNormalization, ModelBundle};
use crate::rng;

pub const DEFAULT_MAX_STEPS: usize = 1000;
pub const METRICS_FILE: &str = "metrics.csv";
const TRAINER_STATE_FILE: &str = "trainer.json";
const OPTIM_FILE: &str = "optim.safetensors";
const EMA_FILE: &str = "ema.safetensors";
const RECALIBRATION_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// Total optimizer steps. Mutually exclusive with `epochs`.
    pub max_steps: Option<usize>,
    pub epochs: Option<usize>,
    pub age_loss_weight: f64,
    /// Share of unlabeled batches per epoch. `None` uses every unlabeled
    /// batch, i.e. the natural proportion of the pools.
    pub unlabeled_fraction: Option<f64>,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_interval: usize,
    pub precision: Precision,
    /// Exponential moving average of the weights, off unless set.
    pub ema_decay: Option<f64>,
    pub log_every: usize,
    /// Refit the age head's batch-norm statistics on the labeled training
    /// images, dropout off, when training ends.
    pub recalibrate_age_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            adam: AdamConfig::default(),
            max_steps: None,
            epochs: None,
            age_loss_weight: 1.0,
            unlabeled_fraction: None,
            seed: 0,
            checkpoint_interval: 0,
            precision: Precision::F32,
            ema_decay: None,
            log_every: 50,
            recalibrate_age_head: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.adam.validate()?;
        if !(self.age_loss_weight >= 0.0 && self.age_loss_weight.is_finite()) {
            return Err(Error::Config("age_loss_weight must be non-negative".into()));
        }
        if self.max_steps.is_some() && self.epochs.is_some() {
            return Err(Error::Config("set either max_steps or epochs, not both".into()));
        }
        if let Some(f) = self.unlabeled_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config("unlabeled_fraction must lie in [0, 1]".into()));
            }
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, steps_per_epoch: usize) -> usize {
        match (self.max_steps, self.epochs) {
            (Some(s), _) => s,
            (None, Some(e)) => e * steps_per_epoch,
            (None, None) => DEFAULT_MAX_STEPS,
        }
    }
}

/// Scalar loss terms of one batch. `age_term` is zero when no sample in the
/// batch is labeled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub diffusion_term: f64,
    pub age_term: f64,
    pub total: f64,
    pub labeled: usize,
}

/// The differentiable total together with its scalar breakdown.
pub struct LossTerms {
    pub total: Tensor,
    pub loss: BatchLoss,
    /// Training-mode predictions (years) for the labeled samples.
    pub predicted_ages: Vec<f64>,
}

fn step_stream(step: u64, lane: u64) -> u64 {
    step * 4 + lane
}

/// Per-sample steps and noise used by the denoising term at `step`.
pub fn diffusion_draws(
    seed: u64,
    step: u64,
    num_steps: usize,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<(Vec<usize>, Tensor)> {
    let mut rng = rng::stream(seed, step_stream(step, 0));
    let ts = (0..shape[0]).map(|_| rng.random_range(0..num_steps)).collect();
    let eps = rng::normal_tensor(&mut rng, shape, dtype, device)?;
    Ok((ts, eps))
}

/// Generator for the age head's dropout masks at `step`.
pub fn dropout_rng(seed: u64, step: u64) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, step_stream(step, 1))
}

/// Mean squared error between standardised predictions and targets.
pub fn standardized_age_loss(pred_std: &Tensor, target_std: &Tensor) -> Result<Tensor> {
    Ok((pred_std - target_std)?.sqr()?.mean_all()?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn finite(v: f64, term: &'static str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, step: step as usize })
    }
}

/// Forward pass of the combined objective for one batch, without updating.
pub fn compute_loss(
    model: &ModelBundle,
    x0: &Tensor,
    ages: &[Option<f64>],
    cfg: &TrainConfig,
    step: u64,
) -> Result<LossTerms> {
    let n = x0.dim(0)?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if ages.len() != n {
        return Err(Error::Contract(format!("{} labels for a batch of {n}", ages.len())));
    }
    let sched = model.schedule();
    let (ts, eps) = diffusion_draws(cfg.seed, step, sched.num_steps(), x0.dims(), x0.dtype(), x0.device())?;
    let x_t = sched.q_sample_batch(x0, &ts, &eps)?;
    let z = model.semantic_encode(x0)?;
    let eps_pred = model.noise_predict(&x_t, &ts, &z)?;
    let diff = diffusion_loss(&eps_pred, &eps)?;
    let diffusion_term = finite(scalar(&diff)?, "diffusion", step)?;

    let labeled: Vec<u32> = (0..n as u32).filter(|&i| ages[i as usize].is_some()).collect();
    if labeled.is_empty() {
        return Ok(LossTerms {
            total: diff,
            loss: BatchLoss {
                diffusion_term,
                age_term: 0.0,
                total: diffusion_term,
                labeled: 0,
            },
            predicted_ages: Vec::new(),
        });
    }

    let norm = model.age_normalization();
    let z_l = if labeled.len() == n {
        z
    } else {
        z.index_select(&Tensor::new(labeled.as_slice(), x0.device())?, 0)?
    };
    let mut drop = dropout_rng(cfg.seed, step);
    let pred = model.age_predict(&z_l, Some(&mut drop))?;
    let pred_std = ((&pred - norm.mean)? / norm.std)?;
    let target: Vec<f64> = labeled
        .iter()
        .map(|&i| norm.standardize(ages[i as usize].expect("labeled")))
        .collect();
    let target = Tensor::from_vec(target, labeled.len(), x0.device())?.to_dtype(x0.dtype())?;
    let age = standardized_age_loss(&pred_std, &target)?;
    let age_term = finite(scalar(&age)?, "age", step)?;
    let total = (&diff + (age * cfg.age_loss_weight)?)?;
    let total_v = finite(scalar(&total)?, "total", step)?;
    Ok(LossTerms {
        total,
        loss: BatchLoss {
            diffusion_term,
            age_term,
            total: total_v,
            labeled: labeled.len(),
        },
        predicted_ages: pred.to_dtype(DType::F64)?.to_vec1()?,
    })
}

/// One optimizer update on a batch. Non-finite losses abort before any
/// weight changes.
pub fn training_step(
    model: &ModelBundle,
    opt: &mut Adam,
    x0: &Tensor,
    ages: &[Option<f64>],
    cfg: &TrainConfig,
    step: u64,
) -> Result<BatchLoss> {
    let terms = compute_loss(model, x0, ages, cfg, step)?;
    let grads = terms.total.backward()?;
    opt.step(model.store().params(), &grads)?;
    Ok(terms.loss)
}

/// Batches of one epoch: whole labeled and whole unlabeled batches,
/// interleaved evenly.
pub fn epoch_batches(
    seed: u64,
    epoch: u64,
    labeled: &[usize],
    unlabeled: &[usize],
    batch_size: usize,
    unlabeled_fraction: Option<f64>,
) -> Vec<Vec<usize>> {
    let mut rng = rng::stream(seed, step_stream(epoch, 2));
    let mut l = labeled.to_vec();
    let mut u = unlabeled.to_vec();
    l.shuffle(&mut rng);
    u.shuffle(&mut rng);
    let lb: Vec<Vec<usize>> = l.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let mut ub: Vec<Vec<usize>> = u.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if let Some(f) = unlabeled_fraction {
        let want = if f >= 1.0 {
            ub.len()
        } else {
            (f / (1.0 - f) * lb.len() as f64).round() as usize
        };
        ub.truncate(want.min(ub.len()));
    }
    let mut keyed: Vec<(f64, usize, Vec<usize>)> = Vec::with_capacity(lb.len() + ub.len());
    let nl = lb.len() as f64;
    let nu = ub.len() as f64;
    keyed.extend(lb.into_iter().enumerate().map(|(i, b)| ((i as f64 + 0.5) / nl, 0, b)));
    keyed.extend(ub.into_iter().enumerate().map(|(j, b)| ((j as f64 + 0.5) / nu, 1, b)));
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, b)| b).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub diffusion_term: f64,
    pub age_term: f64,
    pub total: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    step: usize,
    config: TrainConfig,
}

/// Owns the model, optimizer and data for a training run.
pub struct Trainer {
    model: ModelBundle,
    data: ImageSet,
    cfg: TrainConfig,
    opt: Adam,
    step: usize,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    steps_per_epoch: usize,
    plan: Option<(u64, Vec<Vec<usize>>)>,
    ema: Option<BTreeMap<String, Tensor>>,
    log: Vec<LogRow>,
    clock: Instant,
    time_offset: f64,
}

impl Trainer {
    /// Fresh run: fits the age normalisation on the labeled training ages.
    pub fn new(mut model: ModelBundle, data: ImageSet, cfg: TrainConfig) -> Result<Self> {
        let ages: Vec<f64> = data.ages.iter().flatten().copied().collect();
        model.set_age_normalization(AgeNormalization::fit(&ages));
        let ema = match cfg.ema_decay {
            Some(_) => Some(model.store().named_tensors().into_iter().map(|(k, v)| (k, v.copy().expect("copy"))).collect()),
            None => None,
        };
        Self::assemble(model, data, cfg, 0, ema)
    }

    fn assemble(
        model: ModelBundle,
        data: ImageSet,
        cfg: TrainConfig,
        step: usize,
        ema: Option<BTreeMap<String, Tensor>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.dtype() != cfg.precision.dtype() {
            return Err(Error::Config(format!(
                "model dtype {:?} does not match precision {:?}",
                model.dtype(),
                cfg.precision
            )));
        }
        if data.size != model.image_size() {
            return Err(Error::Validation(format!(
                "training images are {}px, model expects {}px",
                data.size,
                model.image_size()
            )));
        }
        let labeled = data.labeled_indices();
        let unlabeled = data.unlabeled_indices();
        if cfg.age_loss_weight > 0.0 && labeled.is_empty() {
            return Err(Error::Validation("age_loss_weight > 0 but no training record has an age".into()));
        }
        let steps_per_epoch = epoch_batches(cfg.seed, 0, &labeled, &unlabeled, cfg.batch_size, cfg.unlabeled_fraction).len();
        if steps_per_epoch == 0 {
            return Err(Error::EmptyBatch);
        }
        let opt = Adam::new(cfg.adam, cfg.learning_rate)?;
        Ok(Self {
            model,
            data,
            cfg,
            opt,
            step,
            labeled,
            unlabeled,
            steps_per_epoch,
            plan: None,
            ema,
            log: Vec::new(),
            clock: Instant::now(),
            time_offset: 0.0,
        })
    }

    /// Continue from a checkpoint directory written by [`Trainer::save_checkpoint`].
    pub fn resume(dir: &Path, data: ImageSet, device: &Device) -> Result<Self> {
        let model = ModelBundle::load(dir, device)?;
        let path = dir.join(TRAINER_STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainerState = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        let ema = if state.config.ema_decay.is_some() {
            let p = dir.join(EMA_FILE);
            let t = candle_core::safetensors::load(&p, device).map_err(|e| Error::format(&p, e))?;
            Some(t.into_iter().collect())
        } else {
            None
        };
        let mut trainer = Self::assemble(model, data, state.config, state.step, ema)?;
        trainer.opt.load(&dir.join(OPTIM_FILE), device)?;
        Ok(trainer)
    }

    pub fn model(&self) -> &ModelBundle {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.total_steps(self.steps_per_epoch)
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let epoch = (step / self.steps_per_epoch) as u64;
        if self.plan.as_ref().map(|p| p.0) != Some(epoch) {
            let batches = epoch_batches(
                self.cfg.seed,
                epoch,
                &self.labeled,
                &self.unlabeled,
                self.cfg.batch_size,
                self.cfg.unlabeled_fraction,
            );
            self.plan = Some((epoch, batches));
        }
        self.plan.as_ref().expect("plan").1[step % self.steps_per_epoch].clone()
    }

    /// Run one step on the next scheduled batch.
    pub fn train_step(&mut self) -> Result<BatchLoss> {
        let idx = self.batch_indices(self.step);
        let x0 = self.data.batch(&idx, self.model.dtype(), self.model.device())?;
        let ages: Vec<Option<f64>> = idx.iter().map(|&i| self.data.ages[i]).collect();
        let loss = training_step(&self.model, &mut self.opt, &x0, &ages, &self.cfg, self.step as u64)?;
        if let (Some(decay), Some(shadow)) = (self.cfg.ema_decay, self.ema.as_mut()) {
            for (name, var) in self.model.store().params() {
                let s = shadow.get_mut(name).expect("ema entry");
                *s = ((&*s * decay)? + (var.as_tensor().detach() * (1.0 - decay))?)?;
            }
        }
        self.step += 1;
        self.log.push(LogRow {
            step: self.step,
            diffusion_term: loss.diffusion_term,
            age_term: loss.age_term,
            total: loss.total,
            wall_time: self.time_offset + self.clock.elapsed().as_secs_f64(),
        });
        Ok(loss)
    }

    /// Run `n` more steps (bounded by the configured total), writing metrics
    /// and checkpoints under `out` when given. On a non-finite loss the
    /// current, still-finite weights are checkpointed before returning the error.
    pub fn run_steps(&mut self, n: usize, out: Option<&Path>) -> Result<()> {
        let end = (self.step + n).min(self.total_steps());
        let mut metrics = match out {
            Some(dir) => Some(self.open_metrics(dir)?),
            None => None,
        };
        while self.step < end {
            match self.train_step() {
                Ok(loss) => {
                    let row = *self.log.last().expect("row");
                    if let Some((path, file)) = metrics.as_mut() {
                        writeln!(
                            file,
                            "{},{},{},{},{:.3}",
                            row.step, row.diffusion_term, row.age_term, row.total, row.wall_time
                        )
                        .map_err(|e| Error::io(&*path, e))?;
                    }
                    if self.cfg.log_every > 0 && self.step % self.cfg.log_every == 0 {
                        log::info!(
                            "step {}/{}: diffusion {:.4} age {:.4} total {:.4}",
                            self.step,
                            self.total_steps(),
                            loss.diffusion_term,
                            loss.age_term,
                            loss.total
                        );
                    }
                    if let Some(dir) = out {
                        if self.cfg.checkpoint_interval > 0 && self.step % self.cfg.checkpoint_interval == 0 {
                            self.save_checkpoint(&checkpoint_dir(dir, self.step))?;
                        }
                    }
                }
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = out {
                        let ckpt = checkpoint_dir(dir, self.step);
                        self.save_checkpoint(&ckpt)?;
                        log::error!("{e}; last good state saved to {}", ckpt.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    pub fn run(&mut self, out: Option<&Path>) -> Result<()> {
        self.run_steps(self.total_steps().saturating_sub(self.step), out)
    }

    fn open_metrics(&mut self, dir: &Path) -> Result<(PathBuf, File)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let header = "step,diffusion_term,age_term,total,wall_time";
        if self.step == 0 || !path.exists() {
            fs::write(&path, format!("{header}\n")).map_err(|e| Error::io(&path, e))?;
        } else {
            // Drop rows past the resume point so the log stays step-indexed.
            let rows = read_metrics(&path)?;
            let mut text = format!("{header}\n");
            for r in rows.iter().filter(|r| r.step <= self.step) {
                text.push_str(&format!("{},{},{},{},{:.3}\n", r.step, r.diffusion_term, r.age_term, r.total, r.wall_time));
                self.time_offset = r.wall_time;
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        let file = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path, file))
    }

    fn record_provenance(&mut self) {
        self.model.provenance.train_steps = self.step;
        self.model.provenance.train_config = serde_json::to_value(&self.cfg).ok();
    }

    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<()> {
        self.record_provenance();
        self.model.save(dir)?;
        self.opt.save(&dir.join(OPTIM_FILE))?;
        if let Some(shadow) = &self.ema {
            let p = dir.join(EMA_FILE);
            let t: HashMap<String, Tensor> = shadow.clone().into_iter().collect();
            candle_core::safetensors::save(&t, &p).map_err(|e| Error::format(&p, e))?;
        }
        let state = TrainerState {
            step: self.step,
            config: self.cfg.clone(),
        };
        let path = dir.join(TRAINER_STATE_FILE);
        let text = serde_json::to_string_pretty(&state).expect("trainer state serialises");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// The trained model, with averaged weights swapped in when EMA is on.
    pub fn into_model(mut self) -> Result<ModelBundle> {
        self.record_provenance();
        if let Some(shadow) = self.ema.take() {
            let mut tensors: HashMap<String, Tensor> = self.model.store().named_tensors().into_iter().collect();
            for (k, v) in shadow {
                if self.model.store().params().contains_key(&k) {
                    tensors.insert(k, v);
                }
            }
            self.model.store().load_from(&tensors)?;
        }
        if self.cfg.recalibrate_age_head && self.labeled.len() >= 2 {
            let mut zs = Vec::new();
            for chunk in self.labeled.chunks(RECALIBRATION_BATCH) {
                let x = self.data.batch(chunk, self.model.dtype(), self.model.device())?;
                zs.push(self.model.semantic_encode(&x)?.detach());
            }
            self.model.recalibrate_age_head(&Tensor::cat(&zs, 0)?)?;
        }
        Ok(self.model)
    }
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}"))
}

pub fn read_metrics(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e)))
        .collect()
}

pub struct FitOutput {
    pub model: ModelBundle,
    pub log: Vec<LogRow>,
}

/// Train on the manifest's training cohort. Writes `metrics.csv`,
/// periodic checkpoints and the final bundle (`model/`) under `out`.
pub fn fit(manifest: &Manifest, cfg: &TrainConfig, model: ModelBundle, out: Option<&Path>) -> Result<FitOutput> {
    let data = training_set(manifest, model.image_size())?;
    finish(Trainer::new(model, data, cfg.clone())?, out)
}

/// Continue a run from `checkpoint` to its configured total.
pub fn resume_fit(manifest: &Manifest, checkpoint: &Path, device: &Device, out: Option<&Path>) -> Result<FitOutput> {
    let size = ModelBundle::load(checkpoint, device)?.image_size();
    let data = training_set(manifest, size)?;
    let trainer = Trainer::resume(checkpoint, data, device)?;
    log::info!("resuming at step {}", trainer.step());
    finish(trainer, out)
}

fn training_set(manifest: &Manifest, size: usize) -> Result<ImageSet> {
    let records = manifest.cohort(Cohort::Train);
    if records.is_empty() {
        return Err(Error::Validation("manifest has no train-cohort records".into()));
    }
    let data = ImageSet::load(&records, size)?;
    log::info!(
        "training on {} images ({} labeled)",
        data.len(),
        data.labeled_indices().len()
    );
    Ok(data)
}

fn finish(mut trainer: Trainer, out: Option<&Path>) -> Result<FitOutput> {
    trainer.run(out)?;
    let log = trainer.log().to_vec();
    let model = trainer.into_model()?;
    if let Some(dir) = out {
        model.save(&dir.join("model"))?;
    }
    Ok(FitOutput { model, log })
}
