//! Supervised training of the decoder with an L1 objective, online noise
//! synthesis, AdamW and cosine learning-rate annealing.
//!
//! All randomness of iteration `t` derives from `(seed, t)`, so a run resumed
//! from a checkpoint retraces the uninterrupted trajectory exactly.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::{Image, RangeTag};
use crate::model::{Denoiser, Mode};
use crate::noise::NoiseSpec;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Element, Tensor};

/// Smoothing of the running loss.
pub const LOSS_EMA_BETA: f64 = 0.98;

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.safetensors";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn default_noise() -> NoiseSpec {
    NoiseSpec::gaussian(15.0).expect("valid level")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub optimizer: AdamWConfig,
    #[serde(default = "default_noise")]
    pub train_noise: NoiseSpec,
    pub seed: u64,
    /// Random dihedral transform per patch.
    pub augment: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 300_000,
            batch_size: 16,
            patch_size: 128,
            lr_init: 3e-4,
            lr_final: 1e-6,
            optimizer: AdamWConfig::default(),
            train_noise: default_noise(),
            seed: 0,
            augment: true,
            checkpoint_every: 10_000,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::param("iterations", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be > 0"));
        }
        if self.patch_size == 0 || self.patch_size % 32 != 0 {
            return Err(Error::param(
                "patch_size",
                format!("must be a positive multiple of 32, got {}", self.patch_size),
            ));
        }
        if !(self.lr_final > 0.0 && self.lr_init >= self.lr_final && self.lr_init.is_finite()) {
            return Err(Error::param(
                "lr_init",
                format!("need lr_init >= lr_final > 0, got {} and {}", self.lr_init, self.lr_final),
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::param("checkpoint_every", "must be > 0"));
        }
        if self.log_every == 0 {
            return Err(Error::param("log_every", "must be > 0"));
        }
        self.optimizer.validate()
    }
}

/// Learning rate used at iteration `iter` of `cfg`.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> Result<f64> {
    cosine_lr(iter, cfg.iterations, cfg.lr_init, cfg.lr_final)
}

/// Seed from which everything random in iteration `iter` derives.
pub fn batch_seed(cfg: &TrainConfig, iter: u64) -> u64 {
    derive_seed(cfg.seed, &[iter])
}

/// Pixel-aligned clean/noisy patches in unit range, NCHW.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub clean: Tensor,
    pub noisy: Tensor,
    /// Dihedral transform index applied to each patch.
    pub transforms: Vec<u8>,
    /// Noise seed of each patch.
    pub noise_seeds: Vec<u64>,
    /// Source image of each patch.
    pub sources: Vec<usize>,
}

/// Draws the batch of iteration `iter`: random crops, optional dihedral
/// transforms, and fresh noise per patch.
pub fn sample_batch(data: &Dataset, cfg: &TrainConfig, iter: u64) -> Result<Batch> {
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let p = cfg.patch_size;
    let base = batch_seed(cfg, iter);
    let mut clean = Vec::with_capacity(cfg.batch_size);
    let mut noisy = Vec::with_capacity(cfg.batch_size);
    let mut transforms = Vec::with_capacity(cfg.batch_size);
    let mut noise_seeds = Vec::with_capacity(cfg.batch_size);
    let mut sources = Vec::with_capacity(cfg.batch_size);
    for i in 0..cfg.batch_size {
        let seed = derive_seed(base, &[i as u64]);
        let mut rng = stream(seed, 0);
        let idx = rng.random_range(0..data.len());
        let img = &data.images[idx];
        if img.height() < p || img.width() < p {
            return Err(Error::Dataset(format!(
                "image `{}` ({}x{}) is smaller than the {p}x{p} training patch",
                data.names[idx],
                img.height(),
                img.width()
            )));
        }
        let y = rng.random_range(0..=img.height() - p);
        let x = rng.random_range(0..=img.width() - p);
        let t = if cfg.augment { rng.random_range(0..8u8) } else { 0 };
        let patch = img.crop(y, x, p, p)?.to_range(RangeTag::Unit).dihedral(t);
        let noise_seed = derive_seed(seed, &[1]);
        noisy.push(cfg.train_noise.with_seed(noise_seed).apply(&patch)?);
        clean.push(patch);
        transforms.push(t);
        noise_seeds.push(noise_seed);
        sources.push(idx);
    }
    Ok(Batch {
        clean: Image::to_tensor(&clean)?,
        noisy: Image::to_tensor(&noisy)?,
        transforms,
        noise_seeds,
        sources,
    })
}

/// Mean absolute error over all elements.
pub fn l1_loss<T: Element>(denoised: &Tensor<T>, clean: &Tensor<T>) -> Result<f64> {
    if denoised.shape() != clean.shape() {
        return Err(Error::Shape(format!(
            "l1 loss between {:?} and {:?}",
            denoised.shape(),
            clean.shape()
        )));
    }
    let sum: f64 = denoised
        .data()
        .iter()
        .zip(clean.data())
        .map(|(a, b)| (a.f64() - b.f64()).abs())
        .sum();
    Ok(sum / denoised.len() as f64)
}

/// Gradient of [`l1_loss`] with respect to `denoised` (zero at ties).
pub fn l1_grad<T: Element>(denoised: &Tensor<T>, clean: &Tensor<T>) -> Tensor<T> {
    let scale = 1.0 / denoised.len() as f64;
    let data = denoised
        .data()
        .iter()
        .zip(clean.data())
        .map(|(a, b)| {
            let d = a.f64() - b.f64();
            T::of(if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            })
        })
        .collect();
    Tensor::from_vec(denoised.shape(), data)
}

/// Result of a completed run.
pub struct TrainOutcome {
    pub model: Denoiser,
    pub checkpoint: Checkpoint,
    /// Batch loss at iteration 0.
    pub initial_loss: f64,
    /// Bias-corrected moving average of the batch loss at the end.
    pub final_running_loss: f64,
}

/// Step-wise training driver.
pub struct Trainer<'a> {
    model: Denoiser,
    data: &'a Dataset,
    cfg: TrainConfig,
    optimizer: AdamW,
    iteration: u64,
    loss_ema: f64,
    initial_loss: Option<f64>,
    out_dir: Option<PathBuf>,
}

fn check_dataset(data: &Dataset, cfg: &TrainConfig, channels: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    for (img, name) in data.images.iter().zip(&data.names) {
        if img.height() < cfg.patch_size || img.width() < cfg.patch_size {
            return Err(Error::Dataset(format!(
                "image `{name}` ({}x{}) is smaller than the {p}x{p} training patch",
                img.height(),
                img.width(),
                p = cfg.patch_size,
            )));
        }
        if img.channels() != channels {
            return Err(Error::Dataset(format!(
                "image `{name}` has {} channel(s) but the model takes {channels}",
                img.channels()
            )));
        }
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    /// Starts a fresh run. With `out_dir`, the loss log and checkpoints are
    /// written there.
    pub fn new(mut model: Denoiser, data: &'a Dataset, cfg: TrainConfig, out_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        check_dataset(data, &cfg, model.config().channels_in)?;
        model.set_mode(Mode::Train);
        let sizes: Vec<usize> = model.zero_gradients().slices().iter().map(|s| s.len()).collect();
        let optimizer = AdamW::new(cfg.optimizer, &sizes);
        let trainer = Trainer {
            model,
            data,
            cfg,
            optimizer,
            iteration: 0,
            loss_ema: 0.0,
            initial_loss: None,
            out_dir: out_dir.map(Path::to_path_buf),
        };
        trainer.reset_log()?;
        Ok(trainer)
    }

    /// Continues a run from a checkpoint that carries training state.
    pub fn resume(
        ckpt: &Checkpoint,
        encoder: crate::backbone::FrozenEncoder,
        data: &'a Dataset,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        let training = ckpt
            .meta
            .training
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        let mut model = ckpt.restore(encoder)?;
        let optimizer = ckpt.optimizer(&model)?.expect("training state present");
        let cfg = training.config;
        cfg.validate()?;
        check_dataset(data, &cfg, model.config().channels_in)?;
        model.set_mode(Mode::Train);
        let trainer = Trainer {
            model,
            data,
            cfg,
            optimizer,
            iteration: ckpt.meta.iteration,
            loss_ema: training.loss_ema,
            initial_loss: training.initial_loss,
            out_dir: out_dir.map(Path::to_path_buf),
        };
        trainer.reset_log()?;
        Ok(trainer)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.initial_loss
    }

    /// Bias-corrected moving average of the batch loss.
    pub fn running_loss(&self) -> Option<f64> {
        (self.iteration > 0).then(|| self.loss_ema / (1.0 - LOSS_EMA_BETA.powf(self.iteration as f64)))
    }

    /// Keeps the header and rows logged before the current iteration.
    fn reset_log(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOSS_LOG);
        let mut text = String::from("iteration,lr,loss\n");
        if self.iteration > 0 {
            if let Ok(old) = std::fs::read_to_string(&path) {
                for line in old.lines().skip(1) {
                    let it = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                    if it.is_some_and(|it| it < self.iteration) {
                        text.push_str(line);
                        text.push('\n');
                    }
                }
            }
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn log(&self, iter: u64, lr: f64, loss: f64) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        let path = dir.join(LOSS_LOG);
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{iter},{lr},{loss}").map_err(|e| Error::io(&path, e))
    }

    /// Runs one optimization step and returns its batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let t = self.iteration;
        if t >= self.cfg.iterations {
            return Err(Error::param("iterations", format!("run already finished at {t}")));
        }
        let batch = sample_batch(self.data, &self.cfg, t)?;
        let seed = batch_seed(&self.cfg, t);
        let (out, trace) = self.model.forward_traced(&batch.noisy, derive_seed(seed, &[2]))?;
        let loss = l1_loss(&out, &batch.clean)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                batch_seed: seed,
            });
        }
        let grads = self.model.backward(&trace, &l1_grad(&out, &batch.clean));
        let lr = lr_at(t, &self.cfg)?;
        {
            let gs = grads.slices();
            let mut ps = self.model.parameter_slices_mut();
            self.optimizer.update(&mut ps, &gs, lr);
        }
        if self.initial_loss.is_none() {
            self.initial_loss = Some(loss);
        }
        self.loss_ema = LOSS_EMA_BETA * self.loss_ema + (1.0 - LOSS_EMA_BETA) * loss;
        self.iteration += 1;
        if t % self.cfg.log_every == 0 || self.iteration == self.cfg.iterations {
            self.log(t, lr, loss)?;
            log::info!(
                "iter {t:>7}  lr {lr:.3e}  loss {loss:.5}  running {:.5}",
                self.running_loss().unwrap_or(loss)
            );
        }
        if self.iteration % self.cfg.checkpoint_every == 0 && self.iteration < self.cfg.iterations {
            if let Some(dir) = &self.out_dir {
                let path = dir
                    .join(CHECKPOINT_DIR)
                    .join(format!("iter_{:07}.safetensors", self.iteration));
                self.checkpoint().save(&path)?;
            }
        }
        Ok(loss)
    }

    /// Steps until `iteration` iterations have completed (capped at the
    /// configured total).
    pub fn run_until(&mut self, iteration: u64) -> Result<()> {
        while self.iteration < iteration.min(self.cfg.iterations) {
            self.step()?;
        }
        Ok(())
    }

    /// Snapshot of the current state, including optimizer moments.
    pub fn checkpoint(&self) -> Checkpoint {
        let meta = TrainingMeta {
            config: self.cfg.clone(),
            optimizer_step: self.optimizer.step,
            loss_ema: self.loss_ema,
            initial_loss: self.initial_loss,
        };
        Checkpoint::capture(&self.model, self.iteration, self.cfg.seed, Some((meta, &self.optimizer)))
    }

    /// Completes the remaining iterations, verifies the encoder was not
    /// touched and writes the final checkpoint.
    pub fn finish(mut self) -> Result<TrainOutcome> {
        self.run_until(self.cfg.iterations)?;
        let enc = self.model.encoder();
        if enc.compute_digest() != enc.digest() {
            return Err(Error::Checkpoint("encoder weights changed during training".into()));
        }
        let checkpoint = self.checkpoint();
        if let Some(dir) = &self.out_dir {
            checkpoint.save(dir.join(FINAL_CHECKPOINT))?;
        }
        let initial_loss = self.initial_loss.expect("at least one iteration ran");
        let final_running_loss = self.running_loss().expect("at least one iteration ran");
        self.model.set_mode(Mode::Eval);
        Ok(TrainOutcome {
            model: self.model,
            checkpoint,
            initial_loss,
            final_running_loss,
        })
    }
}

/// Trains `model` on `data` for `cfg.iterations` iterations.
pub fn train(model: Denoiser, data: &Dataset, cfg: TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    Trainer::new(model, data, cfg, out_dir)?.finish()
}
