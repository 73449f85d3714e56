use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};

use crate::binio::write_atomic;
use crate::error::{contract, Error, Result};
use crate::losses::{mean_frame_baseline, psnr, LossBreakdown};
use crate::substrate::{adam_update, exp_decay_lr, AdamConfig, AdamState, RngStream, Scalar};

use super::{save_checkpoint, CompositeModel, EpisodeTensor, Mode};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Decay factor applied once per `decay_period` steps.
    pub lr_decay: f64,
    /// Steps per decay period; `None` means one epoch.
    pub decay_period: Option<u64>,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Evaluate at most this many validation episodes per epoch.
    pub validation_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 1,
            lr0: 1e-4,
            lr_decay: 0.95,
            decay_period: None,
            clip_norm: 5.0,
            adam: AdamConfig::default(),
            seed: 0,
            validation_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr0 >= 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("invalid learning-rate schedule lr0={} decay={}", self.lr0, self.lr_decay)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    /// Mean over the batch, measured before the update.
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One optimizer step on the mean loss of `batch`.
///
/// Each batch element draws its dropout masks and latent noise from `rng.fork(index)`.
pub fn train_step<T: Scalar>(
    model: &mut CompositeModel<T>,
    adam: &mut AdamState<T>,
    batch: &[&EpisodeTensor],
    lr: f64,
    clip_norm: f64,
    adam_cfg: &AdamConfig,
    rng: &RngStream,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(contract!("empty training batch"));
    }
    model.params_mut().zero_grads();
    let scale = 1.0 / batch.len() as f64;
    let mut mean = LossBreakdown { mse: 0.0, gd: 0.0, combined: 0.0 };
    for (i, ep) in batch.iter().enumerate() {
        let (loss, grads) = model.loss_and_gradients(ep, Mode::Train, &mut rng.fork(i as u64))?;
        if !loss.combined.is_finite() {
            return Err(Error::NonFiniteLoss { batch_index: i, mse: loss.mse, gd: loss.gd });
        }
        model.params_mut().accumulate(&grads, T::of(scale))?;
        mean.mse += scale * loss.mse;
        mean.gd += scale * loss.gd;
        mean.combined += scale * loss.combined;
    }
    let grad_norm = model.params_mut().clip_grad_norm(clip_norm);
    adam_update(model.params_mut(), adam, lr, adam_cfg)?;
    Ok(StepReport { loss: mean, grad_norm })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    pub gd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean PSNR over reconstruction positions.
    pub val_recon_psnr: f64,
    /// Mean PSNR over prediction positions.
    pub val_pred_psnr: f64,
    /// Mean-frame baseline PSNR over reconstruction positions.
    pub val_baseline_psnr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Latest checkpoint written, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

fn validation_summary<T: Scalar>(model: &CompositeModel<T>, val: &[EpisodeTensor]) -> Result<(f64, f64, f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN, f64::NAN));
    }
    let k = model.config().enc_len;
    let (mut loss, mut rec, mut pred, mut base) = (0.0, 0.0, 0.0, 0.0);
    let mut rng = RngStream::new(0);
    for ep in val {
        let out = model.forward(ep, Mode::Eval, &mut rng)?;
        loss += out.loss.combined;
        let mean_frame = mean_frame_baseline(&ep.frames[..k].iter().collect::<Vec<_>>())?;
        for (j, y) in out.reconstruction.iter().enumerate() {
            rec += psnr(y, &ep.frames[j])? / k as f64;
            base += psnr(&mean_frame, &ep.frames[j])? / k as f64;
        }
        let m = out.prediction.len() as f64;
        for (j, y) in out.prediction.iter().enumerate() {
            pred += psnr(y, &ep.frames[k + j])? / m;
        }
    }
    let n = val.len() as f64;
    Ok((loss / n, rec / n, pred / n, base / n))
}

fn write_logs(dir: &Path, report: &FitReport) -> Result<()> {
    let csv_err = |path: &Path, e: csv::Error| Error::format(path, e.to_string());
    let train_path = dir.join("train_log.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "step", "lr", "loss", "mse", "gd"]).map_err(|e| csv_err(&train_path, e))?;
    for s in &report.steps {
        w.serialize((s.epoch, s.step, s.lr, s.loss, s.mse, s.gd)).map_err(|e| csv_err(&train_path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(&train_path, e.to_string()))?;
    write_atomic(&train_path, &bytes)?;

    let val_path = dir.join("val_log.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_loss", "val_recon_psnr", "val_pred_psnr", "val_baseline_psnr"])
        .map_err(|e| csv_err(&val_path, e))?;
    for e in &report.epochs {
        w.serialize((e.epoch, e.train_loss, e.val_loss, e.val_recon_psnr, e.val_pred_psnr, e.val_baseline_psnr))
            .map_err(|err| csv_err(&val_path, err))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(&val_path, e.to_string()))?;
    write_atomic(&val_path, &bytes)
}

fn checkpoint<T: Scalar>(dir: &Path, epoch: usize, model: &CompositeModel<T>) -> Result<PathBuf> {
    save_checkpoint(&dir.join(format!("checkpoint-{epoch:04}.ckpt")), model.config(), model.params())?;
    let latest = dir.join("model.ckpt");
    save_checkpoint(&latest, model.config(), model.params())?;
    Ok(latest)
}

/// Trains for `cfg.epochs` epochs with per-epoch shuffling and exponential learning-rate decay.
///
/// With `out_dir`, writes `checkpoint-EEEE.ckpt` after every epoch (epoch 0 holds the initial
/// parameters), keeps `model.ckpt` pointing at the latest, and rewrites `train_log.csv` and
/// `val_log.csv`. Every file is replaced atomically, so a failed write leaves the previous
/// checkpoint intact.
pub fn fit<T: Scalar>(
    model: &mut CompositeModel<T>,
    train: &[EpisodeTensor],
    val: &[EpisodeTensor],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitReport> {
    cfg.validate()?;
    for ep in train.iter().chain(val) {
        ep.check(model.config())?;
    }
    if cfg.epochs > 0 && train.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let mut report = FitReport::default();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("config.txt"), model.config().to_text().as_bytes())?;
        report.checkpoint = Some(checkpoint(dir, 0, model)?);
        write_logs(dir, &report)?;
    }

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let period = cfg.decay_period.unwrap_or(steps_per_epoch).max(1);
    let root = RngStream::new(cfg.seed);
    let val_set = &val[..cfg.validation_limit.unwrap_or(val.len()).min(val.len())];
    let mut adam = AdamState::new(model.params());
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.fork(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EpisodeTensor> = chunk.iter().map(|&i| &train[i]).collect();
            let lr = exp_decay_lr(step, cfg.lr0, cfg.lr_decay, period);
            let step_rng = root.fork((1 << 40) + step);
            let r = train_step(model, &mut adam, &batch, lr, cfg.clip_norm, &cfg.adam, &step_rng)?;
            debug!("epoch {epoch} step {step}: loss {:.4} grad norm {:.3}", r.loss.combined, r.grad_norm);
            epoch_loss += r.loss.combined * chunk.len() as f64;
            report.steps.push(StepLog { epoch, step, lr, loss: r.loss.combined, mse: r.loss.mse, gd: r.loss.gd });
            step += 1;
        }
        let (val_loss, rec, pred, base) = validation_summary(model, val_set)?;
        let log = EpochLog {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
            val_recon_psnr: rec,
            val_pred_psnr: pred,
            val_baseline_psnr: base,
        };
        info!(
            "epoch {epoch}: train loss {:.4}, val loss {:.4}, val PSNR rec {:.2} dB / pred {:.2} dB (baseline {:.2} dB)",
            log.train_loss, log.val_loss, log.val_recon_psnr, log.val_pred_psnr, log.val_baseline_psnr
        );
        report.epochs.push(log);
        if let Some(dir) = out_dir {
            report.checkpoint = Some(checkpoint(dir, epoch, model)?);
            write_logs(dir, &report)?;
        }
    }
    Ok(report)
}
