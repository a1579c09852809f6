//! Supervised fine-tuning: teacher-forced cross-entropy on the golden
//! item's image tokens, with validation-loss model selection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, AugmentConfig, Sample, SplitSet};
use crate::policy::{
    adam_step, backprop_sequence, log_softmax, Checkpoint, Gradients, HistoryContext, OptState,
    PolicyParams,
};
use crate::util;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub augment: AugmentConfig,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SftConfig {
    pub fn desk() -> Self {
        Self {
            lr: 1e-2,
            batch_size: 16,
            epochs: 5,
            seed: 0,
            eval_every: 25,
            augment: AugmentConfig::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            lr: 4e-5,
            batch_size: 64,
            epochs: 1,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "sft.lr must be positive (got {})",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sft.batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("sft.eval_every must be positive".into()));
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// `(step, batch loss)` for every optimizer step, 1-based.
    pub train_loss: Vec<(u64, f64)>,
    /// `(step, validation loss)` at each evaluation.
    pub val_loss: Vec<(u64, f64)>,
    pub checkpoints: Vec<PathBuf>,
    pub best_step: Option<u64>,
}

impl TrainLog {
    /// `step,train_loss,val_loss`; the last column is empty between evaluations.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,val_loss\n");
        let mut val = self.val_loss.iter().peekable();
        for &(step, loss) in &self.train_loss {
            let v = match val.peek() {
                Some(&&(s, v)) if s == step => {
                    val.next();
                    format!("{v}")
                }
                _ => String::new(),
            };
            let _ = writeln!(out, "{step},{loss},{v}");
        }
        out
    }
}

/// Earliest step with the smallest validation loss.
pub fn best_step(val_loss: &[(u64, f64)]) -> Option<u64> {
    let mut best: Option<(u64, f64)> = None;
    for &(step, loss) in val_loss {
        if best.is_none_or(|(_, b)| loss < b) {
            best = Some((step, loss));
        }
    }
    best.map(|(s, _)| s)
}

fn sample_loss_and_grad(
    params: &PolicyParams,
    sample: &Sample,
    scale: f64,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let tokens = &sample.golden.image.tokens;
    if tokens.is_empty() {
        return Err(Error::Empty(format!(
            "golden item {} has no tokens",
            sample.golden.item_id
        )));
    }
    let ctx = HistoryContext::new(&sample.history, params.vocab_size, params.tag_dim)?;
    let per_token = 1.0 / tokens.len() as f64;
    let mut nll = 0.0;
    match grads {
        Some(g) => backprop_sequence(params, &ctx, tokens, g, |t, z| {
            let lp = log_softmax(z);
            nll -= lp[tokens[t]];
            let mut d: Vec<f64> = lp.iter().map(|l| l.exp() * scale * per_token).collect();
            d[tokens[t]] -= scale * per_token;
            d
        })?,
        None => {
            let hf = ctx.feature(params);
            crate::policy::for_each_position(params, &hf, tokens, |t, z| {
                nll -= log_softmax(z)[tokens[t]];
            })?
        }
    }
    Ok(nll * per_token)
}

/// Mean over samples of the per-token negative log-likelihood of the
/// golden image under teacher forcing.
pub fn sft_loss(params: &PolicyParams, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("sft_loss on an empty batch".into()));
    }
    let losses = batch
        .par_iter()
        .map(|s| sample_loss_and_grad(params, s, 0.0, None))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// [`sft_loss`] and its exact gradient.
pub fn sft_loss_and_grad(params: &PolicyParams, batch: &[Sample]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("sft_loss on an empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts = batch
        .par_iter()
        .map(|s| {
            let mut g = Gradients::zeros_like(params);
            let loss = sample_loss_and_grad(params, s, scale, Some(&mut g))?;
            Ok((loss, g))
        })
        .collect::<Result<Vec<(f64, Gradients)>>>()?;
    let loss = parts.iter().map(|(l, _)| l).sum::<f64>() * scale;
    let grads = Gradients::sum(params, parts.iter().map(|(_, g)| g));
    Ok((loss, grads))
}

pub struct SftOutcome {
    /// Parameters at the best validation step (initial parameters when no
    /// evaluation ran).
    pub best: PolicyParams,
    pub last: PolicyParams,
    pub log: TrainLog,
}

/// Training set for one epoch: originals plus seeded augmented copies,
/// shuffled.
fn epoch_data(train: &[Sample], cfg: &SftConfig, epoch: usize) -> Vec<Sample> {
    let mut aug_rng = util::rng_from(cfg.seed, &[0xA06, epoch as u64]);
    let mut data = train.to_vec();
    for s in train {
        for _ in 0..cfg.augment.copies_per_sample {
            data.push(augment(s, &cfg.augment, &mut aug_rng));
        }
    }
    data.shuffle(&mut util::rng_from(cfg.seed, &[0x5F, epoch as u64]));
    data
}

/// Runs SFT from `init`. When `ckpt_dir` is set, a checkpoint is written at
/// every evaluation and the best one is copied to `sft-best.json`.
pub fn train_sft(
    split: &SplitSet,
    cfg: &SftConfig,
    init: PolicyParams,
    ckpt_dir: Option<&Path>,
) -> Result<SftOutcome> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Empty(
            "SFT needs non-empty train and val splits".into(),
        ));
    }
    let mut params = init;
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut opt = OptState::new(&params);
    let mut log = TrainLog::default();
    let steps_per_epoch =
        (split.train.len() * (1 + cfg.augment.copies_per_sample)).div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let data = epoch_data(&split.train, cfg, epoch);
        for batch in data.chunks(cfg.batch_size) {
            let (loss, grads) = sft_loss_and_grad(&params, batch)?;
            adam_step(&mut params, &grads, &mut opt, cfg.lr)?;
            step += 1;
            log.train_loss.push((step, loss));
            if step.is_multiple_of(cfg.eval_every as u64) || step == total_steps {
                let val = sft_loss(&params, &split.val)?;
                log::info!("sft step {step} epoch {epoch} train {loss:.4} val {val:.4}");
                log.val_loss.push((step, val));
                if let Some(dir) = ckpt_dir {
                    let path = dir.join(format!("sft-step{step:05}.json"));
                    Checkpoint::new("sft", cfg.seed, step, params.clone(), Some(opt.clone()))
                        .save(&path)?;
                    log.checkpoints.push(path);
                }
                if val < best_loss {
                    best_loss = val;
                    best = params.clone();
                }
            }
        }
    }
    log.best_step = best_step(&log.val_loss);
    if let Some(dir) = ckpt_dir {
        let step = log.best_step.unwrap_or(0);
        Checkpoint::new("sft", cfg.seed, step, best.clone(), None)
            .save(&dir.join("sft-best.json"))?;
    }
    Ok(SftOutcome {
        best,
        last: params,
        log,
    })
}
