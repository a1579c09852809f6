//! Group-relative policy optimization against the composite reward, with a
//! reward-std collapse monitor and pre-collapse checkpoint selection.
//!
//! Importance ratios are per token, with each rollout's advantage broadcast
//! over its tokens. The KL penalty is the exact categorical divergence to
//! the reference policy at every prefix, averaged over positions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{decode_image, Codebook, PixelImage, TokenImage};
use crate::dataset::Sample;
use crate::policy::{
    adam_step, backprop_sequence, for_each_position, log_softmax, sample_image, Checkpoint,
    Gradients, HistoryContext, OptState, PolicyParams, PolicySnapshot, Rollout, SnapshotRole,
};
use crate::rewards::{Providers, RewardContext};
use crate::util;
use crate::{Error, Result};

/// Tolerance when checking recorded rollout log-probs against `old`.
pub const LOGPROB_TOLERANCE: f64 = 1e-9;
/// Advantages are all zero when the group reward std is below this.
pub const DEGENERATE_STD: f64 = 1e-8;
/// Trailing window for the smoothed reward used in checkpoint selection.
pub const SMOOTH_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub beta: f64,
    pub eps_clip: f64,
    pub lr: f64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub monitor_window: usize,
    pub drop_ratio: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GrpoConfig {
    pub fn desk() -> Self {
        Self {
            group_size: 8,
            beta: 0.04,
            eps_clip: 0.2,
            lr: 1e-3,
            max_steps: 300,
            batch_size: 4,
            seed: 0,
            checkpoint_every: 10,
            monitor_window: 50,
            drop_ratio: 0.3,
        }
    }

    pub fn paper() -> Self {
        Self {
            lr: 1e-6,
            max_steps: 800,
            batch_size: 8,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return fail(format!(
                "grpo.group_size must be >= 2 (got {})",
                self.group_size
            ));
        }
        if !(self.eps_clip > 0.0) {
            return fail(format!("grpo.eps_clip must be > 0 (got {})", self.eps_clip));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("grpo.beta must be >= 0 (got {})", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("grpo.lr must be positive (got {})", self.lr));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.monitor_window == 0 {
            return fail(
                "grpo.batch_size, checkpoint_every and monitor_window must be positive".into(),
            );
        }
        if !(self.drop_ratio > 0.0) {
            return fail(format!(
                "grpo.drop_ratio must be > 0 (got {})",
                self.drop_ratio
            ));
        }
        Ok(())
    }
}

/// `(R_j - mean) / std` with population statistics; all zero when the
/// group is (numerically) constant.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "advantages need a group of at least 2 (got {})",
            rewards.len()
        )));
    }
    let mean = util::mean(rewards).unwrap_or(0.0);
    let std = util::pop_std(rewards).unwrap_or(0.0);
    if !(std >= DEGENERATE_STD) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Exact KL(pi_params || pi_ref), summed over the prefix positions of `tokens`.
pub fn kl_to_ref(
    params: &PolicyParams,
    reference: &PolicySnapshot,
    ctx: &HistoryContext,
    tokens: &[usize],
) -> Result<f64> {
    let ref_rows = ref_log_probs(reference, ctx, tokens)?;
    let hf = ctx.feature(params);
    let mut total = 0.0;
    for_each_position(params, &hf, tokens, |t, z| {
        total += categorical_kl(&log_softmax(z), &ref_rows[t]);
    })?;
    Ok(total)
}

fn categorical_kl(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

fn ref_log_probs(
    reference: &PolicySnapshot,
    ctx: &HistoryContext,
    tokens: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let p = reference.params();
    crate::policy::position_log_probs(p, &ctx.feature(p), tokens)
}

/// One prompt's rollouts under `old`, with their rewards and advantages.
#[derive(Clone, Debug)]
pub struct RolloutGroup {
    pub prompt: Sample,
    pub ctx: HistoryContext,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(
        prompt: Sample,
        ctx: HistoryContext,
        rollouts: Vec<Rollout>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if rollouts.len() != rewards.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rollouts but {} rewards",
                rollouts.len(),
                rewards.len()
            )));
        }
        let advantages = compute_advantages(&rewards)?;
        Ok(Self {
            prompt,
            ctx,
            rollouts,
            rewards,
            advantages,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    /// Mean per-token KL to the reference over all rollouts.
    pub kl: f64,
    /// Fraction of tokens whose clipped branch was selected with a strict
    /// difference.
    pub clip_frac: f64,
}

struct RolloutTerms {
    surrogate: f64,
    kl: f64,
    clipped: usize,
}

fn check_old_logprobs(old: &PolicySnapshot, ctx: &HistoryContext, ro: &Rollout) -> Result<()> {
    let p = old.params();
    let hf = ctx.feature(p);
    let mut worst = 0.0f64;
    for_each_position(p, &hf, &ro.tokens, |t, z| {
        let lp = log_softmax(z)[ro.tokens[t]];
        worst = worst.max((lp - ro.per_token_logprob[t]).abs());
    })?;
    if !(worst <= LOGPROB_TOLERANCE) {
        return Err(Error::LogprobMismatch(format!(
            "recorded log-probs differ from the old policy by {worst:e}"
        )));
    }
    Ok(())
}

/// Surrogate and KL sums for one rollout; accumulates the loss gradient
/// (scaled by `weight`) when `grads` is given.
#[allow(clippy::too_many_arguments)]
fn rollout_terms(
    params: &PolicyParams,
    reference: &PolicySnapshot,
    ctx: &HistoryContext,
    ro: &Rollout,
    advantage: f64,
    cfg: &GrpoConfig,
    weight: f64,
    grads: Option<&mut Gradients>,
) -> Result<RolloutTerms> {
    if ro.tokens.len() != ro.per_token_logprob.len() || ro.tokens.is_empty() {
        return Err(Error::DimensionMismatch(
            "rollout tokens and log-probs differ in length".into(),
        ));
    }
    let ref_rows = ref_log_probs(reference, ctx, &ro.tokens)?;
    let (lo, hi) = (1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip);
    let mut out = RolloutTerms {
        surrogate: 0.0,
        kl: 0.0,
        clipped: 0,
    };
    let mut visit = |t: usize, z: &[f64]| -> Vec<f64> {
        let lp = log_softmax(z);
        let y = ro.tokens[t];
        let ratio = (lp[y] - ro.per_token_logprob[t]).exp();
        let plain = ratio * advantage;
        let clipped = ratio.clamp(lo, hi) * advantage;
        let unclipped_active = plain <= clipped;
        out.surrogate += if unclipped_active { plain } else { clipped };
        out.clipped += usize::from(!unclipped_active);
        let kl_t = categorical_kl(&lp, &ref_rows[t]);
        out.kl += kl_t;
        // loss = -weight * (term - beta * kl_t)
        let mut g = vec![0.0; lp.len()];
        for (k, gk) in g.iter_mut().enumerate() {
            let p = lp[k].exp();
            let dkl = p * (lp[k] - ref_rows[t][k] - kl_t);
            *gk = weight * cfg.beta * dkl;
            if unclipped_active {
                let onehot = if k == y { 1.0 } else { 0.0 };
                *gk -= weight * plain * (onehot - p);
            }
        }
        g
    };
    match grads {
        Some(gr) => backprop_sequence(params, ctx, &ro.tokens, gr, visit)?,
        None => {
            let hf = ctx.feature(params);
            for_each_position(params, &hf, &ro.tokens, |t, z| {
                visit(t, z);
            })?
        }
    }
    Ok(out)
}

fn grpo_eval(
    params: &PolicyParams,
    old: &PolicySnapshot,
    reference: &PolicySnapshot,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
    with_grad: bool,
) -> Result<(LossStats, Option<Gradients>)> {
    if groups.is_empty() {
        return Err(Error::Empty(
            "grpo_loss needs at least one rollout group".into(),
        ));
    }
    let jobs: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| (0..grp.rollouts.len()).map(move |j| (g, j)))
        .collect();
    let n_groups = groups.len() as f64;
    let parts = jobs
        .par_iter()
        .map(|&(g, j)| {
            let grp = &groups[g];
            let ro = &grp.rollouts[j];
            check_old_logprobs(old, &grp.ctx, ro)?;
            let len = ro.tokens.len() as f64;
            let weight = 1.0 / (n_groups * grp.rollouts.len() as f64 * len);
            let mut grads = with_grad.then(|| Gradients::zeros_like(params));
            let terms = rollout_terms(
                params,
                reference,
                &grp.ctx,
                ro,
                grp.advantages[j],
                cfg,
                weight,
                grads.as_mut(),
            )?;
            Ok((terms, weight, len, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut objective = 0.0;
    let mut kl_mean = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    for (terms, weight, len, _) in &parts {
        objective += weight * (terms.surrogate - cfg.beta * terms.kl);
        kl_mean += terms.kl / len;
        clipped += terms.clipped;
        tokens += *len as usize;
    }
    let stats = LossStats {
        loss: -objective,
        kl: kl_mean / parts.len() as f64,
        clip_frac: clipped as f64 / tokens as f64,
    };
    let grads = with_grad
        .then(|| Gradients::sum(params, parts.iter().filter_map(|(_, _, _, g)| g.as_ref())));
    Ok((stats, grads))
}

/// Negated clipped-surrogate objective with the per-token KL penalty.
pub fn grpo_loss(
    params: &PolicyParams,
    old: &PolicySnapshot,
    reference: &PolicySnapshot,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<f64> {
    Ok(grpo_eval(params, old, reference, groups, cfg, false)?
        .0
        .loss)
}

/// [`grpo_loss`] with its exact gradient and diagnostics.
pub fn grpo_loss_and_grad(
    params: &PolicyParams,
    old: &PolicySnapshot,
    reference: &PolicySnapshot,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<(LossStats, Gradients)> {
    let (stats, grads) = grpo_eval(params, old, reference, groups, cfg, true)?;
    Ok((stats, grads.expect("gradient requested")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorState {
    pub window: usize,
    pub drop_ratio: f64,
    pub reward_mean: Vec<f64>,
    pub reward_std: Vec<f64>,
    pub hack_step: Option<u64>,
}

impl MonitorState {
    pub fn new(window: usize, drop_ratio: f64) -> Self {
        Self {
            window,
            drop_ratio,
            reward_mean: Vec::new(),
            reward_std: Vec::new(),
            hack_step: None,
        }
    }
}

impl Default for MonitorState {
    fn default() -> Self {
        Self::new(50, 0.3)
    }
}

/// Records one step (1-based, in call order) and flags the first step whose
/// std falls below `drop_ratio` times the median of the previous `window`.
pub fn monitor_update(monitor: &mut MonitorState, mean: f64, std: f64) -> Option<u64> {
    let n = monitor.reward_std.len();
    let step = n as u64 + 1;
    if monitor.hack_step.is_none() && n >= monitor.window {
        let median = util::median(&monitor.reward_std[n - monitor.window..]).unwrap_or(0.0);
        if std < monitor.drop_ratio * median {
            log::warn!(
                "reward std {std:.4} at step {step} fell below {:.2} x median {median:.4}",
                monitor.drop_ratio
            );
            monitor.hack_step = Some(step);
        }
    }
    monitor.reward_mean.push(mean);
    monitor.reward_std.push(std);
    monitor.hack_step
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub kl: f64,
    pub loss: f64,
    pub clip_frac: f64,
}

pub fn reward_curve_csv(rows: &[StepLog]) -> String {
    let mut out = String::from("step,mean,std,kl,loss\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.reward_mean, r.reward_std, r.kl, r.loss
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Step(u64),
    /// No checkpoint precedes the flagged step; fall back to the SFT model.
    Sft,
}

/// Trailing mean of step rewards ending at `step` (1-based).
fn smoothed_reward(rewards: &[f64], step: u64) -> Option<f64> {
    let end = (step as usize).min(rewards.len());
    if end == 0 {
        return None;
    }
    util::mean(&rewards[end.saturating_sub(SMOOTH_WINDOW)..end])
}

/// Among checkpoint steps before the flagged step (all, if none flagged),
/// the argmax of the smoothed reward, earliest on ties.
pub fn select_final_checkpoint(checkpoint_steps: &[u64], monitor: &MonitorState) -> Selection {
    let limit = monitor.hack_step.unwrap_or(u64::MAX);
    let mut best: Option<(u64, f64)> = None;
    for &s in checkpoint_steps.iter().filter(|&&s| s < limit) {
        let Some(r) = smoothed_reward(&monitor.reward_mean, s) else {
            continue;
        };
        if best.is_none_or(|(bs, br)| r > br || (r == br && s < bs)) {
            best = Some((s, r));
        }
    }
    match best {
        Some((s, _)) => Selection::Step(s),
        None => {
            log::warn!("no checkpoint precedes the reward-hacking flag; using the SFT checkpoint");
            Selection::Sft
        }
    }
}

/// Mutable training state carried across steps.
pub struct GrpoTrainer {
    pub params: PolicyParams,
    pub opt: OptState,
    pub reference: PolicySnapshot,
    pub monitor: MonitorState,
    pub step: u64,
    pub grid: (usize, usize),
}

impl GrpoTrainer {
    pub fn new(sft: PolicyParams, grid: (usize, usize), cfg: &GrpoConfig) -> Self {
        Self {
            opt: OptState::new(&sft),
            reference: PolicySnapshot::new(&sft, SnapshotRole::Ref),
            params: sft,
            monitor: MonitorState::new(cfg.monitor_window, cfg.drop_ratio),
            step: 0,
            grid,
        }
    }
}

pub fn decode_tokens(
    tokens: &[usize],
    grid: (usize, usize),
    codebook: &Codebook,
) -> Result<PixelImage> {
    let img = TokenImage {
        grid_w: grid.0,
        grid_h: grid.1,
        tokens: tokens.to_vec(),
        codebook_id: codebook.codebook_id.clone(),
    };
    decode_image(&img, codebook)
}

/// Samples `G` rollouts for one prompt under `policy` and scores them.
pub fn rollout_group(
    policy: &PolicyParams,
    prompt: &Sample,
    reward: &RewardContext,
    grid: (usize, usize),
    codebook: &Codebook,
    group_size: usize,
    seed_path: impl Fn(usize) -> u64 + Sync,
) -> Result<RolloutGroup> {
    let ctx = HistoryContext::new(&prompt.history, policy.vocab_size, policy.tag_dim)?;
    let hf = ctx.feature(policy);
    let len = grid.0 * grid.1;
    let scored = (0..group_size)
        .into_par_iter()
        .map(|j| {
            let mut rng = util::rng_from(seed_path(j), &[]);
            let ro = sample_image(policy, &hf, len, 1.0, &mut rng)?;
            let px = decode_tokens(&ro.tokens, grid, codebook)?;
            Ok((ro, reward.score(&px)?.composite))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rollouts, rewards) = scored.into_iter().unzip();
    RolloutGroup::new(prompt.clone(), ctx, rollouts, rewards)
}

/// One GRPO iteration: pick prompts, roll out under the current policy,
/// score, and take a single Adam step on the surrogate.
pub fn grpo_step(
    trainer: &mut GrpoTrainer,
    train: &[Sample],
    contexts: &[RewardContext],
    codebook: &Codebook,
    cfg: &GrpoConfig,
) -> Result<StepLog> {
    if train.is_empty() || train.len() != contexts.len() {
        return Err(Error::Empty(
            "GRPO needs training prompts with reward contexts".into(),
        ));
    }
    let step = trainer.step + 1;
    let mut pick = util::rng_from(cfg.seed, &[0x9E0, step]);
    let prompts = index::sample(&mut pick, train.len(), cfg.batch_size.min(train.len())).into_vec();
    let old = PolicySnapshot::new(&trainer.params, SnapshotRole::Old);
    let groups = prompts
        .iter()
        .map(|&i| {
            rollout_group(
                old.params(),
                &train[i],
                &contexts[i],
                trainer.grid,
                codebook,
                cfg.group_size,
                |j| util::derive_seed(cfg.seed, &[step, i as u64, j as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let (stats, grads) =
        grpo_loss_and_grad(&trainer.params, &old, &trainer.reference, &groups, cfg)?;
    adam_step(&mut trainer.params, &grads, &mut trainer.opt, cfg.lr)?;
    trainer.step = step;
    let all: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.rewards.iter().copied())
        .collect();
    let group_std: Vec<f64> = groups
        .iter()
        .map(|g| util::pop_std(&g.rewards).unwrap_or(0.0))
        .collect();
    let row = StepLog {
        step,
        reward_mean: util::mean(&all).unwrap_or(0.0),
        reward_std: util::mean(&group_std).unwrap_or(0.0),
        kl: stats.kl,
        loss: stats.loss,
        clip_frac: stats.clip_frac,
    };
    monitor_update(&mut trainer.monitor, row.reward_mean, row.reward_std);
    Ok(row)
}

pub struct GrpoOutcome {
    pub log: Vec<StepLog>,
    pub monitor: MonitorState,
    /// In-memory checkpoints `(step, params)`.
    pub checkpoints: Vec<(u64, PolicyParams)>,
    pub checkpoint_paths: Vec<PathBuf>,
    pub selection: Selection,
    /// Parameters of the selected checkpoint (the SFT parameters on fallback).
    pub selected: PolicyParams,
    pub last: PolicyParams,
}

/// Full GRPO run from the SFT parameters.
pub fn train_grpo(
    sft: &PolicyParams,
    train: &[Sample],
    codebook: &Codebook,
    providers: &Providers,
    grid: (usize, usize),
    cfg: &GrpoConfig,
    ckpt_dir: Option<&Path>,
) -> Result<GrpoOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("GRPO needs training prompts".into()));
    }
    let contexts = train
        .par_iter()
        .map(|s| RewardContext::new(s, codebook, providers))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = GrpoTrainer::new(sft.clone(), grid, cfg);
    let mut log = Vec::with_capacity(cfg.max_steps as usize);
    let mut checkpoints = Vec::new();
    let mut checkpoint_paths = Vec::new();
    for _ in 0..cfg.max_steps {
        let row = grpo_step(&mut trainer, train, &contexts, codebook, cfg)?;
        log::info!(
            "grpo step {} reward {:.4} std {:.4} kl {:.5} loss {:.5}",
            row.step,
            row.reward_mean,
            row.reward_std,
            row.kl,
            row.loss
        );
        if row.step % cfg.checkpoint_every == 0 || row.step == cfg.max_steps {
            if let Some(dir) = ckpt_dir {
                let path = dir.join(format!("grpo-step{:05}.json", row.step));
                Checkpoint::new(
                    "grpo",
                    cfg.seed,
                    row.step,
                    trainer.params.clone(),
                    Some(trainer.opt.clone()),
                )
                .save(&path)?;
                checkpoint_paths.push(path);
            }
            checkpoints.push((row.step, trainer.params.clone()));
        }
        log.push(row);
    }
    let steps: Vec<u64> = checkpoints.iter().map(|(s, _)| *s).collect();
    let selection = select_final_checkpoint(&steps, &trainer.monitor);
    let selected = match selection {
        Selection::Step(s) => checkpoints
            .iter()
            .find(|(cs, _)| *cs == s)
            .map(|(_, p)| p.clone())
            .expect("selected step is a recorded checkpoint"),
        Selection::Sft => sft.clone(),
    };
    Ok(GrpoOutcome {
        log,
        monitor: trainer.monitor,
        checkpoints,
        checkpoint_paths,
        selection,
        selected,
        last: trainer.params,
    })
}
