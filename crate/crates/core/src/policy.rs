//! Autoregressive categorical policy over visual tokens.
//!
//! At position `t` the policy sees
//!
//! ```text
//! x_t = [ img_feat ; mean(E[y_0..y_{t-1}]) ; tag_feat ]      (2d + h)
//! logits_t = W_out^T x_t + b_out                             (V)
//! ```
//!
//! where `img_feat` pools history token embeddings with recency weights and
//! `tag_feat` is a hashed bag of words over history titles and tags. The
//! prefix enters only through its mean embedding, so the model is invariant
//! to prefix order; autoregression happens through the evolving mean.
//!
//! Gradients are exact: [`backprop_sequence`] pushes any per-position
//! `dLoss/dlogits` through the head into `W_out`, `b_out` and the token
//! embeddings (via both the history pool and the prefix mean).

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Codebook, Item, PixelImage, TokenImage};
use crate::util;
use crate::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_TAG_DIM: usize = 32;
const TAG_SALT: u64 = 0x7A6;

/// Below this temperature sampling becomes argmax.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub tag_dim: usize,
    /// `V x d`, row per token.
    pub token_embed: Vec<f64>,
    /// `(2d + h) x V`, row per input feature.
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
    pub version: u64,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, embed_dim: usize, tag_dim: usize) -> Self {
        let feat = 2 * embed_dim + tag_dim;
        Self {
            vocab_size,
            embed_dim,
            tag_dim,
            token_embed: vec![0.0; vocab_size * embed_dim],
            w_out: vec![0.0; feat * vocab_size],
            b_out: vec![0.0; vocab_size],
            version: 0,
        }
    }

    /// Training initialisation: random embeddings, zero head. The initial
    /// policy is exactly uniform, but embedding gradients are live once the
    /// head moves.
    pub fn init(vocab_size: usize, embed_dim: usize, tag_dim: usize, seed: u64) -> Self {
        let mut p = Self::zeros(vocab_size, embed_dim, tag_dim);
        let mut rng = util::rng_from(seed, &[0xE3B]);
        let scale = (3.0 / embed_dim as f64).sqrt();
        for e in p.token_embed.iter_mut() {
            *e = rng.gen_range(-scale..scale);
        }
        p
    }

    /// Every entry uniform in `[-scale, scale]`. Used for gradient checks.
    pub fn random(
        vocab_size: usize,
        embed_dim: usize,
        tag_dim: usize,
        seed: u64,
        scale: f64,
    ) -> Self {
        let mut p = Self::zeros(vocab_size, embed_dim, tag_dim);
        let mut rng = util::rng_from(seed, &[0x7A4D]);
        for v in p.buffers_mut() {
            for x in v.iter_mut() {
                *x = rng.gen_range(-scale..scale);
            }
        }
        p
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.embed_dim + self.tag_dim
    }

    pub fn embedding(&self, token: usize) -> &[f64] {
        &self.token_embed[token * self.embed_dim..(token + 1) * self.embed_dim]
    }

    pub fn num_params(&self) -> usize {
        self.token_embed.len() + self.w_out.len() + self.b_out.len()
    }

    pub fn buffers(&self) -> [&Vec<f64>; 3] {
        [&self.token_embed, &self.w_out, &self.b_out]
    }

    pub fn buffers_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.token_embed, &mut self.w_out, &mut self.b_out]
    }

    pub fn is_finite(&self) -> bool {
        self.buffers()
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }
}

/// Gradient buffers shaped like [`PolicyParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub token_embed: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &PolicyParams) -> Self {
        Self {
            token_embed: vec![0.0; p.token_embed.len()],
            w_out: vec![0.0; p.w_out.len()],
            b_out: vec![0.0; p.b_out.len()],
        }
    }

    pub fn buffers(&self) -> [&Vec<f64>; 3] {
        [&self.token_embed, &self.w_out, &self.b_out]
    }

    pub fn buffers_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.token_embed, &mut self.w_out, &mut self.b_out]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.buffers_mut().into_iter().zip(other.buffers()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.buffers()
            .iter()
            .flat_map(|b| b.iter().copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.buffers()
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.buffers()
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Deterministic left-to-right sum.
    pub fn sum<'a>(p: &PolicyParams, parts: impl IntoIterator<Item = &'a Gradients>) -> Self {
        let mut acc = Self::zeros_like(p);
        for g in parts {
            acc.add_assign(g);
        }
        acc
    }
}

/// Parameter-free summary of a history: recency-weighted token frequencies
/// and the hashed tag vector.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryContext {
    /// `c_v = sum_i w_i * count_i(v) / L_i`, with `w_i ∝ i` (oldest first).
    pub token_weights: Vec<f64>,
    pub tag_feat: Vec<f64>,
}

impl HistoryContext {
    pub fn new(history: &[Item], vocab_size: usize, tag_dim: usize) -> Result<Self> {
        let mut token_weights = vec![0.0; vocab_size];
        let n = history.len();
        let norm = (n * (n + 1) / 2) as f64;
        for (i, item) in history.iter().enumerate() {
            let w = (i + 1) as f64 / norm;
            let len = item.image.tokens.len();
            if len == 0 {
                continue;
            }
            for &t in &item.image.tokens {
                if t >= vocab_size {
                    return Err(Error::TokenOutOfRange {
                        token: t,
                        vocab: vocab_size,
                    });
                }
                token_weights[t] += w / len as f64;
            }
        }
        let mut tag_feat = vec![0.0; tag_dim];
        if tag_dim > 0 {
            for item in history {
                let text = std::iter::once(item.title.as_str())
                    .chain(item.tags.iter().map(String::as_str));
                for word in text.flat_map(util::words) {
                    let b = (util::fnv1a(TAG_SALT, word.as_bytes()) % tag_dim as u64) as usize;
                    tag_feat[b] += 1.0;
                }
            }
            util::l2_normalize(&mut tag_feat);
        }
        Ok(Self {
            token_weights,
            tag_feat,
        })
    }

    pub fn feature(&self, params: &PolicyParams) -> HistoryFeature {
        let d = params.embed_dim;
        let mut img_feat = vec![0.0; d];
        for (v, &c) in self.token_weights.iter().enumerate() {
            if c != 0.0 {
                for (f, e) in img_feat.iter_mut().zip(params.embedding(v)) {
                    *f += c * e;
                }
            }
        }
        HistoryFeature {
            img_feat,
            tag_feat: self.tag_feat.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryFeature {
    pub img_feat: Vec<f64>,
    pub tag_feat: Vec<f64>,
}

pub fn encode_history(params: &PolicyParams, history: &[Item]) -> Result<HistoryFeature> {
    Ok(HistoryContext::new(history, params.vocab_size, params.tag_dim)?.feature(params))
}

fn head(params: &PolicyParams, hf: &HistoryFeature, prefix_mean: &[f64], out: &mut [f64]) {
    let v = params.vocab_size;
    out.copy_from_slice(&params.b_out);
    let rows = hf.img_feat.iter().chain(prefix_mean).chain(&hf.tag_feat);
    for (k, &x) in rows.enumerate() {
        if x != 0.0 {
            let w = &params.w_out[k * v..(k + 1) * v];
            for (o, wk) in out.iter_mut().zip(w) {
                *o += x * wk;
            }
        }
    }
}

/// Logits at position `prefix.len()` given the already-emitted prefix.
pub fn logits(params: &PolicyParams, hf: &HistoryFeature, prefix: &[usize]) -> Result<Vec<f64>> {
    let d = params.embed_dim;
    let mut mean = vec![0.0; d];
    for &t in prefix {
        params.check_token(t)?;
        for (m, e) in mean.iter_mut().zip(params.embedding(t)) {
            *m += e;
        }
    }
    if !prefix.is_empty() {
        let n = prefix.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
    }
    let mut out = vec![0.0; params.vocab_size];
    head(params, hf, &mean, &mut out);
    Ok(out)
}

/// Max-subtracted log-softmax.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// Walks a token sequence, handing `(t, logits_t)` to `visit` for every
/// position. The prefix mean is maintained incrementally.
pub fn for_each_position(
    params: &PolicyParams,
    hf: &HistoryFeature,
    tokens: &[usize],
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let d = params.embed_dim;
    let mut sum = vec![0.0; d];
    let mut mean = vec![0.0; d];
    let mut z = vec![0.0; params.vocab_size];
    for (t, &tok) in tokens.iter().enumerate() {
        params.check_token(tok)?;
        if t > 0 {
            let n = t as f64;
            mean.iter_mut().zip(&sum).for_each(|(m, s)| *m = s / n);
        }
        head(params, hf, &mean, &mut z);
        visit(t, &z);
        sum.iter_mut()
            .zip(params.embedding(tok))
            .for_each(|(s, e)| *s += e);
    }
    Ok(())
}

/// Total and per-token log-probability of `tokens` under the policy.
pub fn sequence_logprob(
    params: &PolicyParams,
    hf: &HistoryFeature,
    tokens: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let mut per = Vec::with_capacity(tokens.len());
    for_each_position(params, hf, tokens, |t, z| {
        per.push(log_softmax(z)[tokens[t]]);
    })?;
    Ok((per.iter().sum(), per))
}

/// Per-position log-softmax rows along a fixed token sequence.
pub fn position_log_probs(
    params: &PolicyParams,
    hf: &HistoryFeature,
    tokens: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(tokens.len());
    for_each_position(params, hf, tokens, |_, z| rows.push(log_softmax(z)))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    /// Log-probabilities under the temperature-1 policy.
    pub per_token_logprob: Vec<f64>,
    pub total_logprob: f64,
}

/// Ancestral sampling from `softmax(logits / temperature)`. Recorded
/// log-probabilities are always those of the temperature-1 policy.
pub fn sample_image<R: Rng + ?Sized>(
    params: &PolicyParams,
    hf: &HistoryFeature,
    len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Rollout> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be > 0 (got {temperature})"
        )));
    }
    let d = params.embed_dim;
    let mut sum = vec![0.0; d];
    let mut mean = vec![0.0; d];
    let mut z = vec![0.0; params.vocab_size];
    let mut tokens = Vec::with_capacity(len);
    let mut per = Vec::with_capacity(len);
    for t in 0..len {
        if t > 0 {
            let n = t as f64;
            mean.iter_mut().zip(&sum).for_each(|(m, s)| *m = s / n);
        }
        head(params, hf, &mean, &mut z);
        let lp = log_softmax(&z);
        let tok = if temperature < GREEDY_TEMPERATURE {
            argmax(&z)
        } else {
            let scaled: Vec<f64> = z.iter().map(|x| x / temperature).collect();
            categorical(&softmax(&scaled), rng)
        };
        tokens.push(tok);
        per.push(lp[tok]);
        sum.iter_mut()
            .zip(params.embedding(tok))
            .for_each(|(s, e)| *s += e);
    }
    Ok(Rollout {
        total_logprob: per.iter().sum(),
        tokens,
        per_token_logprob: per,
    })
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in z.iter().enumerate() {
        if x > z[best] {
            best = i;
        }
    }
    best
}

fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left the cumulative sum just below u
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Accumulates into `grads` the gradient of a scalar loss whose dependence
/// on the policy is through the per-position logits of `tokens`.
/// `upstream(t, logits_t)` returns `dLoss/dlogits_t`.
pub fn backprop_sequence(
    params: &PolicyParams,
    ctx: &HistoryContext,
    tokens: &[usize],
    grads: &mut Gradients,
    mut upstream: impl FnMut(usize, &[f64]) -> Vec<f64>,
) -> Result<()> {
    let d = params.embed_dim;
    let v = params.vocab_size;
    let hf = ctx.feature(params);
    let mut d_img = vec![0.0; d];
    let mut d_mean: Vec<Vec<f64>> = Vec::with_capacity(tokens.len());
    let mut sum = vec![0.0; d];
    let mut mean = vec![0.0; d];
    let mut z = vec![0.0; v];
    for (t, &tok) in tokens.iter().enumerate() {
        params.check_token(tok)?;
        if t > 0 {
            let n = t as f64;
            mean.iter_mut().zip(&sum).for_each(|(m, s)| *m = s / n);
        }
        head(params, &hf, &mean, &mut z);
        let g = upstream(t, &z);
        debug_assert_eq!(g.len(), v);

        grads.b_out.iter_mut().zip(&g).for_each(|(b, gi)| *b += gi);
        let x = hf.img_feat.iter().chain(&mean).chain(&hf.tag_feat);
        let mut dm = vec![0.0; d];
        for (k, &xk) in x.enumerate() {
            let row = k * v;
            let w = &params.w_out[row..row + v];
            let dw = &mut grads.w_out[row..row + v];
            let mut dx = 0.0;
            for ((dwj, wj), gj) in dw.iter_mut().zip(w).zip(&g) {
                *dwj += xk * gj;
                dx += wj * gj;
            }
            if k < d {
                d_img[k] += dx;
            } else if k < 2 * d {
                dm[k - d] = dx;
            }
        }
        d_mean.push(dm);
        sum.iter_mut()
            .zip(params.embedding(tok))
            .for_each(|(s, e)| *s += e);
    }

    // history pool: img_feat = sum_v c_v E[v]
    for (tok, &c) in ctx.token_weights.iter().enumerate() {
        if c != 0.0 {
            let de = &mut grads.token_embed[tok * d..(tok + 1) * d];
            de.iter_mut().zip(&d_img).for_each(|(x, g)| *x += c * g);
        }
    }
    // prefix mean at t averages E[y_s] for s < t, so E[y_s] collects
    // sum_{t > s} dmean_t / t
    let mut suffix = vec![0.0; d];
    for s in (0..tokens.len()).rev() {
        let de = &mut grads.token_embed[tokens[s] * d..(tokens[s] + 1) * d];
        de.iter_mut().zip(&suffix).for_each(|(x, g)| *x += g);
        if s > 0 {
            let inv = 1.0 / s as f64;
            suffix
                .iter_mut()
                .zip(&d_mean[s])
                .for_each(|(acc, g)| *acc += g * inv);
        }
    }
    Ok(())
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(params: &PolicyParams) -> Self {
        Self {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut PolicyParams,
    grads: &Gradients,
    opt: &mut OptState,
    lr: f64,
) -> Result<()> {
    let shapes_ok = params
        .buffers()
        .iter()
        .zip(grads.buffers())
        .zip(opt.m.buffers())
        .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_ok {
        return Err(Error::DimensionMismatch(
            "gradient or optimizer state does not match parameters".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    opt.step += 1;
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    let bc1 = 1.0 - b1.powi(opt.step as i32);
    let bc2 = 1.0 - b2.powi(opt.step as i32);
    let bufs = params
        .buffers_mut()
        .into_iter()
        .zip(grads.buffers())
        .zip(opt.m.buffers_mut().into_iter().zip(opt.v.buffers_mut()));
    for ((p, g), (m, v)) in bufs {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.version += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotRole {
    Old,
    Ref,
}

/// Frozen, shareable copy of the parameters.
#[derive(Clone, Debug)]
pub struct PolicySnapshot {
    params: Arc<PolicyParams>,
    role: SnapshotRole,
}

impl PolicySnapshot {
    pub fn new(params: &PolicyParams, role: SnapshotRole) -> Self {
        Self {
            params: Arc::new(params.clone()),
            role,
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn role(&self) -> SnapshotRole {
        self.role
    }
}

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// `sft`, `grpo` or `init`.
    pub role: String,
    pub seed: u64,
    pub step: u64,
    pub params: PolicyParams,
    pub opt: Option<OptState>,
}

impl Checkpoint {
    pub fn new(
        role: &str,
        seed: u64,
        step: u64,
        params: PolicyParams,
        opt: Option<OptState>,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT,
            role: role.to_string(),
            seed,
            step,
            params,
            opt,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {} in {}",
                ck.format_version,
                path.display()
            )));
        }
        Ok(ck)
    }
}

/// A policy bound to a codebook and an output grid, able to emit images.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub params: PolicyParams,
    pub codebook: Arc<Codebook>,
    pub grid_w: usize,
    pub grid_h: usize,
    pub temperature: f64,
}

impl PolicyModel {
    pub fn image_len(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        history: &[Item],
        rng: &mut R,
    ) -> Result<(Rollout, PixelImage)> {
        let hf = encode_history(&self.params, history)?;
        let ro = sample_image(&self.params, &hf, self.image_len(), self.temperature, rng)?;
        let px = self.decode(&ro.tokens)?;
        Ok((ro, px))
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<PixelImage> {
        let img = TokenImage {
            grid_w: self.grid_w,
            grid_h: self.grid_h,
            tokens: tokens.to_vec(),
            codebook_id: self.codebook.codebook_id.clone(),
        };
        crate::catalog::decode_image(&img, &self.codebook)
    }
}

/// Central finite differences of `f` over every parameter, in
/// [`Gradients::flatten`] order.
pub fn numeric_gradient(
    params: &PolicyParams,
    h: f64,
    mut f: impl FnMut(&PolicyParams) -> f64,
) -> Vec<f64> {
    let mut p = params.clone();
    let mut out = Vec::with_capacity(params.num_params());
    for b in 0..3 {
        for i in 0..params.buffers()[b].len() {
            let orig = p.buffers()[b][i];
            p.buffers_mut()[b][i] = orig + h;
            let up = f(&p);
            p.buffers_mut()[b][i] = orig - h;
            let down = f(&p);
            p.buffers_mut()[b][i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
