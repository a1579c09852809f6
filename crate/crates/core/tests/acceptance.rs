//! Acceptance suite: one check per criterion, each printing a single
//! PASS/FAIL line. Runs without the libtest harness so the lines always
//! reach the terminal; any failure makes the target exit non-zero.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use persogen::catalog::{
    decode_image, synth_catalog, Codebook, PixelImage, SynthCatalog, SynthConfig,
};
use persogen::dataset::{
    build_samples, split_samples, split_sizes, synth_interactions, Sample, SplitSet,
    FUTURE_HORIZON, WINDOW,
};
use persogen::evalsuite::{evaluate, metric_average, report_scale, EvalConfig, Generator};
use persogen::policy::{
    numeric_gradient, relative_error, sample_image, sequence_logprob, HistoryContext, PolicyModel,
    PolicyParams, PolicySnapshot, Rollout, SnapshotRole,
};
use persogen::rewards::{
    clip_score, msssim, perceptual_distance, ssim, table_cells, Cell, MetricId, Providers,
    RewardContext, TargetGroup,
};
use persogen::train_grpo::{
    compute_advantages, grpo_loss, grpo_loss_and_grad, kl_to_ref, monitor_update, rollout_group,
    select_final_checkpoint, train_grpo, GrpoConfig, MonitorState, RolloutGroup, Selection,
};
use persogen::train_sft::{sft_loss, sft_loss_and_grad, train_sft, SftConfig};
use persogen::util;
use rand::{Rng, RngCore};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- fixtures

const ML_HLLM_COLUMN: [f64; 17] = [
    19.28, 47.32, 32.95, 18.38, 46.87, 31.16, 22.98, 73.58, 23.91, 11.46, 17.75, 45.68, 30.43,
    73.63, 24.00, 12.11, 5.582,
];
const ML_SFT_RL_COLUMN: [f64; 17] = [
    18.78, 50.82, 30.26, 17.76, 50.29, 28.53, 21.93, 72.82, 22.89, 11.70, 17.88, 49.60, 28.61,
    73.13, 23.23, 12.38, 6.039,
];
const PIXELREC_HLLM_COLUMN: [f64; 17] = [
    21.04, 39.95, 22.01, 19.95, 38.92, 20.57, 21.04, 75.53, 35.61, 14.99, 19.88, 37.95, 19.73,
    75.34, 35.59, 15.86, 6.086,
];

fn noise(seed: u64, w: usize, h: usize) -> PixelImage {
    let mut rng = util::rng_from(seed, &[0xF1]);
    let rgb = (0..w * h)
        .map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0)))
        .collect();
    PixelImage::new(w, h, rgb).unwrap()
}

/// The standard desk corpus: 200 items, 4 archetypes, 50 users x 15.
fn desk_corpus() -> (SynthCatalog, Vec<Sample>, SplitSet) {
    let synth = synth_catalog(&SynthConfig::default()).unwrap();
    let recs = synth_interactions(&synth, 7, 50, 15, 0.8);
    let catalog = synth.clone().into_catalog().unwrap();
    let samples = build_samples(&recs, &catalog, WINDOW, FUTURE_HORIZON).unwrap();
    let split = split_samples(&samples, 1).unwrap();
    (synth, samples, split)
}

const V: usize = 8;
const D: usize = 4;
const H: usize = 4;
const L: usize = 4;

/// Samples over a vocabulary of 8 on a 2x2 grid, so every image is 4 tokens.
fn tiny_samples(n: usize) -> Vec<Sample> {
    let synth = synth_catalog(&SynthConfig {
        n_items: 24,
        vocab_size: V,
        grid_w: 2,
        grid_h: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    (0..n)
        .map(|k| {
            let it = |i: usize| synth.items[(3 * k + i) % 24].clone();
            Sample {
                user_id: format!("u{k}"),
                history: (0..5).map(it).collect(),
                golden: it(5),
                future: vec![it(6)],
                origin_window_index: 0,
            }
        })
        .collect()
}

fn tiny_group(old: &PolicyParams, s: &Sample, rewards: &[f64], seed: u64) -> RolloutGroup {
    let ctx = HistoryContext::new(&s.history, V, H).unwrap();
    let hf = ctx.feature(old);
    let mut rng = util::rng_from(seed, &[]);
    let rollouts = rewards
        .iter()
        .map(|_| sample_image(old, &hf, L, 1.0, &mut rng).unwrap())
        .collect();
    RolloutGroup::new(s.clone(), ctx, rollouts, rewards.to_vec()).unwrap()
}

fn perturbed(p: &PolicyParams, seed: u64, scale: f64) -> PolicyParams {
    let mut q = p.clone();
    let mut rng = util::rng_from(seed, &[0x77]);
    for b in q.buffers_mut() {
        b.iter_mut()
            .for_each(|x| *x += rng.gen_range(-scale..scale));
    }
    q
}

// ---------------------------------------------------------------- criteria

fn metric_average_arithmetic() -> Outcome {
    let column =
        |v: [f64; 17]| -> BTreeMap<Cell, f64> { table_cells().into_iter().zip(v).collect() };
    let mut parts = Vec::new();
    for (name, values, want) in [
        ("MovieLens HLLM", ML_HLLM_COLUMN, 26.04),
        ("MovieLens SFT+RL", ML_SFT_RL_COLUMN, 26.16),
        ("PixelRec HLLM", PIXELREC_HLLM_COLUMN, 24.61),
    ] {
        let got = ok(metric_average(&column(values)))?;
        ensure(
            (got - want).abs() <= 0.01,
            format!("{name}: {got:.4} vs {want}"),
        )?;
        parts.push(format!("{name} {got:.3}"));
    }
    Ok(parts.join(", "))
}

fn dataset_protocol() -> Outcome {
    let synth = synth_catalog(&SynthConfig::default()).unwrap();
    let catalog = synth.clone().into_catalog().unwrap();
    let count = |per_user: usize| {
        let recs = synth_interactions(&synth, 11, 1, per_user, 0.8);
        build_samples(&recs, &catalog, WINDOW, FUTURE_HORIZON)
            .unwrap()
            .len()
    };
    ensure(
        count(10) == 5,
        format!("10 interactions gave {} samples", count(10)),
    )?;
    ensure(
        count(5) == 0,
        format!("5 interactions gave {} samples", count(5)),
    )?;

    let recs = synth_interactions(&synth, 12, 20, 10, 0.8);
    let samples = build_samples(&recs, &catalog, WINDOW, FUTURE_HORIZON).unwrap();
    ensure(
        samples.len() == 100,
        format!("20 users x 10 gave {} samples", samples.len()),
    )?;
    ensure(split_sizes(100) == (80, 10, 10), "split_sizes(100)")?;
    for seed in 0..200u64 {
        let s = ok(split_samples(&samples, seed))?;
        ensure(
            (s.train.len(), s.val.len(), s.test.len()) == (80, 10, 10),
            format!(
                "seed {seed}: {}/{}/{}",
                s.train.len(),
                s.val.len(),
                s.test.len()
            ),
        )?;
    }
    Ok("10->5, 5->0, 100 -> 80/10/10 over 200 seeds".into())
}

fn metric_identities() -> Outcome {
    let bank = Providers::toy(Arc::new(Codebook::generate(7, 64, 4).unwrap())).bank;
    for i in 0..100u64 {
        let a = noise(2 * i, 32, 32);
        let b = noise(2 * i + 1, 32, 32);
        ensure(
            ok(ssim(&a, &a))? == 1.0,
            format!("pair {i}: ssim(a,a) != 1"),
        )?;
        ensure(
            ok(msssim(&a, &a))? == 1.0,
            format!("pair {i}: msssim(a,a) != 1"),
        )?;
        ensure(
            ok(perceptual_distance(&a, &a, &bank))? == 0.0,
            format!("pair {i}: lpips(a,a) != 0"),
        )?;
        ensure(
            ok(ssim(&a, &b))? == ok(ssim(&b, &a))?,
            format!("pair {i}: ssim asymmetric"),
        )?;
        ensure(
            ok(msssim(&a, &b))? == ok(msssim(&b, &a))?,
            format!("pair {i}: msssim asymmetric"),
        )?;
        ensure(
            ok(perceptual_distance(&a, &b, &bank))? == ok(perceptual_distance(&b, &a, &bank))?,
            format!("pair {i}: lpips asymmetric"),
        )?;
    }
    Ok("exact identities and symmetry on 100 pairs".into())
}

fn gradient_correctness() -> Outcome {
    let samples = tiny_samples(4);
    let p = PolicyParams::random(V, D, H, 41, 0.6);
    let (_, g) = ok(sft_loss_and_grad(&p, &samples))?;
    let fd = numeric_gradient(&p, 1e-5, |q| sft_loss(q, &samples).unwrap());
    let sft_worst = g
        .flatten()
        .iter()
        .zip(&fd)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max);
    ensure(
        sft_worst <= 1e-4,
        format!("sft worst relative error {sft_worst:e}"),
    )?;

    let old = PolicyParams::random(V, D, H, 21, 0.6);
    let p = perturbed(&old, 5, 0.4);
    let reference = PolicySnapshot::new(&PolicyParams::random(V, D, H, 22, 0.6), SnapshotRole::Ref);
    let snap = PolicySnapshot::new(&old, SnapshotRole::Old);
    let groups = vec![
        tiny_group(&old, &samples[0], &[1.0, 0.3, 0.6, 2.0], 3),
        tiny_group(&old, &samples[2], &[0.5, 0.1, 0.9, 0.2], 4),
    ];
    let cfg = GrpoConfig {
        beta: 0.5,
        ..GrpoConfig::desk()
    };
    let (stats, g) = ok(grpo_loss_and_grad(&p, &snap, &reference, &groups, &cfg))?;
    let fd = numeric_gradient(&p, 1e-5, |q| {
        grpo_loss(q, &snap, &reference, &groups, &cfg).unwrap()
    });
    let grpo_worst = g
        .flatten()
        .iter()
        .zip(&fd)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max);
    ensure(
        grpo_worst <= 1e-4,
        format!("grpo worst relative error {grpo_worst:e}"),
    )?;
    Ok(format!(
        "{} params; worst rel err sft {sft_worst:.1e}, grpo {grpo_worst:.1e} (clip frac {:.2})",
        p.num_params(),
        stats.clip_frac
    ))
}

fn advantage_normalization() -> Outcome {
    let mut rng = util::rng_from(5, &[0xAD]);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for g in 0..1000 {
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let r: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let a = ok(compute_advantages(&r))?;
        worst_mean = worst_mean.max(util::mean(&a).unwrap().abs());
        worst_std = worst_std.max((util::pop_std(&a).unwrap() - 1.0).abs());
        ensure(
            worst_mean <= 1e-9 && worst_std <= 1e-9,
            format!("group {g}: {a:?}"),
        )?;
    }
    for v in [0.0, 1.0, -3.5, 1e6] {
        ensure(
            ok(compute_advantages(&[v; 8]))? == vec![0.0; 8],
            format!("constant {v} group"),
        )?;
    }
    Ok(format!(
        "1000 groups; max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}"
    ))
}

fn grpo_mechanics() -> Outcome {
    let samples = tiny_samples(4);
    let cfg0 = GrpoConfig {
        beta: 0.0,
        ..GrpoConfig::desk()
    };

    // (a) surrogate at the sampling policy
    let p = PolicyParams::random(V, D, H, 3, 0.5);
    let old = PolicySnapshot::new(&p, SnapshotRole::Old);
    let groups = vec![
        tiny_group(&p, &samples[0], &[1.0, 0.2, 0.5, 0.9], 1),
        tiny_group(&p, &samples[1], &[0.0, 2.0, 1.0, 1.5], 2),
    ];
    let loss = ok(grpo_loss(&p, &old, &old, &groups, &cfg0))?;
    ensure(loss.abs() <= 1e-9, format!("(a) surrogate {loss:e}"))?;

    // (b) exact KL
    let ctx = HistoryContext::new(&samples[0].history, V, H).unwrap();
    let ref_p = PolicySnapshot::new(&p, SnapshotRole::Ref);
    ensure(
        ok(kl_to_ref(&p, &ref_p, &ctx, &[1, 2, 3, 0]))? == 0.0,
        "(b) KL at equality",
    )?;
    let mut rng = util::rng_from(4, &[0xB]);
    let mut min_kl = f64::INFINITY;
    for trial in 0..1000u64 {
        let a = PolicyParams::random(V, D, H, 2 * trial + 100, 0.8);
        let b = PolicySnapshot::new(
            &PolicyParams::random(V, D, H, 2 * trial + 101, 0.8),
            SnapshotRole::Ref,
        );
        let toks: Vec<usize> = (0..L).map(|_| rng.gen_range(0..V)).collect();
        let kl = ok(kl_to_ref(&a, &b, &ctx, &toks))?;
        min_kl = min_kl.min(kl);
        ensure(kl >= 0.0, format!("(b) trial {trial}: KL {kl:e}"))?;
    }

    // (c) one token with ratio 2 > 1 + eps and positive advantage
    let zero = PolicyParams::zeros(V, D, H);
    let hf = ctx.feature(&zero);
    let mk = |tok: usize| {
        let (total, per) = sequence_logprob(&zero, &hf, &[tok]).unwrap();
        Rollout {
            tokens: vec![tok],
            per_token_logprob: per,
            total_logprob: total,
        }
    };
    let mut g = ok(RolloutGroup::new(
        samples[0].clone(),
        ctx.clone(),
        vec![mk(1), mk(5)],
        vec![1.0, 0.0],
    ))?;
    g.rollouts.truncate(1);
    g.rewards.truncate(1);
    g.advantages = vec![1.0];
    let mut q = zero.clone();
    let pa = 1.0 / V as f64;
    q.b_out[1] = (2.0 * (1.0 - pa) / (1.0 - 2.0 * pa)).ln();
    let ratio = (sequence_logprob(&q, &ctx.feature(&q), &[1]).unwrap().0
        - g.rollouts[0].total_logprob)
        .exp();
    ensure(ratio > 1.0 + cfg0.eps_clip, format!("(c) ratio {ratio}"))?;
    let snap = PolicySnapshot::new(&zero, SnapshotRole::Old);
    let gs = [g];
    let (_, grads) = ok(grpo_loss_and_grad(&q, &snap, &snap, &gs, &cfg0))?;
    let fd = numeric_gradient(&q, 1e-5, |x| {
        grpo_loss(x, &snap, &snap, &gs, &cfg0).unwrap()
    });
    let fd_max = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    ensure(
        grads.max_abs() == 0.0,
        format!("(c) analytic gradient {:e}", grads.max_abs()),
    )?;
    ensure(
        fd_max <= 1e-9,
        format!("(c) finite-difference gradient {fd_max:e}"),
    )?;
    Ok(format!(
        "(a) {:.1e}; (b) min KL over 1000 pairs {min_kl:.2e}; (c) ratio {ratio:.3}, max |fd grad| {fd_max:.1e}",
        loss.abs()
    ))
}

fn learning_sft() -> Outcome {
    let (_, samples, split) = desk_corpus();
    let start = Instant::now();
    let cfg = SftConfig::desk();
    let out = ok(train_sft(
        &split,
        &cfg,
        PolicyParams::init(64, 16, 32, 0),
        None,
    ))?;
    let elapsed = start.elapsed().as_secs_f64();
    let best = out
        .log
        .val_loss
        .iter()
        .map(|(_, l)| *l)
        .fold(f64::INFINITY, f64::min);
    let bound = 0.7 * 64f64.ln();
    ensure(cfg.epochs <= 5, "more than 5 epochs")?;
    ensure(best <= bound, format!("val loss {best:.4} > {bound:.4}"))?;
    ensure(elapsed < 120.0, format!("took {elapsed:.1}s"))?;
    Ok(format!(
        "{} samples, best val loss {best:.4} from uniform {:.4} (bound {bound:.4}) in {elapsed:.1}s",
        samples.len(),
        64f64.ln()
    ))
}

/// Mean composite reward of `params` over `prompts`, `G` rollouts each,
/// with fixed per-rollout seeds.
fn held_out_reward(
    params: &PolicyParams,
    prompts: &[Sample],
    cb: &Codebook,
    providers: &Providers,
    g: usize,
) -> f64 {
    let mut rewards = Vec::new();
    for (i, s) in prompts.iter().enumerate() {
        let ctx = RewardContext::new(s, cb, providers).unwrap();
        let group = rollout_group(params, s, &ctx, (8, 8), cb, g, |j| {
            util::derive_seed(99, &[i as u64, j as u64])
        })
        .unwrap();
        rewards.extend(group.rewards);
    }
    util::mean(&rewards).unwrap()
}

fn learning_grpo() -> Outcome {
    let (synth, _, split) = desk_corpus();
    let sft = ok(train_sft(
        &split,
        &SftConfig::desk(),
        PolicyParams::init(64, 16, 32, 0),
        None,
    ))?
    .best;
    let cb = Arc::new(synth.codebook.clone());
    let providers = Providers::toy(cb.clone());
    let held_out: Vec<Sample> = split
        .test
        .iter()
        .chain(&split.val)
        .take(50)
        .cloned()
        .collect();
    let baseline = held_out_reward(&sft, &held_out, &cb, &providers, 8);

    let cfg = GrpoConfig::desk();
    ensure(cfg.max_steps == 300, "desk preset is not 300 steps")?;
    let start = Instant::now();
    let out = ok(train_grpo(
        &sft,
        &split.train,
        &cb,
        &providers,
        (8, 8),
        &cfg,
        None,
    ))?;
    let elapsed = start.elapsed().as_secs_f64();
    let last10: Vec<f64> = out
        .log
        .iter()
        .rev()
        .take(10)
        .map(|r| r.reward_mean)
        .collect();
    let trained = util::mean(&last10).unwrap();
    let gain = trained / baseline - 1.0;
    let post_rl = held_out_reward(&out.selected, &held_out, &cb, &providers, 8);
    let detail = format!(
        "SFT held-out {baseline:.4}, last-10 train {trained:.4} ({:+.1}%), selected {:?} held-out {post_rl:.4} ({:+.1}%), hack {:?}, {elapsed:.1}s",
        100.0 * gain,
        out.selection,
        100.0 * (post_rl / baseline - 1.0),
        out.monitor.hack_step
    );
    ensure(gain >= 0.05, detail.clone())?;
    ensure(elapsed < 600.0, format!("took {elapsed:.1}s"))?;
    Ok(detail)
}

fn reward_hacking_monitor() -> Outcome {
    let mut m = MonitorState::default();
    for _ in 0..60 {
        monitor_update(&mut m, 1.0, 1.0);
    }
    for _ in 0..40 {
        monitor_update(&mut m, 1.0, 0.1);
    }
    ensure(
        m.hack_step == Some(61),
        format!("flagged at {:?}", m.hack_step),
    )?;

    // reward rises to a peak at step 80, std collapses from step 101
    let mut tent = MonitorState::default();
    for s in 1..=150u64 {
        let mean = 80.0 - (s as f64 - 80.0).abs();
        let std = if s <= 100 { 1.0 } else { 0.1 };
        monitor_update(&mut tent, mean, std);
    }
    ensure(
        tent.hack_step == Some(101),
        format!("tent flagged at {:?}", tent.hack_step),
    )?;
    let steps: Vec<u64> = (1..=15).map(|k| 10 * k).collect();
    let sel = select_final_checkpoint(&steps, &tent);
    ensure(sel == Selection::Step(80), format!("selected {sel:?}"))?;

    let mut decay = MonitorState::default();
    for i in 0..1000 {
        monitor_update(&mut decay, 0.0, 0.99f64.powi(i));
    }
    ensure(
        decay.hack_step.is_none(),
        format!("decay flagged at {:?}", decay.hack_step),
    )?;
    Ok("flag at 61, pre-flag argmax 80, 1%/step decay never flags (1000 steps)".into())
}

/// Recomputes every cell for one candidate straight from the metric
/// functions, without the reward context.
fn oracle_cells(s: &Sample, gen: &PixelImage, cb: &Codebook, p: &Providers) -> BTreeMap<Cell, f64> {
    let mut out = BTreeMap::new();
    let groups: [(TargetGroup, &[persogen::catalog::Item], bool); 3] = [
        (TargetGroup::Golden, std::slice::from_ref(&s.golden), false),
        (TargetGroup::History, &s.history, true),
        (TargetGroup::Future, &s.future, true),
    ];
    for (group, items, pixel_metrics) in groups {
        let items: Vec<_> = items.iter().filter(|it| !it.is_sentinel()).collect();
        if items.is_empty() {
            continue;
        }
        let n = items.len() as f64;
        let mut sums: BTreeMap<MetricId, f64> = BTreeMap::new();
        for it in &items {
            let px = decode_image(&it.image, cb).unwrap();
            let mut add = |m, v: f64| *sums.entry(m).or_default() += v;
            add(
                MetricId::Cts,
                clip_score(&p.clip.embed_image(gen), &p.clip.embed_text(&it.text())).unwrap(),
            );
            add(
                MetricId::Cis,
                clip_score(&p.clip.embed_image(gen), &p.clip.embed_image(&px)).unwrap(),
            );
            add(
                MetricId::Dis,
                clip_score(&p.dino.embed_image(gen), &p.dino.embed_image(&px)).unwrap(),
            );
            if pixel_metrics {
                add(
                    MetricId::Lpips,
                    perceptual_distance(gen, &px, &p.bank).unwrap(),
                );
                add(MetricId::Ssim, ssim(gen, &px).unwrap());
                add(MetricId::MsSsim, msssim(gen, &px).unwrap());
            }
        }
        for (m, v) in sums {
            out.insert(Cell::new(group, m), v / n);
        }
        if group == TargetGroup::History {
            let profile = p.clip.embed_text(&p.profile.profile(&s.history));
            out.insert(
                Cell::new(group, MetricId::Pcs),
                clip_score(&p.clip.embed_image(gen), &profile).unwrap(),
            );
        }
    }
    out.insert(Cell::NIMA, p.aesthetics.score(gen));
    out
}

struct GoldenModel {
    codebook: Arc<Codebook>,
}

impl Generator for GoldenModel {
    fn generate(
        &self,
        s: &Sample,
        n: usize,
        _: &mut dyn RngCore,
    ) -> persogen::Result<Vec<PixelImage>> {
        Ok(vec![decode_image(&s.golden.image, &self.codebook)?; n])
    }
}

fn run_pipeline(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let r = |s: &str| root.join(s).display().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "synth".into(),
            "--out".into(),
            r("data"),
            "--users".into(),
            "12".into(),
        ],
        vec!["prepare".into(), "--data".into(), r("data")],
        vec![
            "sft".into(),
            "--data".into(),
            r("data"),
            "--out".into(),
            r("sft"),
            "--epochs".into(),
            "2".into(),
        ],
        vec![
            "grpo".into(),
            "--data".into(),
            r("data"),
            "--sft".into(),
            r("sft/sft-best.json"),
            "--out".into(),
            r("grpo"),
            "--max-steps".into(),
            "12".into(),
            "--checkpoint-every".into(),
            "4".into(),
        ],
        vec![
            "eval".into(),
            "--data".into(),
            r("data"),
            "--checkpoint".into(),
            r("grpo/grpo-final.json"),
            "--out".into(),
            r("table.csv"),
            "--dump".into(),
            r("samples.jsonl"),
        ],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_persogen"))
            .args(&args)
            .args(["--seed", "5"])
            .env_remove(persogen::cli::SEED_ENV)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "`{}` exited {:?}: {}",
                args.join(" "),
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.insert(rel, fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(files)
}

fn evaluation_protocol() -> Outcome {
    // best-of-4 against the brute-force oracle
    let (synth, _, split) = desk_corpus();
    let cb = Arc::new(synth.codebook.clone());
    let providers = Providers::toy(cb.clone());
    let fixtures: Vec<Sample> = split.test.iter().take(20).cloned().collect();
    ensure(fixtures.len() == 20, "fewer than 20 test samples")?;
    let model = PolicyModel {
        params: PolicyParams::random(64, 16, 32, 13, 0.4),
        codebook: cb.clone(),
        grid_w: 8,
        grid_h: 8,
        temperature: 1.0,
    };
    let cfg = EvalConfig {
        seed: 17,
        ..EvalConfig::default()
    };
    let (table, _) = ok(evaluate(&model, &fixtures, &cb, &providers, &cfg))?;
    let mut sums: BTreeMap<Cell, (f64, usize)> = BTreeMap::new();
    for (i, s) in fixtures.iter().enumerate() {
        let mut rng = util::rng_from(cfg.seed, &[0xE7A1, i as u64]);
        let cands = ok(model.generate(s, 4, &mut rng))?;
        let per: Vec<_> = cands
            .iter()
            .map(|c| oracle_cells(s, c, &cb, &providers))
            .collect();
        for cell in per[0].keys() {
            let vals = per.iter().map(|m| m[cell]);
            let best = if cell.metric == MetricId::Lpips {
                vals.fold(f64::INFINITY, f64::min)
            } else {
                vals.fold(f64::NEG_INFINITY, f64::max)
            };
            let e = sums.entry(*cell).or_default();
            e.0 += report_scale(cell.metric, best);
            e.1 += 1;
        }
    }
    ensure(sums.len() == table.rows.len(), "cell sets differ")?;
    let mut worst = 0.0f64;
    for (cell, (sum, n)) in &sums {
        let want = sum / *n as f64;
        let got = table.rows[cell];
        worst = worst.max((got - want).abs());
        ensure(
            (got - want).abs() <= 1e-9,
            format!("{cell}: {got} vs oracle {want}"),
        )?;
    }

    // golden-image model
    let golden = GoldenModel {
        codebook: cb.clone(),
    };
    let (gt, _) = ok(evaluate(&golden, &fixtures, &cb, &providers, &cfg))?;
    let cis = gt.rows[&Cell::new(TargetGroup::Golden, MetricId::Cis)];
    ensure((cis - 100.0).abs() <= 1e-9, format!("golden CIS {cis}"))?;

    // end-to-end reproducibility
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fa = run_pipeline(a.path())?;
    let fb = run_pipeline(b.path())?;
    let names: Vec<_> = fa.keys().collect();
    ensure(
        names == fb.keys().collect::<Vec<_>>(),
        "runs produced different file sets",
    )?;
    for (name, bytes) in &fa {
        ensure(fb[name] == *bytes, format!("{name} differs between runs"))?;
    }
    Ok(format!(
        "best-of-4 matches oracle on 20 samples (max diff {worst:.1e}); golden CIS {cis}; {} pipeline files identical",
        fa.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("metric-average arithmetic", metric_average_arithmetic),
        ("dataset protocol", dataset_protocol),
        ("metric identities", metric_identities),
        ("gradient correctness", gradient_correctness),
        ("advantage normalization", advantage_normalization),
        ("GRPO mechanics", grpo_mechanics),
        ("learning: SFT", learning_sft),
        ("learning: GRPO", learning_grpo),
        ("reward-hacking monitor", reward_hacking_monitor),
        ("evaluation protocol", evaluation_protocol),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let label = format!("{:>2}. {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {label} [{secs:.1}s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {label} [{secs:.1}s]: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
