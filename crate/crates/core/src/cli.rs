//! Command-line driver for the `persogen` binary.
//!
//! Settings resolve in this order, later sources winning: the preset, the
//! `--config` file, `PERSOGEN_SEED`, then command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::catalog::{synth_catalog, Catalog, Codebook, PixelImage, SynthConfig};
use crate::dataset::{
    build_samples, samples_from_jsonl, samples_to_jsonl, split_samples, synth_interactions,
    InteractionRecord, Sample, FUTURE_HORIZON, WINDOW,
};
use crate::evalsuite::{evaluate, EvalConfig};
use crate::policy::{Checkpoint, PolicyModel, PolicyParams, DEFAULT_EMBED_DIM, DEFAULT_TAG_DIM};
use crate::rewards::{
    clip_score, msssim, perceptual_distance, ssim, PerceptualBank, ProviderIds, ProviderRegistry,
    Providers,
};
use crate::train_grpo::{
    monitor_update, reward_curve_csv, select_final_checkpoint, train_grpo, GrpoConfig,
    MonitorState, Selection,
};
use crate::train_sft::{train_sft, SftConfig};
use crate::util;
use crate::{Error, Result};

pub const SEED_ENV: &str = "PERSOGEN_SEED";

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const CODEBOOK_FILE: &str = "codebook.json";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk or paper)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub items: usize,
    pub archetypes: usize,
    pub users: usize,
    pub per_user: usize,
    pub loyalty: f64,
    pub vocab: usize,
    pub grid: usize,
    pub patch: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            items: d.n_items,
            archetypes: d.n_archetypes,
            users: 50,
            per_user: 15,
            loyalty: 0.8,
            vocab: d.vocab_size,
            grid: d.grid_w,
            patch: d.patch_side,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Every stage setting, resolved before any work starts.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub split_seed: Option<u64>,
    pub window: usize,
    pub horizon: usize,
    pub synth: SynthSettings,
    pub embed_dim: usize,
    pub tag_dim: usize,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
    pub providers: ProviderIds,
    pub lpips_seed: u64,
    pub paths: Paths,
}

impl RunConfig {
    pub fn with_preset(preset: Preset) -> Self {
        let (sft, grpo) = match preset {
            Preset::Desk => (SftConfig::desk(), GrpoConfig::desk()),
            Preset::Paper => (SftConfig::paper(), GrpoConfig::paper()),
        };
        Self {
            preset,
            seed: 7,
            split_seed: None,
            window: WINDOW,
            horizon: FUTURE_HORIZON,
            synth: SynthSettings::default(),
            embed_dim: DEFAULT_EMBED_DIM,
            tag_dim: DEFAULT_TAG_DIM,
            sft,
            grpo,
            eval: EvalConfig::default(),
            providers: ProviderIds::default(),
            lpips_seed: crate::rewards::DEFAULT_BANK_SEED,
            paths: Paths::default(),
        }
    }

    /// Sets one dotted key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "preset" => self.preset = v.parse()?,
            "prepare.split_seed" => self.split_seed = Some(parse(key, v)?),
            "prepare.window" => self.window = parse(key, v)?,
            "prepare.horizon" => self.horizon = parse(key, v)?,
            "synth.items" => self.synth.items = parse(key, v)?,
            "synth.archetypes" => self.synth.archetypes = parse(key, v)?,
            "synth.users" => self.synth.users = parse(key, v)?,
            "synth.per_user" => self.synth.per_user = parse(key, v)?,
            "synth.loyalty" => self.synth.loyalty = parse(key, v)?,
            "synth.vocab" => self.synth.vocab = parse(key, v)?,
            "synth.grid" => self.synth.grid = parse(key, v)?,
            "synth.patch" => self.synth.patch = parse(key, v)?,
            "policy.embed_dim" => self.embed_dim = parse(key, v)?,
            "policy.tag_dim" => self.tag_dim = parse(key, v)?,
            "sft.lr" => self.sft.lr = parse(key, v)?,
            "sft.batch_size" => self.sft.batch_size = parse(key, v)?,
            "sft.epochs" => self.sft.epochs = parse(key, v)?,
            "sft.eval_every" => self.sft.eval_every = parse(key, v)?,
            "augment.mask_prob" => self.sft.augment.mask_prob = parse(key, v)?,
            "augment.swap_prob" => self.sft.augment.swap_prob = parse(key, v)?,
            "augment.copies_per_sample" => self.sft.augment.copies_per_sample = parse(key, v)?,
            "grpo.group_size" => self.grpo.group_size = parse(key, v)?,
            "grpo.beta" => self.grpo.beta = parse(key, v)?,
            "grpo.eps_clip" => self.grpo.eps_clip = parse(key, v)?,
            "grpo.lr" => self.grpo.lr = parse(key, v)?,
            "grpo.max_steps" => self.grpo.max_steps = parse(key, v)?,
            "grpo.batch_size" => self.grpo.batch_size = parse(key, v)?,
            "grpo.checkpoint_every" => self.grpo.checkpoint_every = parse(key, v)?,
            "grpo.monitor_window" => self.grpo.monitor_window = parse(key, v)?,
            "grpo.drop_ratio" => self.grpo.drop_ratio = parse(key, v)?,
            "eval.k" => self.eval.k = parse(key, v)?,
            "eval.p" => self.eval.p = parse(key, v)?,
            "eval.n_candidates" => self.eval.n_candidates = parse(key, v)?,
            "providers.clip" => self.providers.clip = v.to_string(),
            "providers.dino" => self.providers.dino = v.to_string(),
            "providers.aesthetics" => self.providers.aesthetics = v.to_string(),
            "providers.profile" => self.providers.profile = v.to_string(),
            "providers.lpips_seed" => self.lpips_seed = parse(key, v)?,
            "paths.data" => self.paths.data = Some(v.into()),
            "paths.splits" => self.paths.splits = Some(v.into()),
            "paths.out" => self.paths.out = Some(v.into()),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Copies the global seed into every stage.
    fn propagate_seed(&mut self) {
        self.sft.seed = self.seed;
        self.grpo.seed = self.seed;
        self.eval.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.sft.validate()?;
        self.grpo.validate()?;
        self.eval.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::Config("policy.embed_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.synth.loyalty) {
            return Err(Error::Config("synth.loyalty must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_preset(Preset::Desk)
    }
}

/// Parses `key = value` lines; `#` starts a comment. Returns
/// `(key, value, line)` in file order.
pub fn parse_config(text: &str, path: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_string(),
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(Error::Parse {
                path: path.to_string(),
                line: i + 1,
                msg: format!("malformed key `{k}`"),
            });
        }
        out.push((k.to_string(), v.to_string(), i + 1));
    }
    Ok(out)
}

fn apply_entries(
    cfg: &mut RunConfig,
    entries: &[(String, String, usize)],
    path: &str,
) -> Result<()> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (k, v, line) in entries {
        if let Some(prev) = seen.insert(k, *line) {
            log::warn!("{path}:{line}: `{k}` repeats line {prev}; the later value wins");
        }
        cfg.set(k, v).map_err(|e| Error::Parse {
            path: path.to_string(),
            line: *line,
            msg: e.to_string(),
        })?;
    }
    Ok(())
}

/// Reads a config file over the default (desk) settings. A `preset` key
/// selects the base preset before the other keys apply.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    load_config_with(path, None)
}

fn load_config_with(path: &Path, preset: Option<Preset>) -> Result<RunConfig> {
    let label = path.display().to_string();
    let entries = parse_config(&fs::read_to_string(path)?, &label)?;
    let file_preset = entries
        .iter()
        .rev()
        .find(|(k, _, _)| k == "preset")
        .map(|(_, v, _)| v.parse::<Preset>())
        .transpose()?;
    let mut cfg = RunConfig::with_preset(preset.or(file_preset).unwrap_or_default());
    let rest: Vec<_> = entries
        .into_iter()
        .filter(|(k, _, _)| k != "preset")
        .collect();
    apply_entries(&mut cfg, &rest, &label)?;
    Ok(cfg)
}

#[derive(Parser, Debug)]
#[command(
    name = "persogen",
    version,
    about = "Personalized token-image generation: data, SFT, GRPO and evaluation"
)]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Global seed (also settable through PERSOGEN_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress at info level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic catalog, codebook and interaction log.
    Synth(SynthArgs),
    /// Window the interaction log into samples and split 8:1:1.
    Prepare(PrepareArgs),
    /// Supervised fine-tuning.
    Sft(SftArgs),
    /// GRPO training from an SFT checkpoint.
    Grpo(GrpoArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Score a pair of images with every metric.
    Score(ScoreArgs),
    /// Replay the reward-hacking monitor over a reward curve.
    Monitor(MonitorArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    archetypes: Option<usize>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    per_user: Option<usize>,
    #[arg(long)]
    loyalty: Option<f64>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Directory with the catalog, codebook and interactions.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for train/val/test files (defaults to --data).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SftArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory holding train.jsonl and val.jsonl (defaults to --data).
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Checkpoint and log directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Debug)]
struct ProviderArgs {
    #[arg(long)]
    clip_provider: Option<String>,
    #[arg(long)]
    dino_provider: Option<String>,
    #[arg(long)]
    aesthetics_provider: Option<String>,
    #[arg(long)]
    profile_provider: Option<String>,
}

#[derive(Args, Debug)]
struct GrpoArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    splits: Option<PathBuf>,
    /// SFT checkpoint to start from and regularize toward.
    #[arg(long)]
    sft: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "group-size", short = 'G')]
    group_size: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eps_clip: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[command(flatten)]
    providers: ProviderArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample file to evaluate (defaults to <splits>/test.jsonl).
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Table CSV path; the table is also printed.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-sample JSON-lines audit dump.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long)]
    candidates: Option<usize>,
    #[command(flatten)]
    providers: ProviderArgs,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Generated image (PNG or PNM).
    a: PathBuf,
    /// Reference image, same size.
    b: PathBuf,
    /// Text scored against `a` for CTS.
    #[arg(long)]
    text: Option<String>,
    /// Directory with codebook.json for the toy embedders.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MonitorArgs {
    /// Reward curve CSV written by `grpo`.
    curve: PathBuf,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    drop_ratio: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

fn set_opt<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_provider_args(cfg: &mut RunConfig, p: &ProviderArgs) {
    set_opt(&mut cfg.providers.clip, p.clip_provider.clone());
    set_opt(&mut cfg.providers.dino, p.dino_provider.clone());
    set_opt(&mut cfg.providers.aesthetics, p.aesthetics_provider.clone());
    set_opt(&mut cfg.providers.profile, p.profile_provider.clone());
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config_with(path, cli.preset)?,
        None => RunConfig::with_preset(cli.preset.unwrap_or_default()),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
    }
    set_opt(&mut cfg.seed, cli.seed);
    match &cli.command {
        Command::Synth(a) => {
            set_opt(&mut cfg.synth.items, a.items);
            set_opt(&mut cfg.synth.archetypes, a.archetypes);
            set_opt(&mut cfg.synth.users, a.users);
            set_opt(&mut cfg.synth.per_user, a.per_user);
            set_opt(&mut cfg.synth.loyalty, a.loyalty);
            set_opt(&mut cfg.synth.vocab, a.vocab);
            set_opt(&mut cfg.synth.grid, a.grid);
            if a.out.is_some() {
                cfg.paths.out = a.out.clone();
            }
        }
        Command::Prepare(a) => {
            set_opt(&mut cfg.window, a.window);
            set_opt(&mut cfg.horizon, a.horizon);
            if a.split_seed.is_some() {
                cfg.split_seed = a.split_seed;
            }
            if a.data.is_some() {
                cfg.paths.data = a.data.clone();
            }
            if a.out.is_some() {
                cfg.paths.splits = a.out.clone();
            }
        }
        Command::Sft(a) => {
            set_opt(&mut cfg.sft.lr, a.lr);
            set_opt(&mut cfg.sft.batch_size, a.batch_size);
            set_opt(&mut cfg.sft.epochs, a.epochs);
            set_opt(&mut cfg.sft.eval_every, a.eval_every);
            override_paths(&mut cfg, &a.data, &a.splits, &a.out);
        }
        Command::Grpo(a) => {
            set_opt(&mut cfg.grpo.group_size, a.group_size);
            set_opt(&mut cfg.grpo.beta, a.beta);
            set_opt(&mut cfg.grpo.eps_clip, a.eps_clip);
            set_opt(&mut cfg.grpo.lr, a.lr);
            set_opt(&mut cfg.grpo.max_steps, a.max_steps);
            set_opt(&mut cfg.grpo.batch_size, a.batch_size);
            set_opt(&mut cfg.grpo.checkpoint_every, a.checkpoint_every);
            apply_provider_args(&mut cfg, &a.providers);
            override_paths(&mut cfg, &a.data, &a.splits, &a.out);
        }
        Command::Eval(a) => {
            set_opt(&mut cfg.eval.n_candidates, a.candidates);
            apply_provider_args(&mut cfg, &a.providers);
            override_paths(&mut cfg, &a.data, &a.splits, &None);
        }
        Command::Score(a) => {
            if a.data.is_some() {
                cfg.paths.data = a.data.clone();
            }
        }
        Command::Monitor(a) => {
            set_opt(&mut cfg.grpo.monitor_window, a.window);
            set_opt(&mut cfg.grpo.drop_ratio, a.drop_ratio);
            set_opt(&mut cfg.grpo.checkpoint_every, a.checkpoint_every);
        }
    }
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn override_paths(
    cfg: &mut RunConfig,
    data: &Option<PathBuf>,
    splits: &Option<PathBuf>,
    out: &Option<PathBuf>,
) {
    if data.is_some() {
        cfg.paths.data = data.clone();
    }
    if splits.is_some() {
        cfg.paths.splits = splits.clone();
    }
    if out.is_some() {
        cfg.paths.out = out.clone();
    }
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn splits_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.splits.clone().unwrap_or_else(|| data_dir(cfg))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.paths.out.clone().unwrap_or_else(|| data_dir(cfg));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Loads the codebook and catalog from a data directory.
pub fn load_catalog(dir: &Path) -> Result<Catalog> {
    let codebook: Codebook = serde_json::from_str(&read(&dir.join(CODEBOOK_FILE))?)?;
    codebook.validate()?;
    Catalog::from_jsonl(codebook, &read(&dir.join(CATALOG_FILE))?)
}

fn load_split(dir: &Path, name: &str, catalog: &Catalog) -> Result<Vec<Sample>> {
    samples_from_jsonl(&read(&dir.join(format!("{name}.jsonl")))?, catalog)
}

fn providers_for(cfg: &RunConfig, codebook: &Codebook) -> Result<Providers> {
    ProviderRegistry::with_toys(Arc::new(codebook.clone()))
        .resolve(&cfg.providers, PerceptualBank::new(cfg.lpips_seed))
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.synth;
    let synth = synth_catalog(&SynthConfig {
        seed: cfg.seed,
        n_items: s.items,
        n_archetypes: s.archetypes,
        grid_w: s.grid,
        grid_h: s.grid,
        vocab_size: s.vocab,
        patch_side: s.patch,
        ..SynthConfig::default()
    })?;
    let records = synth_interactions(&synth, cfg.seed, s.users, s.per_user, s.loyalty);
    let dir = out_dir(cfg)?;
    util::write_atomic(
        &dir.join(CODEBOOK_FILE),
        serde_json::to_string(&synth.codebook)?.as_bytes(),
    )?;
    let catalog = synth.into_catalog()?;
    util::write_atomic(&dir.join(CATALOG_FILE), catalog.to_jsonl()?.as_bytes())?;
    util::write_atomic(
        &dir.join(INTERACTIONS_FILE),
        util::to_jsonl(&records)?.as_bytes(),
    )?;
    println!(
        "items {} users {} interactions {} -> {}",
        catalog.items().len(),
        s.users,
        records.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_prepare(cfg: &RunConfig) -> Result<()> {
    let data = data_dir(cfg);
    let catalog = load_catalog(&data)?;
    let records: Vec<InteractionRecord> = util::from_jsonl(&read(&data.join(INTERACTIONS_FILE))?)?;
    let samples = build_samples(&records, &catalog, cfg.window, cfg.horizon)?;
    let split = split_samples(&samples, cfg.split_seed.unwrap_or(cfg.seed))?;
    let dir = cfg.paths.splits.clone().unwrap_or(data);
    fs::create_dir_all(&dir)?;
    for (name, part) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        util::write_atomic(
            &dir.join(format!("{name}.jsonl")),
            samples_to_jsonl(part)?.as_bytes(),
        )?;
    }
    println!(
        "samples {} train {} val {} test {}",
        samples.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn cmd_sft(cfg: &RunConfig) -> Result<()> {
    let catalog = load_catalog(&data_dir(cfg))?;
    let splits = splits_dir(cfg);
    let split = crate::dataset::SplitSet {
        train: load_split(&splits, "train", &catalog)?,
        val: load_split(&splits, "val", &catalog)?,
        test: Vec::new(),
        seed: cfg.split_seed.unwrap_or(cfg.seed),
    };
    let out = out_dir(cfg)?;
    let init = PolicyParams::init(
        catalog.codebook.vocab_size,
        cfg.embed_dim,
        cfg.tag_dim,
        cfg.seed,
    );
    let result = train_sft(&split, &cfg.sft, init, Some(&out))?;
    util::write_atomic(&out.join("sft_log.csv"), result.log.to_csv().as_bytes())?;
    let best_val = result
        .log
        .val_loss
        .iter()
        .find(|(s, _)| Some(*s) == result.log.best_step)
        .map(|(_, l)| *l);
    match (result.log.best_step, best_val) {
        (Some(step), Some(loss)) => println!("best step {step} val loss {loss:.6}"),
        _ => println!("no training steps; initial parameters saved"),
    }
    println!("checkpoint {}", out.join("sft-best.json").display());
    Ok(())
}

fn cmd_grpo(cfg: &RunConfig, sft_path: &Path) -> Result<()> {
    let catalog = load_catalog(&data_dir(cfg))?;
    let train = load_split(&splits_dir(cfg), "train", &catalog)?;
    let sft = Checkpoint::load(sft_path)?.params;
    let providers = providers_for(cfg, &catalog.codebook)?;
    let out = out_dir(cfg)?;
    let result = train_grpo(
        &sft,
        &train,
        &catalog.codebook,
        &providers,
        catalog.grid(),
        &cfg.grpo,
        Some(&out),
    )?;
    util::write_atomic(
        &out.join("reward_curve.csv"),
        reward_curve_csv(&result.log).as_bytes(),
    )?;
    util::write_atomic(
        &out.join("monitor.json"),
        serde_json::to_string_pretty(&result.monitor)?.as_bytes(),
    )?;
    let step = match result.selection {
        Selection::Step(s) => s,
        Selection::Sft => 0,
    };
    Checkpoint::new("grpo", cfg.seed, step, result.selected, None)
        .save(&out.join("grpo-final.json"))?;
    match result.monitor.hack_step {
        Some(h) => println!("reward std collapse flagged at step {h}"),
        None => println!("no reward std collapse flagged"),
    }
    match result.selection {
        Selection::Step(s) => println!("selected checkpoint step {s}"),
        Selection::Sft => println!("selected the SFT checkpoint"),
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let catalog = load_catalog(&data_dir(cfg))?;
    let test_path = args
        .test
        .clone()
        .unwrap_or_else(|| splits_dir(cfg).join("test.jsonl"));
    let test = samples_from_jsonl(&read(&test_path)?, &catalog)?;
    let params = Checkpoint::load(&args.checkpoint)?.params;
    let (grid_w, grid_h) = catalog.grid();
    let codebook = Arc::new(catalog.codebook.clone());
    let model = PolicyModel {
        params,
        codebook: codebook.clone(),
        grid_w,
        grid_h,
        temperature: 1.0,
    };
    let providers = providers_for(cfg, &codebook)?;
    let (table, audit) = evaluate(&model, &test, &codebook, &providers, &cfg.eval)?;
    let csv = table.to_csv();
    if let Some(path) = &args.out {
        util::write_atomic(path, csv.as_bytes())?;
    }
    if let Some(path) = &args.dump {
        util::write_atomic(path, util::to_jsonl(&audit)?.as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}

fn load_image(path: &Path) -> Result<PixelImage> {
    let img = image::open(path)?.to_rgb8();
    Ok(PixelImage::from_rgb8(&img))
}

fn cmd_score(cfg: &RunConfig, args: &ScoreArgs) -> Result<()> {
    let codebook = match &cfg.paths.data {
        Some(dir) => serde_json::from_str(&read(&dir.join(CODEBOOK_FILE))?)?,
        None => {
            let d = SynthConfig::default();
            Codebook::generate(d.seed, d.vocab_size, d.patch_side)?
        }
    };
    let providers = providers_for(cfg, &codebook)?;
    let a = load_image(&args.a)?;
    let b = load_image(&args.b)?;
    let mut out = String::from("metric,value\n");
    let ea = providers.clip.embed_image(&a);
    if let Some(text) = &args.text {
        let _ = writeln!(
            out,
            "CTS,{}",
            clip_score(&ea, &providers.clip.embed_text(text))?
        );
    }
    let _ = writeln!(
        out,
        "CIS,{}",
        clip_score(&ea, &providers.clip.embed_image(&b))?
    );
    let _ = writeln!(
        out,
        "DIS,{}",
        clip_score(
            &providers.dino.embed_image(&a),
            &providers.dino.embed_image(&b)
        )?
    );
    let _ = writeln!(
        out,
        "LPIPS,{}",
        100.0 * perceptual_distance(&a, &b, &providers.bank)?
    );
    let _ = writeln!(out, "SSIM,{}", 100.0 * ssim(&a, &b)?);
    match msssim(&a, &b) {
        Ok(v) => {
            let _ = writeln!(out, "MS-SSIM,{}", 100.0 * v);
        }
        Err(Error::ImageTooSmall(m)) => log::warn!("MS-SSIM skipped: {m}"),
        Err(e) => return Err(e),
    }
    let _ = writeln!(out, "NIMA,{}", providers.aesthetics.score(&a));
    print!("{out}");
    Ok(())
}

/// Reads the `mean` and `std` columns of a reward curve CSV.
pub fn parse_reward_curve(text: &str, path: &str) -> Result<Vec<(u64, f64, f64)>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, h)| h).unwrap_or("");
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line: 1,
                msg: format!("missing column `{name}`"),
            })
    };
    let (si, mi, di) = (find("step")?, find("mean")?, find("std")?);
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |msg: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let get = |j: usize| {
            f.get(j)
                .map(|s| s.trim())
                .ok_or_else(|| bad(format!("missing field {j}")))
        };
        let step = get(si)?.parse().map_err(|_| bad("bad step".into()))?;
        let mean = get(mi)?.parse().map_err(|_| bad("bad mean".into()))?;
        let std = get(di)?.parse().map_err(|_| bad("bad std".into()))?;
        rows.push((step, mean, std));
    }
    Ok(rows)
}

fn cmd_monitor(cfg: &RunConfig, args: &MonitorArgs) -> Result<()> {
    let label = args.curve.display().to_string();
    let rows = parse_reward_curve(&read(&args.curve)?, &label)?;
    let mut monitor = MonitorState::new(cfg.grpo.monitor_window, cfg.grpo.drop_ratio);
    for &(_, mean, std) in &rows {
        monitor_update(&mut monitor, mean, std);
    }
    let every = cfg.grpo.checkpoint_every;
    let last = rows.last().map(|r| r.0).unwrap_or(0);
    let steps: Vec<u64> = rows
        .iter()
        .map(|r| r.0)
        .filter(|s| s % every == 0 || *s == last)
        .collect();
    let selected = match select_final_checkpoint(&steps, &monitor) {
        Selection::Step(s) => s.to_string(),
        Selection::Sft => "sft".into(),
    };
    let hack = monitor.hack_step.map(|s| s.to_string()).unwrap_or_default();
    println!("hack_step,selected\n{hack},{selected}");
    Ok(())
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    match &cli.command {
        Command::Synth(_) => cmd_synth(cfg),
        Command::Prepare(_) => cmd_prepare(cfg),
        Command::Sft(_) => cmd_sft(cfg),
        Command::Grpo(a) => cmd_grpo(cfg, &a.sft),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Score(a) => cmd_score(cfg, a),
        Command::Monitor(a) => cmd_monitor(cfg, a),
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 on success, 1 on a runtime or data error, 2 on a usage error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let result = match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
            .and_then(|pool| pool.install(|| dispatch(&cli, &cfg))),
        None => dispatch(&cli, &cfg),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
