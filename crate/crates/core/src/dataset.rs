//! Interaction logs to windowed samples.
//!
//! Per user, interactions are sorted chronologically and every contiguous
//! window of six yields one sample: five history items and the golden next
//! item, plus up to three following items as "future" targets.

use std::collections::BTreeMap;

use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Item, SynthCatalog};
use crate::util;
use crate::{Error, Result};

pub const WINDOW: usize = 6;
pub const FUTURE_HORIZON: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub user_id: String,
    pub history: Vec<Item>,
    pub golden: Item,
    pub future: Vec<Item>,
    pub origin_window_index: usize,
}

/// On-disk form of a [`Sample`]: items by id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub user_id: String,
    pub history: Vec<String>,
    pub golden: String,
    pub future: Vec<String>,
    pub origin_window_index: usize,
}

impl Sample {
    pub fn to_record(&self) -> SampleRecord {
        SampleRecord {
            user_id: self.user_id.clone(),
            history: self.history.iter().map(|i| i.item_id.clone()).collect(),
            golden: self.golden.item_id.clone(),
            future: self.future.iter().map(|i| i.item_id.clone()).collect(),
            origin_window_index: self.origin_window_index,
        }
    }

    pub fn from_record(rec: &SampleRecord, catalog: &Catalog) -> Result<Self> {
        let resolve_all = |ids: &[String]| -> Result<Vec<Item>> {
            ids.iter().map(|id| catalog.resolve(id)).collect()
        };
        Ok(Self {
            user_id: rec.user_id.clone(),
            history: resolve_all(&rec.history)?,
            golden: catalog.get(&rec.golden)?.clone(),
            future: resolve_all(&rec.future)?,
            origin_window_index: rec.origin_window_index,
        })
    }
}

pub fn samples_to_jsonl(samples: &[Sample]) -> Result<String> {
    let recs: Vec<SampleRecord> = samples.iter().map(Sample::to_record).collect();
    util::to_jsonl(&recs)
}

pub fn samples_from_jsonl(text: &str, catalog: &Catalog) -> Result<Vec<Sample>> {
    util::from_jsonl::<SampleRecord>(text)?
        .iter()
        .map(|r| Sample::from_record(r, catalog))
        .collect()
}

/// Slides a `window`-long window over each user's chronologically sorted
/// interactions. Users are visited in id order; ties in timestamp keep the
/// input order.
pub fn build_samples(
    records: &[InteractionRecord],
    catalog: &Catalog,
    window: usize,
    future_horizon: usize,
) -> Result<Vec<Sample>> {
    if window < 2 {
        return Err(Error::Config(format!("window must be >= 2 (got {window})")));
    }
    let mut by_user: BTreeMap<&str, Vec<&InteractionRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(&r.user_id).or_default().push(r);
    }
    let mut out = Vec::new();
    for (user, mut recs) in by_user {
        recs.sort_by_key(|r| r.timestamp);
        let items = recs
            .iter()
            .map(|r| catalog.get(&r.item_id).cloned())
            .collect::<Result<Vec<_>>>()?;
        if items.len() < window {
            continue;
        }
        for start in 0..=items.len() - window {
            let golden_at = start + window - 1;
            let future_end = (golden_at + 1 + future_horizon).min(items.len());
            out.push(Sample {
                user_id: user.to_string(),
                history: items[start..golden_at].to_vec(),
                golden: items[golden_at].clone(),
                future: items[golden_at + 1..future_end].to_vec(),
                origin_window_index: start,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSet {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

/// `(n_train, n_val, n_test)` for an 8:1:1 split of `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Seeded shuffle, then an 8:1:1 cut with the rounding remainder in test.
pub fn split_samples(samples: &[Sample], seed: u64) -> Result<SplitSet> {
    if samples.is_empty() {
        return Err(Error::Empty("cannot split an empty sample list".into()));
    }
    let mut shuffled = samples.to_vec();
    shuffled.shuffle(&mut util::rng_from(seed, &[0x5917]));
    let (n_train, n_val, _) = split_sizes(shuffled.len());
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(SplitSet {
        train: shuffled,
        val,
        test,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub mask_prob: f64,
    pub swap_prob: f64,
    pub copies_per_sample: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.1,
            swap_prob: 0.2,
            copies_per_sample: 1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("mask_prob", self.mask_prob), ("swap_prob", self.swap_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1] (got {p})"
                )));
            }
        }
        Ok(())
    }
}

/// Masks each history slot independently with `mask_prob`, then with
/// `swap_prob` exchanges one uniformly chosen pair of history slots.
/// Golden and future items are never touched.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let mut out = sample.clone();
    let Some(first) = sample.history.first() else {
        return out;
    };
    let sentinel = Item::mask_sentinel(
        first.image.grid_w,
        first.image.grid_h,
        &first.image.codebook_id,
    );
    for slot in out.history.iter_mut() {
        if rng.gen_bool(cfg.mask_prob) {
            *slot = sentinel.clone();
        }
    }
    let n = out.history.len();
    if n >= 2 && rng.gen_bool(cfg.swap_prob) {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        out.history.swap(i, j);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateId {
    Movies,
    Videos,
}

impl std::str::FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movies" => Ok(Self::Movies),
            "videos" => Ok(Self::Videos),
            other => Err(Error::UnknownTemplate(other.to_string())),
        }
    }
}

/// Renders the instruction prompt for a sample's history. Images appear as
/// `<image_i>` placeholders. Tags are joined with `", "`.
pub fn render_prompt(sample: &Sample, template: TemplateId) -> String {
    let (medium, plural, noun, tag_key, text_key) = match template {
        TemplateId::Movies => ("movie poster", "movies", "Movie", "genres", "intro"),
        TemplateId::Videos => ("video cover", "videos", "Video", "tag", "description"),
    };
    let mut out = format!(
        "Please generate a {medium} that would attract my interest. \
         Here are the {plural} I have watched:\n"
    );
    for (i, item) in sample.history.iter().enumerate() {
        let n = i + 1;
        out.push_str(&format!(
            "{noun} {n}: title: {} {tag_key}: {} {text_key}: {} image: <image_{n}>\n",
            item.title,
            item.tags.join(", "),
            item.intro,
        ));
    }
    let closing = match template {
        TemplateId::Movies => "these films",
        TemplateId::Videos => "these videos",
    };
    out.push_str(&format!(
        "Design a new {medium} inspired by the text and visual elements of {closing}, \
         making it appealing based on my viewing preferences."
    ));
    out
}

/// Synthetic interaction logs over a synthetic catalog: each user favours
/// one archetype and picks from it with probability `loyalty`, otherwise
/// from the whole catalog. Records are emitted in shuffled order.
pub fn synth_interactions(
    synth: &SynthCatalog,
    seed: u64,
    n_users: usize,
    per_user: usize,
    loyalty: f64,
) -> Vec<InteractionRecord> {
    let mut rng = util::rng_from(seed, &[0x1A7E]);
    let n_arch = synth.archetypes.len();
    let mut by_arch: Vec<Vec<usize>> = vec![Vec::new(); n_arch];
    for (i, &a) in synth.assignments.iter().enumerate() {
        by_arch[a].push(i);
    }
    let mut out = Vec::with_capacity(n_users * per_user);
    for u in 0..n_users {
        let fav = u % n_arch;
        let mut t: i64 = rng.gen_range(1_000_000..2_000_000);
        for _ in 0..per_user {
            let idx = if rng.gen_bool(loyalty) {
                *by_arch[fav]
                    .choose(&mut rng)
                    .expect("every archetype has items")
            } else {
                rng.gen_range(0..synth.items.len())
            };
            t += rng.gen_range(60..86_400);
            out.push(InteractionRecord {
                user_id: format!("user-{u:04}"),
                item_id: synth.items[idx].item_id.clone(),
                timestamp: t,
            });
        }
    }
    out.shuffle(&mut rng);
    out
}
