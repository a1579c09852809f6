//! Items, token images and the fixed toy VQ codebook.
//!
//! An image is a `grid_w x grid_h` grid of codebook indices. Decoding tiles
//! the referenced `P x P` RGB patches; encoding maps every block back to its
//! nearest patch (L2 over RGB, lowest index on ties), so `encode(decode(t))`
//! is the identity for any valid token image.

use std::collections::HashMap;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::util;
use crate::{Error, Result};

pub const DEFAULT_VOCAB: usize = 64;
pub const DEFAULT_PATCH: usize = 4;
pub const DEFAULT_GRID: usize = 8;

/// Minimum L2 distance between any two codebook patches.
const MIN_PATCH_DISTANCE: f64 = 0.05;

/// BT.601 luma.
pub fn luma_of(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub codebook_id: String,
    pub seed: u64,
    #[serde(rename = "V")]
    pub vocab_size: usize,
    #[serde(rename = "P")]
    pub patch_side: usize,
    /// Flat `[V][P][P][3]` tensor, row-major, values in `[0, 1]`.
    pub patches: Vec<f64>,
}

impl Codebook {
    /// Seeded codebook of `vocab_size` patches. Patches get a random base
    /// colour plus a random-amplitude texture, so they span a range of
    /// brightness and contrast.
    pub fn generate(seed: u64, vocab_size: usize, patch_side: usize) -> Result<Self> {
        if vocab_size < 2 || patch_side < 1 {
            return Err(Error::Config(format!(
                "codebook needs V >= 2 and P >= 1 (got V={vocab_size}, P={patch_side})"
            )));
        }
        let mut rng = util::rng_from(seed, &[0xC0DE]);
        let stride = patch_side * patch_side * 3;
        let mut patches: Vec<f64> = Vec::with_capacity(vocab_size * stride);
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < vocab_size {
            attempts += 1;
            if attempts > 1000 * vocab_size {
                return Err(Error::Config(
                    "could not place codebook patches far enough apart".into(),
                ));
            }
            let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
            let amp: f64 = rng.gen_range(0.0..0.5);
            let mut cand = Vec::with_capacity(stride);
            for _ in 0..patch_side * patch_side {
                let shared: f64 = rng.gen_range(-1.0..1.0);
                for b in base {
                    let own: f64 = rng.gen_range(-1.0..1.0);
                    cand.push((b + amp * (0.8 * shared + 0.2 * own)).clamp(0.0, 1.0));
                }
            }
            let too_close = patches
                .chunks_exact(stride)
                .any(|p| l2(p, &cand) < MIN_PATCH_DISTANCE);
            if !too_close {
                patches.extend_from_slice(&cand);
                accepted += 1;
            }
        }
        Ok(Self {
            codebook_id: format!("toy-vq-s{seed}-v{vocab_size}-p{patch_side}"),
            seed,
            vocab_size,
            patch_side,
            patches,
        })
    }

    /// Builds a codebook from explicit patches, checking shape, range and
    /// pairwise distinctness.
    pub fn from_patches(
        codebook_id: impl Into<String>,
        seed: u64,
        vocab_size: usize,
        patch_side: usize,
        patches: Vec<f64>,
    ) -> Result<Self> {
        let cb = Self {
            codebook_id: codebook_id.into(),
            seed,
            vocab_size,
            patch_side,
            patches,
        };
        cb.validate()?;
        Ok(cb)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.patch_side < 1 {
            return Err(Error::Config("codebook needs V >= 2 and P >= 1".into()));
        }
        let stride = self.patch_len();
        if self.patches.len() != self.vocab_size * stride {
            return Err(Error::DimensionMismatch(format!(
                "codebook tensor has {} values, expected {}",
                self.patches.len(),
                self.vocab_size * stride
            )));
        }
        if self.patches.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("codebook values must lie in [0, 1]".into()));
        }
        for i in 0..self.vocab_size {
            for j in 0..i {
                if l2(self.patch(i), self.patch(j)) == 0.0 {
                    return Err(Error::Config(format!("patches {j} and {i} coincide")));
                }
            }
        }
        Ok(())
    }

    /// Number of scalars in one patch (`P*P*3`).
    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side * 3
    }

    pub fn patch(&self, token: usize) -> &[f64] {
        let n = self.patch_len();
        &self.patches[token * n..(token + 1) * n]
    }

    /// Index of the nearest patch to a flattened `P*P*3` block.
    pub fn nearest(&self, block: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for v in 0..self.vocab_size {
            let d = sq_dist(self.patch(v), block);
            // strict comparison keeps the lowest index on ties
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        best
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenImage {
    pub grid_w: usize,
    pub grid_h: usize,
    pub tokens: Vec<usize>,
    pub codebook_id: String,
}

impl TokenImage {
    pub fn filled(grid_w: usize, grid_h: usize, token: usize, codebook_id: &str) -> Self {
        Self {
            grid_w,
            grid_h,
            tokens: vec![token; grid_w * grid_h],
            codebook_id: codebook_id.to_string(),
        }
    }

    pub fn validate(&self, cb: &Codebook) -> Result<()> {
        if self.codebook_id != cb.codebook_id {
            return Err(Error::CodebookMismatch {
                image: self.codebook_id.clone(),
                codebook: cb.codebook_id.clone(),
            });
        }
        if self.tokens.len() != self.grid_w * self.grid_h {
            return Err(Error::DimensionMismatch(format!(
                "token image has {} tokens for a {}x{} grid",
                self.tokens.len(),
                self.grid_w,
                self.grid_h
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= cb.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: cb.vocab_size,
            });
        }
        Ok(())
    }
}

/// RGB image with a derived BT.601 luma channel. All values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelImage {
    width: usize,
    height: usize,
    rgb: Vec<[f64; 3]>,
    luma: Vec<f64>,
}

impl PixelImage {
    pub fn new(width: usize, height: usize, rgb: Vec<[f64; 3]>) -> Result<Self> {
        if rgb.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} image",
                rgb.len()
            )));
        }
        if rgb.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("pixel values must lie in [0, 1]".into()));
        }
        let luma = rgb.iter().map(|&p| luma_of(p)).collect();
        Ok(Self {
            width,
            height,
            rgb,
            luma,
        })
    }

    /// Grey image: every channel equals the given value.
    pub fn from_gray(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Self::new(width, height, values.iter().map(|&v| [v, v, v]).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb(&self) -> &[[f64; 3]] {
        &self.rgb
    }

    pub fn luma(&self) -> &[f64] {
        &self.luma
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.rgb[y * self.width + x]
    }

    /// Pixel-wise `1 - v` on every channel.
    pub fn inverted(&self) -> Self {
        let rgb = self.rgb.iter().map(|p| p.map(|v| 1.0 - v)).collect();
        Self::new(self.width, self.height, rgb).expect("inversion stays in range")
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            image::Rgb(p.map(|v| (v * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let rgb = img
            .pixels()
            .map(|p| p.0.map(|c| c as f64 / 255.0))
            .collect();
        Self::new(img.width() as usize, img.height() as usize, rgb)
            .expect("8-bit channels are in range")
    }
}

/// Tiles the referenced patches into a `grid_w*P x grid_h*P` image.
pub fn decode_image(img: &TokenImage, cb: &Codebook) -> Result<PixelImage> {
    img.validate(cb)?;
    let p = cb.patch_side;
    let (w, h) = (img.grid_w * p, img.grid_h * p);
    let mut rgb = vec![[0.0; 3]; w * h];
    for gy in 0..img.grid_h {
        for gx in 0..img.grid_w {
            let patch = cb.patch(img.tokens[gy * img.grid_w + gx]);
            for py in 0..p {
                for px in 0..p {
                    let o = (py * p + px) * 3;
                    rgb[(gy * p + py) * w + gx * p + px] = [patch[o], patch[o + 1], patch[o + 2]];
                }
            }
        }
    }
    PixelImage::new(w, h, rgb)
}

/// Maps every `P x P` block to its nearest codebook patch.
pub fn encode_image(px: &PixelImage, cb: &Codebook) -> Result<TokenImage> {
    let p = cb.patch_side;
    if !px.width.is_multiple_of(p) || !px.height.is_multiple_of(p) {
        return Err(Error::NotPatchAligned {
            width: px.width,
            height: px.height,
            patch: p,
        });
    }
    let (gw, gh) = (px.width / p, px.height / p);
    let mut block = Vec::with_capacity(cb.patch_len());
    let mut tokens = Vec::with_capacity(gw * gh);
    for gy in 0..gh {
        for gx in 0..gw {
            block.clear();
            for py in 0..p {
                for pxx in 0..p {
                    block.extend_from_slice(&px.pixel(gx * p + pxx, gy * p + py));
                }
            }
            tokens.push(cb.nearest(&block));
        }
    }
    Ok(TokenImage {
        grid_w: gw,
        grid_h: gh,
        tokens,
        codebook_id: cb.codebook_id.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    pub tags: Vec<String>,
    pub intro: String,
    pub image: TokenImage,
}

impl Item {
    pub const MASK_ID: &'static str = "__mask__";

    /// Placeholder for a masked history slot: empty text, all-zero image.
    pub fn mask_sentinel(grid_w: usize, grid_h: usize, codebook_id: &str) -> Self {
        Self {
            item_id: Self::MASK_ID.to_string(),
            title: String::new(),
            tags: Vec::new(),
            intro: String::new(),
            image: TokenImage::filled(grid_w, grid_h, 0, codebook_id),
        }
    }

    pub fn is_sentinel(&self) -> bool {
        self.item_id == Self::MASK_ID
    }

    /// Title, tags and intro as one string, for text embedders.
    pub fn text(&self) -> String {
        let mut parts = vec![self.title.clone()];
        parts.extend(self.tags.iter().cloned());
        parts.push(self.intro.clone());
        parts.retain(|p| !p.is_empty());
        parts.join(" ")
    }
}

/// Codebook plus an id-indexed item list.
#[derive(Clone, Debug)]
pub struct Catalog {
    pub codebook: Codebook,
    items: Vec<Item>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(codebook: Codebook, items: Vec<Item>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            item.image.validate(&codebook)?;
            if item.item_id == Item::MASK_ID {
                return Err(Error::Config(format!(
                    "item id `{}` is reserved",
                    Item::MASK_ID
                )));
            }
            if index.insert(item.item_id.clone(), i).is_some() {
                return Err(Error::Config(format!(
                    "duplicate item id `{}`",
                    item.item_id
                )));
            }
        }
        Ok(Self {
            codebook,
            items,
            index,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, item_id: &str) -> Result<&Item> {
        self.index
            .get(item_id)
            .map(|&i| &self.items[i])
            .ok_or_else(|| Error::UnknownItem(item_id.to_string()))
    }

    /// Grid shape shared by the catalog's images (of the first item).
    pub fn grid(&self) -> (usize, usize) {
        self.items
            .first()
            .map(|i| (i.image.grid_w, i.image.grid_h))
            .unwrap_or((DEFAULT_GRID, DEFAULT_GRID))
    }

    pub fn sentinel(&self) -> Item {
        let (w, h) = self.grid();
        Item::mask_sentinel(w, h, &self.codebook.codebook_id)
    }

    /// Resolves an id, mapping the mask id to the sentinel item.
    pub fn resolve(&self, item_id: &str) -> Result<Item> {
        if item_id == Item::MASK_ID {
            Ok(self.sentinel())
        } else {
            self.get(item_id).cloned()
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        util::to_jsonl(&self.items)
    }

    pub fn from_jsonl(codebook: Codebook, text: &str) -> Result<Self> {
        Self::new(codebook, util::from_jsonl(text)?)
    }
}

/// Parameters of the synthetic catalog generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_items: usize,
    pub n_archetypes: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub vocab_size: usize,
    pub patch_side: usize,
    /// Probability mass an archetype puts on its core tokens.
    pub core_mass: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_items: 200,
            n_archetypes: 4,
            grid_w: DEFAULT_GRID,
            grid_h: DEFAULT_GRID,
            vocab_size: DEFAULT_VOCAB,
            patch_side: DEFAULT_PATCH,
            core_mass: 0.95,
        }
    }
}

/// A latent user taste: a token distribution and a tag vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Archetype {
    pub token_weights: Vec<f64>,
    pub core_tokens: Vec<usize>,
    pub tags: Vec<String>,
    pub title_words: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SynthCatalog {
    pub codebook: Codebook,
    pub items: Vec<Item>,
    /// Archetype index of each item, parallel to `items`.
    pub assignments: Vec<usize>,
    pub archetypes: Vec<Archetype>,
}

impl SynthCatalog {
    pub fn into_catalog(self) -> Result<Catalog> {
        Catalog::new(self.codebook, self.items)
    }
}

const TAG_POOL: &[&str] = &[
    "drama",
    "comedy",
    "noir",
    "space",
    "romance",
    "horror",
    "western",
    "anime",
    "war",
    "heist",
    "musical",
    "fantasy",
    "mystery",
    "sport",
    "documentary",
    "thriller",
    "family",
    "crime",
    "history",
    "cyberpunk",
    "disaster",
    "spy",
    "superhero",
    "zombie",
    "pirate",
    "samurai",
    "robot",
    "detective",
    "monster",
    "ocean",
    "desert",
    "jungle",
    "arctic",
    "magic",
    "dragon",
    "alien",
    "comet",
    "castle",
    "carnival",
    "circus",
    "gangster",
    "courtroom",
    "kitchen",
    "racing",
    "dance",
    "vampire",
    "wizard",
    "ghost",
];

const TITLE_NOUNS: &[&str] = &[
    "night", "road", "river", "city", "garden", "storm", "mirror", "letter", "island", "tower",
    "echo", "harbor",
];

/// Generates a codebook and `n_items` items drawn from `n_archetypes` latent
/// archetypes. Archetype `a` concentrates `core_mass` of its token
/// distribution on a core set of `max(2, V/8)` tokens (disjoint across
/// archetypes while the vocabulary allows) and owns six tags.
pub fn synth_catalog(cfg: &SynthConfig) -> Result<SynthCatalog> {
    if cfg.n_items == 0 {
        return Err(Error::Empty("synth_catalog needs at least one item".into()));
    }
    if cfg.n_archetypes == 0 || cfg.n_items < cfg.n_archetypes {
        return Err(Error::Config(format!(
            "need 1 <= archetypes <= items (got {} archetypes, {} items)",
            cfg.n_archetypes, cfg.n_items
        )));
    }
    if !(0.0..=1.0).contains(&cfg.core_mass) {
        return Err(Error::Config("core_mass must lie in [0, 1]".into()));
    }
    let codebook = Codebook::generate(cfg.seed, cfg.vocab_size, cfg.patch_side)?;
    let mut rng = util::rng_from(cfg.seed, &[0xCA7A]);
    let v = cfg.vocab_size;

    let mut perm: Vec<usize> = (0..v).collect();
    perm.shuffle(&mut rng);
    let core = (v / 8).max(2).min(v);
    let tags_per = 6;
    let archetypes: Vec<Archetype> = (0..cfg.n_archetypes)
        .map(|a| {
            let core_tokens: Vec<usize> = (0..core).map(|k| perm[(a * core + k) % v]).collect();
            let rest = v - core;
            let token_weights = (0..v)
                .map(|t| {
                    if core_tokens.contains(&t) {
                        cfg.core_mass / core as f64
                    } else if rest > 0 {
                        (1.0 - cfg.core_mass) / rest as f64
                    } else {
                        0.0
                    }
                })
                .collect();
            let round = (a * tags_per) / TAG_POOL.len();
            let tags = (0..tags_per)
                .map(|k| {
                    let w = TAG_POOL[(a * tags_per + k) % TAG_POOL.len()];
                    if round == 0 {
                        w.to_string()
                    } else {
                        format!("{w}{round}")
                    }
                })
                .collect::<Vec<_>>();
            let title_words = tags[..2].to_vec();
            Archetype {
                token_weights,
                core_tokens,
                tags,
                title_words,
            }
        })
        .collect();

    let mut assignments: Vec<usize> = (0..cfg.n_items).map(|i| i % cfg.n_archetypes).collect();
    assignments.shuffle(&mut rng);

    let samplers = archetypes
        .iter()
        .map(|a| WeightedIndex::new(&a.token_weights))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Config(format!("archetype weights: {e}")))?;

    let n_tokens = cfg.grid_w * cfg.grid_h;
    let items = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let arch = &archetypes[a];
            let tokens = (0..n_tokens)
                .map(|_| samplers[a].sample(&mut rng))
                .collect();
            let n_tags = rng.gen_range(2..=3);
            let tags: Vec<String> = arch
                .tags
                .choose_multiple(&mut rng, n_tags)
                .cloned()
                .collect();
            let adj = arch.title_words.choose(&mut rng).expect("two title words");
            let noun = TITLE_NOUNS.choose(&mut rng).expect("non-empty pool");
            Item {
                item_id: format!("item-{i:04}"),
                title: format!("The {adj} {noun} {i}"),
                intro: format!("A {} story about a {noun}.", tags[0]),
                tags,
                image: TokenImage {
                    grid_w: cfg.grid_w,
                    grid_h: cfg.grid_h,
                    tokens,
                    codebook_id: codebook.codebook_id.clone(),
                },
            }
        })
        .collect();

    Ok(SynthCatalog {
        codebook,
        items,
        assignments,
        archetypes,
    })
}
