//! Provider interfaces for embedding, aesthetics and profile models, the
//! deterministic toy implementations, and a registry keyed by role and id.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::catalog::{Codebook, Item, PixelImage};
use crate::rewards::perceptual::PerceptualBank;
use crate::util;
use crate::{Error, Result};

/// Width of every toy embedding (image and text share the space).
pub const EMBED_DIM: usize = 64;
/// Weight of the colour statistics relative to the token histogram.
const COLOUR_SCALE: f64 = 0.25;

pub const TOY_CLIP: &str = "toy-clip";
pub const TOY_DINO: &str = "toy-dino";
pub const TOY_NIMA: &str = "toy-nima";
pub const TOY_PROFILE: &str = "toy-profile";

const CLIP_SALT: u64 = 0xC11F;
const DINO_SALT: u64 = 0xD1E0;

pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    /// Unit-length (or all-zero) image embedding.
    fn embed_image(&self, img: &PixelImage) -> Vec<f64>;
    /// Unit-length (or all-zero) text embedding.
    fn embed_text(&self, text: &str) -> Vec<f64>;
}

pub trait AestheticsProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    /// Score in `[1, 10]`.
    fn score(&self, img: &PixelImage) -> f64;
}

pub trait ProfileProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn profile(&self, history: &[Item]) -> String;
}

/// `100 * max(0, cos(e1, e2))`; a zero vector scores 0.
pub fn clip_score(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::DimensionMismatch(format!(
            "embedding dims {} vs {}",
            e1.len(),
            e2.len()
        )));
    }
    let dot: f64 = e1.iter().zip(e2).map(|(a, b)| a * b).sum();
    let n1: f64 = e1.iter().map(|a| a * a).sum();
    let n2: f64 = e2.iter().map(|b| b * b).sum();
    if n1 == 0.0 || n2 == 0.0 {
        return Ok(0.0);
    }
    let cos = dot / (n1 * n2).sqrt();
    Ok(100.0 * cos.clamp(0.0, 1.0))
}

/// Feature-hashing embedder over codebook-token histograms and colour stats.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    id: String,
    salt: u64,
    codebook: Arc<Codebook>,
}

impl ToyEmbedder {
    pub fn new(id: &str, salt: u64, codebook: Arc<Codebook>) -> Self {
        Self {
            id: id.to_string(),
            salt,
            codebook,
        }
    }

    pub fn clip(codebook: Arc<Codebook>) -> Self {
        Self::new(TOY_CLIP, CLIP_SALT, codebook)
    }

    pub fn dino(codebook: Arc<Codebook>) -> Self {
        Self::new(TOY_DINO, DINO_SALT, codebook)
    }

    fn bucket(&self, key: &str) -> usize {
        (util::fnv1a(self.salt, key.as_bytes()) % EMBED_DIM as u64) as usize
    }

    /// Fraction of patches assigned to each codebook token, over the
    /// patch-aligned top-left region.
    fn token_histogram(&self, img: &PixelImage) -> Vec<f64> {
        let p = self.codebook.patch_side;
        let (gw, gh) = (img.width() / p, img.height() / p);
        let mut hist = vec![0.0; self.codebook.vocab_size];
        if gw == 0 || gh == 0 {
            return hist;
        }
        let mut block = Vec::with_capacity(self.codebook.patch_len());
        for by in 0..gh {
            for bx in 0..gw {
                block.clear();
                for y in 0..p {
                    for x in 0..p {
                        block.extend_from_slice(&img.pixel(bx * p + x, by * p + y));
                    }
                }
                hist[self.codebook.nearest(&block)] += 1.0;
            }
        }
        let total = (gw * gh) as f64;
        hist.iter_mut().for_each(|h| *h /= total);
        hist
    }
}

impl EmbeddingProvider for ToyEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn embed_image(&self, img: &PixelImage) -> Vec<f64> {
        let mut out = vec![0.0; EMBED_DIM];
        for (t, &h) in self.token_histogram(img).iter().enumerate() {
            if h > 0.0 {
                out[self.bucket(&format!("tok:{t}"))] += h;
            }
        }
        let n = img.rgb().len().max(1) as f64;
        for c in 0..3 {
            let m = img.rgb().iter().map(|px| px[c]).sum::<f64>() / n;
            let var = img.rgb().iter().map(|px| (px[c] - m).powi(2)).sum::<f64>() / n;
            out[self.bucket(&format!("mean:{c}"))] += COLOUR_SCALE * m;
            out[self.bucket(&format!("std:{c}"))] += COLOUR_SCALE * var.sqrt();
        }
        util::l2_normalize(&mut out);
        out
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; EMBED_DIM];
        for w in util::words(text) {
            out[self.bucket(&format!("word:{w}"))] += 1.0;
        }
        util::l2_normalize(&mut out);
        out
    }
}

/// Contrast heuristic: `1 + 9 * clamp(2 * std(luma), 0, 1)`.
#[derive(Debug, Clone, Default)]
pub struct ToyAesthetics;

impl AestheticsProvider for ToyAesthetics {
    fn provider_id(&self) -> &str {
        TOY_NIMA
    }

    fn score(&self, img: &PixelImage) -> f64 {
        let std = util::pop_std(img.luma()).unwrap_or(0.0);
        1.0 + 9.0 * (2.0 * std).clamp(0.0, 1.0)
    }
}

/// Titles and tags of the history items, in order; masked slots are skipped.
#[derive(Debug, Clone, Default)]
pub struct ToyProfile;

impl ProfileProvider for ToyProfile {
    fn provider_id(&self) -> &str {
        TOY_PROFILE
    }

    fn profile(&self, history: &[Item]) -> String {
        let mut parts = Vec::new();
        for item in history.iter().filter(|i| !i.is_sentinel()) {
            if !item.title.is_empty() {
                parts.push(item.title.clone());
            }
            if !item.tags.is_empty() {
                parts.push(item.tags.join(", "));
            }
        }
        parts.join("; ")
    }
}

/// Provider ids chosen for each role.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ProviderIds {
    pub clip: String,
    pub dino: String,
    pub aesthetics: String,
    pub profile: String,
}

impl Default for ProviderIds {
    fn default() -> Self {
        Self {
            clip: TOY_CLIP.into(),
            dino: TOY_DINO.into(),
            aesthetics: TOY_NIMA.into(),
            profile: TOY_PROFILE.into(),
        }
    }
}

/// Resolved providers for one reward configuration.
#[derive(Clone)]
pub struct Providers {
    pub clip: Arc<dyn EmbeddingProvider>,
    pub dino: Arc<dyn EmbeddingProvider>,
    pub aesthetics: Arc<dyn AestheticsProvider>,
    pub profile: Arc<dyn ProfileProvider>,
    pub bank: Arc<PerceptualBank>,
}

impl Providers {
    /// Toy providers for `codebook` with the default perceptual bank.
    pub fn toy(codebook: Arc<Codebook>) -> Self {
        ProviderRegistry::with_toys(codebook)
            .resolve(&ProviderIds::default(), PerceptualBank::default())
            .expect("toy providers are always registered")
    }
}

#[derive(Default, Clone)]
pub struct ProviderRegistry {
    embedders: BTreeMap<String, Arc<dyn EmbeddingProvider>>,
    aesthetics: BTreeMap<String, Arc<dyn AestheticsProvider>>,
    profiles: BTreeMap<String, Arc<dyn ProfileProvider>>,
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_toys(codebook: Arc<Codebook>) -> Self {
        let mut reg = Self::new();
        reg.register_embedder(Arc::new(ToyEmbedder::clip(codebook.clone())));
        reg.register_embedder(Arc::new(ToyEmbedder::dino(codebook)));
        reg.register_aesthetics(Arc::new(ToyAesthetics));
        reg.register_profile(Arc::new(ToyProfile));
        reg
    }

    pub fn register_embedder(&mut self, p: Arc<dyn EmbeddingProvider>) {
        self.embedders.insert(p.provider_id().to_string(), p);
    }

    pub fn register_aesthetics(&mut self, p: Arc<dyn AestheticsProvider>) {
        self.aesthetics.insert(p.provider_id().to_string(), p);
    }

    pub fn register_profile(&mut self, p: Arc<dyn ProfileProvider>) {
        self.profiles.insert(p.provider_id().to_string(), p);
    }

    pub fn resolve(&self, ids: &ProviderIds, bank: PerceptualBank) -> Result<Providers> {
        fn find<T: ?Sized>(map: &BTreeMap<String, Arc<T>>, role: &str, id: &str) -> Result<Arc<T>> {
            map.get(id)
                .cloned()
                .ok_or_else(|| Error::ProviderMissing(format!("{role} provider {id:?}")))
        }
        Ok(Providers {
            clip: find(&self.embedders, "clip", &ids.clip)?,
            dino: find(&self.embedders, "dino", &ids.dino)?,
            aesthetics: find(&self.aesthetics, "aesthetics", &ids.aesthetics)?,
            profile: find(&self.profiles, "profile", &ids.profile)?,
            bank: Arc::new(bank),
        })
    }
}
