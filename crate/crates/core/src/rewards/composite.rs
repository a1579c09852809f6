//! Per-prompt reward context and the composite reward.

use std::collections::BTreeMap;

use crate::catalog::{decode_image, Codebook, Item, PixelImage};
use crate::dataset::Sample;
use crate::rewards::metric::{aggregate_group, normalize_reward, Cell, MetricId, TargetGroup};
use crate::rewards::perceptual::FeatureStack;
use crate::rewards::providers::{clip_score, Providers};
use crate::rewards::structural::{msssim, ssim};
use crate::Result;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RewardBreakdown {
    /// Raw metric values. Similarities on 0-100, SSIM-family and LPIPS on
    /// the unit scale, NIMA on `[1, 10]`.
    pub raw: BTreeMap<Cell, f64>,
    pub normalized: BTreeMap<Cell, f64>,
    pub composite: f64,
}

impl RewardBreakdown {
    pub fn from_raw(raw: BTreeMap<Cell, f64>) -> Result<Self> {
        let mut normalized = BTreeMap::new();
        for (&cell, &v) in &raw {
            normalized.insert(cell, normalize_reward(cell.metric, v)?);
        }
        let composite = normalized.values().sum();
        Ok(Self {
            raw,
            normalized,
            composite,
        })
    }
}

struct Target {
    pixels: PixelImage,
    clip_image: Vec<f64>,
    clip_text: Vec<f64>,
    dino_image: Vec<f64>,
    lpips: Option<FeatureStack>,
}

/// Everything about one prompt that does not depend on the generated image.
pub struct RewardContext {
    providers: Providers,
    groups: Vec<(TargetGroup, Vec<Target>)>,
    profile_embedding: Vec<f64>,
}

impl RewardContext {
    pub fn new(sample: &Sample, codebook: &Codebook, providers: &Providers) -> Result<Self> {
        let build = |items: &[Item], perceptual: bool| -> Result<Vec<Target>> {
            items
                .iter()
                .filter(|it| !it.is_sentinel())
                .map(|it| {
                    let pixels = decode_image(&it.image, codebook)?;
                    Ok(Target {
                        clip_image: providers.clip.embed_image(&pixels),
                        clip_text: providers.clip.embed_text(&it.text()),
                        dino_image: providers.dino.embed_image(&pixels),
                        lpips: perceptual.then(|| providers.bank.features(&pixels)),
                        pixels,
                    })
                })
                .collect()
        };
        let groups = vec![
            (
                TargetGroup::Golden,
                build(std::slice::from_ref(&sample.golden), false)?,
            ),
            (TargetGroup::History, build(&sample.history, true)?),
            (TargetGroup::Future, build(&sample.future, true)?),
        ];
        let profile = providers.profile.profile(&sample.history);
        Ok(Self {
            profile_embedding: providers.clip.embed_text(&profile),
            providers: providers.clone(),
            groups,
        })
    }

    /// Raw value of every applicable cell for `generated`.
    pub fn raw_cells(&self, generated: &PixelImage) -> Result<BTreeMap<Cell, f64>> {
        let p = &self.providers;
        let clip_img = p.clip.embed_image(generated);
        let dino_img = p.dino.embed_image(generated);
        let mut gen_feats = None;
        let mut raw = BTreeMap::new();
        for (group, targets) in &self.groups {
            if targets.is_empty() {
                continue;
            }
            let mut cols: BTreeMap<MetricId, Vec<f64>> = BTreeMap::new();
            for t in targets {
                let mut push = |m: MetricId, v: f64| cols.entry(m).or_default().push(v);
                push(MetricId::Cts, clip_score(&clip_img, &t.clip_text)?);
                push(MetricId::Cis, clip_score(&clip_img, &t.clip_image)?);
                push(MetricId::Dis, clip_score(&dino_img, &t.dino_image)?);
                if let Some(tf) = &t.lpips {
                    let gf = gen_feats.get_or_insert_with(|| p.bank.features(generated));
                    push(MetricId::Lpips, gf.distance(tf)?);
                    push(MetricId::Ssim, ssim(generated, &t.pixels)?);
                    push(MetricId::MsSsim, msssim(generated, &t.pixels)?);
                }
            }
            for (m, values) in cols {
                if let Some(v) = aggregate_group(&values) {
                    raw.insert(Cell::new(*group, m), v);
                }
            }
            if *group == TargetGroup::History {
                raw.insert(
                    Cell::new(TargetGroup::History, MetricId::Pcs),
                    clip_score(&clip_img, &self.profile_embedding)?,
                );
            }
        }
        raw.insert(Cell::NIMA, p.aesthetics.score(generated));
        Ok(raw)
    }

    pub fn score(&self, generated: &PixelImage) -> Result<RewardBreakdown> {
        RewardBreakdown::from_raw(self.raw_cells(generated)?)
    }
}

/// One-shot reward for a single generated image.
pub fn composite_reward(
    sample: &Sample,
    generated: &PixelImage,
    codebook: &Codebook,
    providers: &Providers,
) -> Result<RewardBreakdown> {
    RewardContext::new(sample, codebook, providers)?.score(generated)
}
