//! Evaluation protocol: several candidates per test sample, per-cell best
//! selection, a mean over samples, and the metric average.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Codebook, PixelImage};
use crate::dataset::{Sample, FUTURE_HORIZON, WINDOW};
use crate::policy::PolicyModel;
use crate::rewards::{table_cells, Cell, MetricId, Providers, RewardContext};
use crate::util;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Interaction window (history plus golden item).
    pub k: usize,
    /// Future horizon.
    pub p: usize,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: WINDOW,
            p: FUTURE_HORIZON,
            n_candidates: 4,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 {
            return Err(Error::Config("eval.n_candidates must be at least 1".into()));
        }
        Ok(())
    }
}

/// Anything that can propose images for a sample.
pub trait Generator: Sync {
    fn generate(&self, sample: &Sample, n: usize, rng: &mut dyn RngCore)
        -> Result<Vec<PixelImage>>;
}

impl Generator for PolicyModel {
    fn generate(
        &self,
        sample: &Sample,
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<PixelImage>> {
        generate_candidates(self, sample, n, rng)
    }
}

/// `n` independent rollouts at the model's temperature, decoded.
pub fn generate_candidates(
    model: &PolicyModel,
    sample: &Sample,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<PixelImage>> {
    (0..n)
        .map(|_| Ok(model.sample(&sample.history, rng)?.1))
        .collect()
}

/// Best value across candidates: minimum for LPIPS, maximum otherwise.
pub fn best_of(values: &[f64], metric: MetricId) -> Result<f64> {
    let first = *values
        .first()
        .ok_or_else(|| Error::Empty(format!("best_of({metric}) over no candidates")))?;
    Ok(values.iter().copied().fold(first, |acc, v| {
        if metric.lower_is_better() {
            acc.min(v)
        } else {
            acc.max(v)
        }
    }))
}

/// Converts a raw cell value to its reported scale: SSIM, MS-SSIM and
/// LPIPS are multiplied by 100; the rest are already on their final scale.
pub fn report_scale(metric: MetricId, raw: f64) -> f64 {
    if metric.is_perceptual() {
        raw * 100.0
    } else {
        raw
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub user_id: String,
    pub origin_window_index: usize,
    /// Best-of-n reported values keyed by cell label.
    pub cells: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    /// Mean over samples of the reported per-cell values.
    pub rows: BTreeMap<Cell, f64>,
    /// Samples that contributed to each row.
    pub counts: BTreeMap<Cell, usize>,
    pub n_samples: usize,
    /// Present when all 17 rows exist.
    pub metric_average: Option<f64>,
}

impl MetricTable {
    pub fn from_rows(rows: BTreeMap<Cell, f64>) -> Self {
        let metric_average = metric_average(&rows).ok();
        let counts = rows.keys().map(|&c| (c, 1)).collect();
        Self {
            rows,
            counts,
            n_samples: 1,
            metric_average,
        }
    }

    /// `row,value` in table order, then the metric average.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,value\n");
        for cell in table_cells() {
            if let Some(v) = self.rows.get(&cell) {
                let _ = writeln!(out, "{},{v}", cell.label());
            }
        }
        if let Some(avg) = self.metric_average {
            let _ = writeln!(out, "metric_average,{avg}");
        }
        out
    }
}

/// Mean of the 17 table rows with every LPIPS value `v` replaced by
/// `100 - v`.
pub fn metric_average(rows: &BTreeMap<Cell, f64>) -> Result<f64> {
    let cells = table_cells();
    let missing: Vec<String> = cells
        .iter()
        .filter(|c| !rows.contains_key(c))
        .map(Cell::label)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingRows(missing.join(", ")));
    }
    let total: f64 = cells
        .iter()
        .map(|c| {
            let v = rows[c];
            if c.metric == MetricId::Lpips {
                100.0 - v
            } else {
                v
            }
        })
        .sum();
    Ok(total / cells.len() as f64)
}

/// Per-cell best-of over the candidates' raw cells, in reported scale.
pub fn best_cells(per_candidate: &[BTreeMap<Cell, f64>]) -> Result<BTreeMap<Cell, f64>> {
    let first = per_candidate
        .first()
        .ok_or_else(|| Error::Empty("no candidates to select from".into()))?;
    let mut out = BTreeMap::new();
    for &cell in first.keys() {
        let values: Vec<f64> = per_candidate
            .iter()
            .map(|c| {
                c.get(&cell)
                    .map(|&v| report_scale(cell.metric, v))
                    .ok_or_else(|| Error::DimensionMismatch(format!("candidate lacks {cell}")))
            })
            .collect::<Result<_>>()?;
        out.insert(cell, best_of(&values, cell.metric)?);
    }
    Ok(out)
}

/// Scores every test sample and folds the per-sample best values into a
/// table. Sample `i` draws its candidates from a seed derived from
/// `(cfg.seed, i)`.
pub fn evaluate(
    generator: &dyn Generator,
    test: &[Sample],
    codebook: &Codebook,
    providers: &Providers,
    cfg: &EvalConfig,
) -> Result<(MetricTable, Vec<SampleScores>)> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(Error::Empty(
            "evaluation needs at least one test sample".into(),
        ));
    }
    let per_sample = test
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let mut rng = util::rng_from(cfg.seed, &[0xE7A1, i as u64]);
            let candidates = generator.generate(sample, cfg.n_candidates, &mut rng)?;
            let ctx = RewardContext::new(sample, codebook, providers)?;
            let raw = candidates
                .iter()
                .map(|px| ctx.raw_cells(px))
                .collect::<Result<Vec<_>>>()?;
            best_cells(&raw)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sums: BTreeMap<Cell, f64> = BTreeMap::new();
    let mut counts: BTreeMap<Cell, usize> = BTreeMap::new();
    for cells in &per_sample {
        for (&cell, &v) in cells {
            *sums.entry(cell).or_default() += v;
            *counts.entry(cell).or_default() += 1;
        }
    }
    let rows: BTreeMap<Cell, f64> = sums
        .iter()
        .map(|(&c, &s)| (c, s / counts[&c] as f64))
        .collect();
    let audit = test
        .iter()
        .zip(&per_sample)
        .map(|(s, cells)| SampleScores {
            user_id: s.user_id.clone(),
            origin_window_index: s.origin_window_index,
            cells: cells.iter().map(|(c, v)| (c.label(), *v)).collect(),
        })
        .collect();
    let table = MetricTable {
        metric_average: metric_average(&rows).ok(),
        rows,
        counts,
        n_samples: test.len(),
    };
    Ok((table, audit))
}
