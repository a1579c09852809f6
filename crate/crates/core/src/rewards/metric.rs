use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricId {
    Cts,
    Cis,
    Dis,
    Pcs,
    Lpips,
    Ssim,
    MsSsim,
    Nima,
}

impl MetricId {
    pub const ALL: [MetricId; 8] = [
        MetricId::Cts,
        MetricId::Cis,
        MetricId::Dis,
        MetricId::Pcs,
        MetricId::Lpips,
        MetricId::Ssim,
        MetricId::MsSsim,
        MetricId::Nima,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricId::Cts => "CTS",
            MetricId::Cis => "CIS",
            MetricId::Dis => "DIS",
            MetricId::Pcs => "PCS",
            MetricId::Lpips => "LPIPS",
            MetricId::Ssim => "SSIM",
            MetricId::MsSsim => "MS-SSIM",
            MetricId::Nima => "NIMA",
        }
    }

    /// Lower is better only for LPIPS.
    pub fn lower_is_better(self) -> bool {
        self == MetricId::Lpips
    }

    /// Perceptual metrics are stored on a unit scale and reported x100.
    pub fn is_perceptual(self) -> bool {
        matches!(self, MetricId::Lpips | MetricId::Ssim | MetricId::MsSsim)
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.to_ascii_uppercase().replace('_', "-");
        MetricId::ALL
            .into_iter()
            .find(|m| m.as_str() == up || (up == "MSSSIM" && *m == MetricId::MsSsim))
            .ok_or_else(|| Error::UnknownMetric(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TargetGroup {
    Golden,
    History,
    Future,
}

impl TargetGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetGroup::Golden => "golden",
            TargetGroup::History => "history",
            TargetGroup::Future => "future",
        }
    }
}

/// One metric cell. NIMA has no target group; PCS is scored against the
/// history profile and lives in the history block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub group: Option<TargetGroup>,
    pub metric: MetricId,
}

impl Cell {
    pub const fn new(group: TargetGroup, metric: MetricId) -> Self {
        Self {
            group: Some(group),
            metric,
        }
    }

    pub const NIMA: Cell = Cell {
        group: None,
        metric: MetricId::Nima,
    };

    /// `group/METRIC`, or `aesthetics/NIMA`.
    pub fn label(&self) -> String {
        let g = self.group.map_or("aesthetics", TargetGroup::as_str);
        format!("{g}/{}", self.metric)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// The 17 cells in evaluation-table order.
pub fn table_cells() -> Vec<Cell> {
    use MetricId::*;
    use TargetGroup::*;
    let mut cells = Vec::with_capacity(17);
    cells.extend([Cts, Cis, Dis].map(|m| Cell::new(Golden, m)));
    cells.extend([Cts, Cis, Dis, Pcs, Lpips, Ssim, MsSsim].map(|m| Cell::new(History, m)));
    cells.extend([Cts, Cis, Dis, Lpips, Ssim, MsSsim].map(|m| Cell::new(Future, m)));
    cells.push(Cell::NIMA);
    cells
}

/// Arithmetic mean; `None` for an empty group, which drops the cell.
pub fn aggregate_group(values: &[f64]) -> Option<f64> {
    crate::util::mean(values)
}

/// Fixed affine maps onto `[0, 1]`. Similarity scores are on the 0-100
/// scale, SSIM-family and LPIPS on the unit scale, NIMA on `[1, 10]`.
pub fn normalize_reward(metric: MetricId, raw: f64) -> Result<f64> {
    if !raw.is_finite() {
        return Err(Error::NonFinite(format!("{metric} raw value {raw}")));
    }
    Ok(match metric {
        MetricId::Cts | MetricId::Cis | MetricId::Dis | MetricId::Pcs => {
            (raw / 100.0).clamp(0.0, 1.0)
        }
        MetricId::Ssim | MetricId::MsSsim => raw.clamp(0.0, 1.0),
        MetricId::Lpips => (1.0 - raw.clamp(0.0, 1.0)).clamp(0.0, 1.0),
        MetricId::Nima => ((raw - 1.0) / 9.0).clamp(0.0, 1.0),
    })
}
