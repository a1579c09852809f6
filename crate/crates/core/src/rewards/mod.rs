//! Relevance and aesthetics metrics, and the composite reward built on them.
//!
//! Every score is computed per `(metric, target group)` cell. The same cell
//! set feeds the GRPO reward and the evaluation table:
//!
//! | group   | cells                                   |
//! |---------|-----------------------------------------|
//! | golden  | CTS CIS DIS                             |
//! | history | CTS CIS DIS PCS LPIPS SSIM MS-SSIM      |
//! | future  | CTS CIS DIS LPIPS SSIM MS-SSIM          |
//! | none    | NIMA                                    |

mod composite;
mod metric;
mod perceptual;
mod providers;
mod structural;

pub use composite::{composite_reward, RewardBreakdown, RewardContext};
pub use metric::{aggregate_group, normalize_reward, table_cells, Cell, MetricId, TargetGroup};
pub use perceptual::{perceptual_distance, FeatureStack, PerceptualBank, DEFAULT_BANK_SEED};
pub use providers::{
    clip_score, AestheticsProvider, EmbeddingProvider, ProfileProvider, ProviderIds,
    ProviderRegistry, Providers, ToyAesthetics, ToyEmbedder, ToyProfile, EMBED_DIM,
};
pub use structural::{msssim, ssim, MSSSIM_WEIGHTS, SSIM_WINDOW};
