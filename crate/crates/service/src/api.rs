//! Request and response bodies.

use baldseg::domain::{BinaryMask, Image, Pixel};
use baldseg::session::{StopConfig, StopReason};
use baldseg::synth::SplitName;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Labels come from the ground-truth mask; the client may omit them.
    Simulated,
    /// Labels come from the client.
    #[default]
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineImage {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub values: Vec<f64>,
}

impl InlineImage {
    pub fn to_image(&self) -> ApiResult<Image> {
        Ok(Image::new(self.height, self.width, self.values.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineMask {
    pub height: usize,
    pub width: usize,
    /// Row-major 0/1 values.
    pub values: Vec<u8>,
}

impl InlineMask {
    pub fn to_mask(&self) -> ApiResult<BinaryMask> {
        let bits = self
            .values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(ApiError::bad_request(format!("mask value {other} is not 0 or 1"))),
            })
            .collect::<ApiResult<Vec<_>>>()?;
        Ok(BinaryMask::new(self.height, self.width, bits)?)
    }
}

/// Stopping-rule overrides; absent fields keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopOverrides {
    pub tau_mi: Option<f64>,
    pub tau_ent: Option<f64>,
    pub budget: Option<usize>,
}

impl StopOverrides {
    pub fn resolve(&self) -> StopConfig {
        let d = StopConfig::default();
        StopConfig {
            tau_mi: self.tau_mi.unwrap_or(d.tau_mi),
            tau_ent: self.tau_ent.or(d.tau_ent),
            budget: self.budget.unwrap_or(d.budget),
        }
    }
}

fn default_posterior() -> String {
    crate::DEFAULT_POSTERIOR.to_string()
}

/// `POST /sessions`. Exactly one of `item_id` and `image` must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub item_id: Option<String>,
    #[serde(default)]
    pub image: Option<InlineImage>,
    /// Ground truth for an inline image (dataset items bring their own).
    #[serde(default)]
    pub ground_truth: Option<InlineMask>,
    pub strategy: String,
    #[serde(default)]
    pub stop_config: StopOverrides,
    #[serde(default = "default_posterior")]
    pub posterior_id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    /// Trajectory JSONL replayed by the `human_replay` strategy.
    #[serde(default)]
    pub replay_log: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub q: Pixel,
    pub max_mi: f64,
    pub h_total: f64,
    pub heatmap_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub initial_mask_digest: String,
    pub suggestion: Option<Suggestion>,
    pub stop_reason: Option<StopReason>,
}

/// `POST /sessions/{id}/label`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRequest {
    pub q: [i64; 2],
    /// 0 = exclude, 1 = include. Optional in simulated mode.
    #[serde(default)]
    pub label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labelled {
    pub t: usize,
    pub mask_digest: String,
    pub iou: Option<f64>,
    pub next_suggestion: Option<Suggestion>,
    pub stop_reason: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stopped {
    pub stop_reason: StopReason,
    pub iterations: usize,
}

/// `GET /sessions/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub created_at: u64,
    pub mode: Mode,
    pub strategy: String,
    pub item_id: Option<String>,
    pub height: usize,
    pub width: usize,
    pub has_ground_truth: bool,
    pub iteration: usize,
    pub stop_reason: Option<StopReason>,
    pub stop_config: StopConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub id: String,
    pub item_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemInfo {
    pub id: String,
    pub split: SplitName,
}
