//! Run configuration: one flat key-value document covering the world
//! generator, model shape, training, and evaluation. Every key has a
//! default, so an empty document is a valid run; unknown keys are
//! rejected so typos fail loudly instead of silently using a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::FpAttribution;
use crate::nn::{AdamConfig, BackboneConfig};
use crate::pillars::GridConfig;
use crate::simworld::SimConfig;
use crate::sti::StiConfig;
use crate::trpn::{
    AnchorPrior, AssignerConfig, LossWeights, Normalizer, ProposalConfig, TrpnHeadConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("bad override {0:?}: expected key=value")]
    BadOverride(String),
    #[error("{0}")]
    Invalid(String),
}

/// Which standing box a rotated box becomes before cropping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandingBoxKey {
    /// Snap the heading to the nearest axis, keeping the area.
    #[default]
    Snap,
    /// Loose axis-aligned bounding box of the rotated corners.
    Aabb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // World generator.
    pub world_extent_m: f64,
    pub solo_min: usize,
    pub solo_max: usize,
    pub group_prob: f64,
    pub group_size_min: usize,
    pub group_size_max: usize,
    pub clutter_points: usize,
    pub ego_speed_max: f64,

    // Frame timing: t_prime raw sweeps grouped into t pseudo frames.
    pub t_prime: usize,
    pub t: usize,
    pub frame_dt_s: f64,
    pub n_future: usize,
    pub future_dt_s: f64,

    // Binning grid, centered on the origin.
    pub range_m: f64,
    pub pillar_m: f64,
    pub max_points_per_pillar: usize,
    /// 0 keeps every occupied pillar.
    pub max_pillars: usize,

    // Encoder and backbone widths.
    pub pillar_channels: usize,
    pub backbone_c0: usize,
    pub backbone_c1: usize,
    pub backbone_c2: usize,

    // First stage.
    pub temporal_channels: usize,
    pub anchor_w: f64,
    pub anchor_l: f64,
    pub th_pos: f64,
    pub th_neg: f64,
    pub normalizer: Normalizer,
    pub loss_cls: f64,
    pub loss_cur: f64,
    pub loss_past: f64,
    pub pre_nms_top_k: usize,
    pub post_nms_top_k: usize,
    pub proposal_nms_iou: f64,

    // Second stage.
    pub roi_s: usize,
    pub d_c: usize,
    pub d_path: usize,
    pub d_att: usize,
    pub d_g: usize,
    pub use_history_path: bool,
    pub use_interaction: bool,
    pub standing_box: StandingBoxKey,
    pub loss2_cls: f64,
    pub loss2_cur: f64,
    pub loss2_future: f64,

    // Training.
    pub lr: f64,
    pub max_grad_norm: f64,
    pub train_steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,

    // Inference and evaluation.
    pub score_threshold: f64,
    pub final_nms_iou: f64,
    pub eval_iou: f64,
    pub breakdown_bin_m: f64,
    pub fp_attribution: FpAttributionKey,
}

/// Serializable spelling of the breakdown FP attribution mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpAttributionKey {
    #[default]
    AllBins,
    NearestGt,
}

impl From<FpAttributionKey> for FpAttribution {
    fn from(k: FpAttributionKey) -> Self {
        match k {
            FpAttributionKey::AllBins => FpAttribution::AllBins,
            FpAttributionKey::NearestGt => FpAttribution::NearestGt,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world_extent_m: 16.0,
            solo_min: 3,
            solo_max: 8,
            group_prob: 0.5,
            group_size_min: 5,
            group_size_max: 7,
            clutter_points: 120,
            ego_speed_max: 3.0,

            t_prime: 6,
            t: 3,
            frame_dt_s: 0.1,
            n_future: 6,
            future_dt_s: 0.5,

            range_m: 40.0,
            pillar_m: 0.3125,
            max_points_per_pillar: 32,
            max_pillars: 0,

            pillar_channels: 16,
            backbone_c0: 8,
            backbone_c1: 16,
            backbone_c2: 32,

            temporal_channels: 32,
            anchor_w: 0.9,
            anchor_l: 0.9,
            th_pos: 0.5,
            th_neg: 0.35,
            normalizer: Normalizer::PositionNorm,
            loss_cls: 1.0,
            loss_cur: 1.0,
            loss_past: 1.0,
            pre_nms_top_k: 512,
            post_nms_top_k: 64,
            proposal_nms_iou: 0.5,

            roi_s: 5,
            d_c: 96,
            d_path: 32,
            d_att: 32,
            d_g: 64,
            use_history_path: true,
            use_interaction: true,
            standing_box: StandingBoxKey::Snap,
            loss2_cls: 1.0,
            loss2_cur: 1.0,
            loss2_future: 1.0,

            lr: 4e-4,
            train_steps: 400,
            seed: 0,
            checkpoint_every: 100,

            score_threshold: 0.3,
            final_nms_iou: 0.5,
            eval_iou: 0.5,
            breakdown_bin_m: 2.5,
            fp_attribution: FpAttributionKey::AllBins,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// The effective configuration as a TOML document, for echoing into
    /// the run directory.
    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Applies `key=value` overrides on top of this configuration. Values
    /// parse as TOML (numbers, booleans) and fall back to strings, so
    /// `normalizer=diagonal` works without quoting. Unknown keys fail.
    pub fn with_overrides(&self, pairs: &[String]) -> Result<Self, ConfigError> {
        let mut doc = String::new();
        for p in pairs {
            let (key, value) = p
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(p.clone()))?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::BadOverride(p.clone()));
            }
            let line = format!("{key} = {value}\n");
            if toml::from_str::<toml::Table>(&line).is_ok() {
                doc.push_str(&line);
            } else {
                doc.push_str(&format!("{key} = {value:?}\n"));
            }
        }
        let overrides: toml::Table = toml::from_str(&doc)?;
        let mut base: toml::Table =
            self.to_toml_string()?.parse().expect("own serialization parses");
        for (k, v) in overrides {
            base.insert(k, v);
        }
        let cfg: RunConfig = toml::Table::try_into(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.t < 2 {
            return fail(format!("t must be at least 2, got {}", self.t));
        }
        if self.t_prime == 0 || self.t_prime % self.t != 0 {
            return fail(format!(
                "t_prime {} must be a positive multiple of t {}",
                self.t_prime, self.t
            ));
        }
        let grid = self.grid().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if grid.rows % 4 != 0 || grid.cols % 4 != 0 {
            return fail(format!(
                "grid {}x{} must divide by 4 for the backbone",
                grid.rows, grid.cols
            ));
        }
        if !(self.th_pos > self.th_neg) {
            return fail(format!(
                "th_pos {} must exceed th_neg {}",
                self.th_pos, self.th_neg
            ));
        }
        for (name, v) in [
            ("frame_dt_s", self.frame_dt_s),
            ("future_dt_s", self.future_dt_s),
            ("lr", self.lr),
            ("anchor_w", self.anchor_w),
            ("anchor_l", self.anchor_l),
            ("breakdown_bin_m", self.breakdown_bin_m),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("n_future", self.n_future),
            ("roi_s", self.roi_s),
            ("d_c", self.d_c),
            ("d_path", self.d_path),
            ("d_att", self.d_att),
            ("d_g", self.d_g),
            ("pillar_channels", self.pillar_channels),
            ("temporal_channels", self.temporal_channels),
            ("pre_nms_top_k", self.pre_nms_top_k),
            ("post_nms_top_k", self.post_nms_top_k),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridConfig, crate::pillars::PillarError> {
        GridConfig::new(
            self.range_m,
            self.range_m,
            self.pillar_m,
            self.max_points_per_pillar,
            self.max_pillars,
        )
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            solo_min: self.solo_min,
            solo_max: self.solo_max,
            group_prob: self.group_prob,
            group_size_min: self.group_size_min,
            group_size_max: self.group_size_max,
            extent: self.world_extent_m,
            t_prime: self.t_prime,
            frame_dt: self.frame_dt_s,
            n_future: self.n_future,
            future_dt: self.future_dt_s,
            clutter: self.clutter_points,
            ego_speed_max: self.ego_speed_max,
        }
    }

    /// Raw frames per pseudo frame.
    pub fn frames_per_group(&self) -> usize {
        self.t_prime / self.t
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            c_in: self.pillar_channels * self.frames_per_group(),
            c0: self.backbone_c0,
            c1: self.backbone_c1,
            c2: self.backbone_c2,
        }
    }

    pub fn trpn_head(&self) -> TrpnHeadConfig {
        TrpnHeadConfig {
            temporal_channels: self.temporal_channels,
            n_priors: 1,
            n_past: self.t - 1,
        }
    }

    pub fn anchor_priors(&self) -> Vec<AnchorPrior> {
        vec![AnchorPrior { w: self.anchor_w, l: self.anchor_l, h: 0.0 }]
    }

    pub fn assigner(&self) -> AssignerConfig {
        AssignerConfig { th_pos: self.th_pos, th_neg: self.th_neg }
    }

    pub fn proposals(&self) -> ProposalConfig {
        ProposalConfig {
            pre_nms_top_k: self.pre_nms_top_k,
            post_nms_top_k: self.post_nms_top_k,
            nms_iou: self.proposal_nms_iou,
        }
    }

    pub fn sti(&self) -> StiConfig {
        StiConfig {
            s: self.roi_s,
            d_c: self.d_c,
            d_path: self.d_path,
            d_att: self.d_att,
            d_g: self.d_g,
            use_history_path: self.use_history_path,
            use_interaction: self.use_interaction,
        }
    }

    pub fn first_stage_weights(&self) -> LossWeights {
        LossWeights { cls: self.loss_cls, cur_reg: self.loss_cur, past_reg: self.loss_past }
    }

    pub fn second_stage_weights(&self) -> LossWeights {
        LossWeights { cls: self.loss2_cls, cur_reg: self.loss2_cur, past_reg: self.loss2_future }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }

    pub fn standing_box_mode(&self) -> crate::geometry::StandingBoxMode {
        match self.standing_box {
            StandingBoxKey::Snap => crate::geometry::StandingBoxMode::Snap,
            StandingBoxKey::Aabb => crate::geometry::StandingBoxMode::Aabb,
        }
    }
}
