//! Losses, Adam, the learning-rate schedule, density control and the training loop.

mod adam;
mod density;
mod loss;
mod model;
mod trainer;

pub use adam::Adam;
pub use density::{plan_density, DensityPlan, DensityState};
pub use loss::{photometric_loss, regularizers, total_loss, LossTerms, LossWeights};
pub use model::{Baked, FieldModel, FreeModel, Model, SplatVars, Stage};
pub use trainer::{EvalReport, LogRow, StepStats, Trainer};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::fields::FieldConfig;
use crate::flow::FlowConfig;
use crate::raster::RasterConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Free3dgs,
    Free3dgsMoran,
    Splatfields3d,
    Splatfields4d,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Free3dgs, Mode::Free3dgsMoran, Mode::Splatfields3d, Mode::Splatfields4d];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Free3dgs => "free_3dgs",
            Mode::Free3dgsMoran => "free_3dgs_moran",
            Mode::Splatfields3d => "splatfields3d",
            Mode::Splatfields4d => "splatfields4d",
        }
    }

    /// Splat attributes are optimized directly rather than predicted.
    pub fn is_free(self) -> bool {
        matches!(self, Mode::Free3dgs | Mode::Free3dgsMoran)
    }

    pub fn is_dynamic(self) -> bool {
        self == Mode::Splatfields4d
    }
}

impl FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown mode `{s}`")))
    }
}

/// Exponential decay from `start` to `end` at `end_iteration`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub end_iteration: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { start: 8e-4, end: 1.6e-6, end_iteration: 40_000 }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration >= self.end_iteration {
            return self.end;
        }
        let f = iteration as f64 / self.end_iteration as f64;
        self.start * (self.end / self.start).powf(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-15 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub enabled: bool,
    /// Iterations between prune/clone events.
    pub interval: usize,
    /// No events after this iteration; 0 keeps density control on throughout.
    pub stop: usize,
    pub prune_opacity: f64,
    /// Averaged positional-gradient norm above which a splat is cloned.
    pub clone_gradient: f64,
    pub max_splats: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            enabled: true,
            interval: 500,
            stop: 0,
            prune_opacity: 0.005,
            clone_gradient: 2e-4,
            max_splats: 20_000,
        }
    }
}

/// Per-attribute Adam step sizes of the free-splat modes. The position rate
/// follows the shape of the global schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreeLearningRates {
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for FreeLearningRates {
    fn default() -> Self {
        FreeLearningRates { position: 1.6e-4, log_scale: 5e-3, rotation: 1e-3, opacity: 5e-2, color: 2.5e-3 }
    }
}

/// Loss weights. `None` picks the mode's default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// D-SSIM share of the photometric term.
    pub ssim_weight: f64,
    pub mask_weight: f64,
    /// Splat-norm weight; 0.01 for static SplatFields, 0 otherwise.
    pub norm_weight: Option<f64>,
    /// Moran weight; 0.01 for `free_3dgs_moran`, 0 otherwise.
    pub moran_weight: Option<f64>,
    pub moran_neighbors: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { ssim_weight: 0.2, mask_weight: 0.1, norm_weight: None, moran_weight: None, moran_neighbors: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub iterations: usize,
    /// Views per step; `None` gives 5 for dynamic scenes and 1 otherwise.
    pub batch: Option<usize>,
    pub seed: u64,
    /// Iterations between evaluations; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub density: DensityConfig,
    pub loss: LossConfig,
    pub free_lr: FreeLearningRates,
    pub field: FieldConfig,
    pub flow: FlowConfig,
    /// ResField rank of every time-conditioned layer (dynamic mode only).
    pub resfield_rank: usize,
    pub raster: RasterConfig,
    /// Overrides the scene's background color.
    pub background: Option<[f64; 3]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Free3dgs,
            iterations: 2000,
            batch: None,
            seed: 0,
            eval_interval: 500,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            density: DensityConfig::default(),
            loss: LossConfig::default(),
            free_lr: FreeLearningRates::default(),
            field: FieldConfig::default(),
            flow: FlowConfig::default(),
            resfield_rank: 10,
            raster: RasterConfig::default(),
            background: None,
        }
    }
}

impl TrainConfig {
    pub fn for_mode(mode: Mode) -> Self {
        TrainConfig { mode, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: String| Err(crate::Error::Config(m));
        let s = &self.schedule;
        if !(s.start > s.end && s.end > 0.0) || s.end_iteration == 0 {
            return bad(format!("learning rates need start > end > 0 (got {} and {})", s.start, s.end));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch == Some(0) {
            return bad("batch must be at least 1".into());
        }
        let w = self.weights();
        if [w.ssim, w.mask, w.norm, w.moran].iter().any(|v| !(*v >= 0.0)) || w.ssim > 1.0 {
            return bad("loss weights must be non-negative with the D-SSIM share at most 1".into());
        }
        if w.moran > 0.0 && w.moran_neighbors < 2 {
            return bad("Moran loss needs at least 2 neighbors".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("Adam needs betas in [0, 1) and a positive epsilon".into());
        }
        if self.density.enabled && self.density.interval == 0 {
            return bad("density control interval must be at least 1".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        let l = &self.loss;
        LossWeights {
            ssim: l.ssim_weight,
            mask: l.mask_weight,
            norm: l.norm_weight.unwrap_or(if self.mode == Mode::Splatfields3d { 0.01 } else { 0.0 }),
            moran: l.moran_weight.unwrap_or(if self.mode == Mode::Free3dgsMoran { 0.01 } else { 0.0 }),
            moran_neighbors: l.moran_neighbors,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch.unwrap_or(if self.mode.is_dynamic() { 5 } else { 1 })
    }

    /// Field settings with the time conditioning implied by the mode.
    pub fn field_config(&self, time_steps: Option<usize>) -> FieldConfig {
        let mut f = self.field.clone();
        if self.mode.is_dynamic() {
            f.time_steps = time_steps;
            f.resfield_rank = self.resfield_rank;
        } else {
            f.time_steps = None;
            f.resfield_rank = 0;
        }
        f
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig { resfield_rank: self.resfield_rank, ..self.flow.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 8e-4);
        assert_eq!(s.lr_at(40_000), 1.6e-6);
        assert_eq!(s.lr_at(90_000), 1.6e-6);
        let mid = (8e-4f64 * 1.6e-6).sqrt();
        assert!((s.lr_at(20_000) - mid).abs() < 1e-12);
        assert!((mid - 3.5777e-5).abs() < 1e-9);
    }

    #[test]
    fn schedule_is_monotone() {
        let s = LrSchedule::default();
        let lrs: Vec<f64> = (0..=40).map(|i| s.lr_at(i * 1000)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn mode_defaults_for_weights() {
        let w = TrainConfig::for_mode(Mode::Splatfields3d).weights();
        assert_eq!((w.ssim, w.mask, w.norm, w.moran), (0.2, 0.1, 0.01, 0.0));
        let w = TrainConfig::for_mode(Mode::Free3dgsMoran).weights();
        assert_eq!((w.norm, w.moran), (0.0, 0.01));
        assert_eq!(TrainConfig::for_mode(Mode::Splatfields4d).batch_size(), 5);
        assert_eq!(TrainConfig::for_mode(Mode::Free3dgs).batch_size(), 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.schedule.end = 1e-3;
        assert!(c.validate().is_err());
        let c = TrainConfig { iterations: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.loss.ssim_weight = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.loss.moran_weight = Some(-1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("gs".parse::<Mode>().is_err());
    }

    #[test]
    fn config_survives_toml_layering() {
        let file = "mode = \"splatfields4d\"\nresfield_rank = 4\n[flow]\nvariant = \"dct\"\n";
        let c: TrainConfig = crate::io::layered_config(&TrainConfig::default(), Some(file), &[]).unwrap();
        assert_eq!(c.mode, Mode::Splatfields4d);
        assert_eq!(c.flow_config().resfield_rank, 4);
        assert_eq!(c.flow.variant, crate::flow::FlowVariant::Dct);
        assert_eq!(c.field_config(Some(7)).time_steps, Some(7));
        let back: TrainConfig = crate::io::layered_config(&c, None, &[]).unwrap();
        assert_eq!(back, c);
    }
}
