use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GapDirection, GapMeasure};

/// Which training procedure to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Coupled soft/hard training with decoupled bidirectional distillation.
    #[default]
    S2h,
    /// Masks from the soft loss, weights from the hard network's own loss.
    Alt1,
    /// Masks from the soft loss, weights from the original network's loss
    /// plus distillation of the hard network from the original one.
    Alt2,
    /// Soft network only; the hard network is never trained directly.
    SoftOnly,
    /// `S2h` continued from a checkpoint at a reduced learning rate.
    Finetune,
}

/// Per-term switches for the gradient bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientToggles {
    /// Task loss through the soft network into the weights.
    pub g_l_theta: bool,
    /// Gap through the hard network into the weights.
    pub g_g_hard_theta: bool,
    /// Gap through the soft network into the weights. Off by default: it
    /// pulls the soft network toward the weaker hard one.
    pub g_g_soft_theta: bool,
    /// Task loss through the soft network into the mask logits.
    pub g_l_u: bool,
    /// Gap through the soft network into the mask logits.
    pub g_g_u: bool,
    /// Resource penalty into the mask logits.
    pub g_r_u: bool,
}

impl Default for GradientToggles {
    fn default() -> Self {
        GradientToggles {
            g_l_theta: true,
            g_g_hard_theta: true,
            g_g_soft_theta: false,
            g_l_u: true,
            g_g_u: true,
            g_r_u: true,
        }
    }
}

/// Which norm the summed performance gradients are scaled to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceReference {
    /// `||g_R||`
    #[default]
    Raw,
    /// `||rho * g_R||`
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// One norm over all mask logits.
    #[default]
    Global,
    /// Each group balanced on its own.
    PerGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    /// When off, the mask gradient is `beta g_L + alpha beta g_R + gamma g_G`.
    pub enabled: bool,
    pub reference: BalanceReference,
    pub scope: NormScope,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            enabled: true,
            reference: BalanceReference::Raw,
            scope: NormScope::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mask_weight_decay: f64,
    /// Multiplier on `lr` for the mask logits.
    pub mask_lr_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            mask_weight_decay: 0.0,
            mask_lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    #[default]
    Cosine,
    /// Past milestone `i` (a fraction of the run) the rate is
    /// `base * factors[i]`.
    Step { milestones: Vec<f64>, factors: Vec<f64> },
    Constant,
}

fn default_t() -> f64 {
    0.5
}
fn default_beta() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    5.0
}
fn default_rho() -> f64 {
    5.0
}
fn default_alpha() -> f64 {
    1.0
}
fn default_alt1_smoothing() -> f64 {
    0.1
}
fn default_temperature() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    64
}
fn default_finetune_lr_scale() -> f64 {
    0.1
}

/// Everything that controls one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneRunConfig {
    #[serde(default)]
    pub mode: RunMode,
    /// Target FLOPs ratio in `(0, 1]`.
    #[serde(rename = "T")]
    pub target: f64,
    /// Weight of the soft task-loss gradient on the weights.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Weight of the gap gradients on the weights.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Weight of the resource gradient on the mask logits.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Resource weight used only when balancing is disabled.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub toggles: GradientToggles,
    /// Smoothing of the soft task loss (and of the weight losses in `alt2`).
    #[serde(default)]
    pub label_smoothing: f64,
    /// Smoothing of the hard task loss in `alt1`.
    #[serde(default = "default_alt1_smoothing")]
    pub alt1_smoothing: f64,
    #[serde(default)]
    pub gap_direction: GapDirection,
    #[serde(default = "default_temperature")]
    pub gap_temperature: f64,
    #[serde(default)]
    pub balance: BalanceConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Learning-rate multiplier in `finetune` mode.
    #[serde(default = "default_finetune_lr_scale")]
    pub finetune_lr_scale: f64,
}

impl Default for PruneRunConfig {
    fn default() -> Self {
        PruneRunConfig {
            mode: RunMode::S2h,
            target: default_t(),
            beta: default_beta(),
            gamma: default_gamma(),
            rho: default_rho(),
            alpha: default_alpha(),
            toggles: GradientToggles::default(),
            label_smoothing: 0.0,
            alt1_smoothing: default_alt1_smoothing(),
            gap_direction: GapDirection::SoftTeacher,
            gap_temperature: default_temperature(),
            balance: BalanceConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::Cosine,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            finetune_lr_scale: default_finetune_lr_scale(),
        }
    }
}

fn check(ok: bool, path: &str, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(path, message()))
    }
}

impl PruneRunConfig {
    pub fn gap_measure(&self) -> GapMeasure {
        GapMeasure {
            direction: self.gap_direction,
            temperature: self.gap_temperature,
        }
    }

    /// Range and cross-field checks. Error paths are relative to this
    /// struct (e.g. `T`, `optimizer.lr`).
    pub fn validate(&self) -> Result<()> {
        let t = self.target;
        check(t > 0.0 && t <= 1.0, "T", || format!("must lie in (0, 1], got {t}"))?;
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("rho", self.rho),
            ("alpha", self.alpha),
        ] {
            check(v >= 0.0 && v.is_finite(), name, || format!("must be finite and >= 0, got {v}"))?;
        }
        for (name, v) in [
            ("label_smoothing", self.label_smoothing),
            ("alt1_smoothing", self.alt1_smoothing),
        ] {
            check((0.0..1.0).contains(&v), name, || format!("must lie in [0, 1), got {v}"))?;
        }
        let tau = self.gap_temperature;
        check(tau > 0.0 && tau.is_finite(), "gap_temperature", || format!("must be > 0, got {tau}"))?;
        let o = &self.optimizer;
        check(o.lr > 0.0 && o.lr.is_finite(), "optimizer.lr", || format!("must be > 0, got {}", o.lr))?;
        check((0.0..1.0).contains(&o.momentum), "optimizer.momentum", || {
            format!("must lie in [0, 1), got {}", o.momentum)
        })?;
        for (name, v) in [
            ("optimizer.weight_decay", o.weight_decay),
            ("optimizer.mask_weight_decay", o.mask_weight_decay),
        ] {
            check(v >= 0.0 && v.is_finite(), name, || format!("must be finite and >= 0, got {v}"))?;
        }
        check(o.mask_lr_scale >= 0.0 && o.mask_lr_scale.is_finite(), "optimizer.mask_lr_scale", || {
            format!("must be finite and >= 0, got {}", o.mask_lr_scale)
        })?;
        validate_schedule(&self.schedule)?;
        check(self.epochs >= 1, "epochs", || "must be at least 1".into())?;
        check(self.batch_size >= 1, "batch_size", || "must be at least 1".into())?;
        let s = self.finetune_lr_scale;
        check(s > 0.0 && s.is_finite(), "finetune_lr_scale", || format!("must be > 0, got {s}"))?;
        Ok(())
    }
}

pub(crate) fn validate_schedule(s: &ScheduleConfig) -> Result<()> {
    if let ScheduleConfig::Step { milestones, factors } = s {
        check(milestones.len() == factors.len(), "schedule.factors", || {
            format!("{} factors for {} milestones", factors.len(), milestones.len())
        })?;
        check(
            milestones.iter().all(|&m| m > 0.0 && m < 1.0) && milestones.windows(2).all(|w| w[0] < w[1]),
            "schedule.milestones",
            || format!("must be strictly increasing fractions in (0, 1), got {milestones:?}"),
        )?;
        check(
            factors.iter().all(|&f| f > 0.0 && f.is_finite()),
            "schedule.factors",
            || format!("must be positive, got {factors:?}"),
        )?;
    }
    Ok(())
}
