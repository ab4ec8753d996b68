//! Training configuration: defaults, validation, and the flat key/value
//! text format shared by config files and run manifests.

use crate::error::{Error, Result};
use crate::networks::NetConfig;
use crate::objectives::LossVariant;
use serde::{Deserialize, Serialize};

/// How per-tap contrastive losses combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapReduction {
    /// Loss per tap, averaged over taps (each tap is its own negative pool).
    Mean,
    /// One pooled loss over all M rows across taps.
    Pooled,
}

impl std::fmt::Display for TapReduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TapReduction::Mean => write!(f, "mean"),
            TapReduction::Pooled => write!(f, "pooled"),
        }
    }
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epoch at which linear lr decay begins.
    pub decay_start: usize,
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub crop: usize,
    /// Patch count M shared by the anchor and positive sets.
    pub m_patches: usize,
    pub tau: f64,
    pub lambda_gp: f64,
    pub loss_variant: LossVariant,
    /// Train against the real-IHC positive set as well as the H&E one.
    pub use_gt_branch: bool,
    pub seed: u64,
    pub net: NetConfig,
    pub gp_levels: usize,
    pub gp_weights: Vec<f64>,
    pub tap_reduction: TapReduction,
    /// Ablation flag: let gradients flow through the ground-truth positive
    /// branch instead of treating it as constant.
    pub gt_branch_gradient: bool,
    /// Stop after this many iterations regardless of epoch, if set.
    pub max_iters: Option<u64>,
    /// Epoch interval between checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    /// Full-scale defaults: 40 epochs with decay from 30, lr 2e-4, Adam
    /// betas (0.5, 0.999), 512 crops, M = 256 patches, lambda_GP = 10.
    fn default() -> Self {
        Self {
            epochs: 40,
            decay_start: 30,
            lr0: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            crop: 512,
            m_patches: 256,
            tau: 0.07,
            lambda_gp: 10.0,
            loss_variant: LossVariant::MixDomain,
            use_gt_branch: true,
            seed: 0,
            net: NetConfig::default(),
            gp_levels: 4,
            gp_weights: vec![1.0, 2.0, 4.0, 8.0],
            tap_reduction: TapReduction::Mean,
            gt_branch_gradient: false,
            max_iters: None,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: 64 crops on a width-32, 3-block generator. Same
    /// training hyperparameters as the full-scale defaults.
    pub fn desk() -> Self {
        Self {
            crop: 64,
            net: NetConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.decay_start == 0 || self.decay_start > self.epochs {
            return Err(Error::ConfigError(format!(
                "decay_start must satisfy 0 < decay_start <= epochs ({} vs {})",
                self.decay_start, self.epochs
            )));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::ConfigError("lr0 must be positive".into()));
        }
        if self.m_patches < 1 {
            return Err(Error::ConfigError("m_patches must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::ConfigError("tau must be positive".into()));
        }
        if self.lambda_gp < 0.0 {
            return Err(Error::ConfigError("lambda_gp must be >= 0".into()));
        }
        if self.gp_weights.len() != self.gp_levels {
            return Err(Error::ConfigError(format!(
                "{} gp_weights for {} gp_levels",
                self.gp_weights.len(),
                self.gp_levels
            )));
        }
        if self.crop % 4 != 0 {
            return Err(Error::ConfigError(
                "crop must be divisible by the encoder downsampling factor 4".into(),
            ));
        }
        let div = 1usize << (self.gp_levels - 1);
        if self.crop % div != 0 {
            return Err(Error::ConfigError(format!(
                "crop {} not divisible by 2^{} required by gp_levels",
                self.crop,
                self.gp_levels - 1
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::ConfigError("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    /// The valid config keys, in serialization order.
    pub const KEYS: [&'static str; 24] = [
        "epochs",
        "decay_start",
        "lr0",
        "adam_beta1",
        "adam_beta2",
        "crop",
        "m_patches",
        "tau",
        "lambda_gp",
        "loss_variant",
        "use_gt_branch",
        "seed",
        "base_width",
        "n_res_blocks",
        "disc_width",
        "disc_layers",
        "embed_dim",
        "proj_hidden",
        "gp_levels",
        "gp_weights",
        "tap_reduction",
        "gt_branch_gradient",
        "max_iters",
        "checkpoint_every",
    ];

    /// Apply one `key = value` override.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>()
                .map_err(|e| Error::ConfigError(format!("bad value for `{key}`: {e}")))
        }
        let v = value.trim();
        match key {
            "epochs" => self.epochs = parse(key, v)?,
            "decay_start" => self.decay_start = parse(key, v)?,
            "lr0" => self.lr0 = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "crop" => self.crop = parse(key, v)?,
            "m_patches" => self.m_patches = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lambda_gp" => self.lambda_gp = parse(key, v)?,
            "loss_variant" => {
                self.loss_variant = match v {
                    "nce" | "patch_nce" => LossVariant::PatchNce,
                    "mix" | "mix_domain" => LossVariant::MixDomain,
                    other => {
                        return Err(Error::ConfigError(format!(
                            "loss_variant must be `nce` or `mix`, got `{other}`"
                        )))
                    }
                }
            }
            "use_gt_branch" => self.use_gt_branch = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "base_width" => self.net.base_width = parse(key, v)?,
            "n_res_blocks" => self.net.n_res_blocks = parse(key, v)?,
            "disc_width" => self.net.disc_width = parse(key, v)?,
            "disc_layers" => self.net.disc_layers = parse(key, v)?,
            "embed_dim" => self.net.embed_dim = parse(key, v)?,
            "proj_hidden" => self.net.proj_hidden = parse(key, v)?,
            "gp_levels" => self.gp_levels = parse(key, v)?,
            "gp_weights" => {
                let ws: Result<Vec<f64>> = v
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::ConfigError(format!("bad gp_weights entry: {e}")))
                    })
                    .collect();
                self.gp_weights = ws?;
            }
            "tap_reduction" => {
                self.tap_reduction = match v {
                    "mean" => TapReduction::Mean,
                    "pooled" => TapReduction::Pooled,
                    other => {
                        return Err(Error::ConfigError(format!(
                            "tap_reduction must be `mean` or `pooled`, got `{other}`"
                        )))
                    }
                }
            }
            "gt_branch_gradient" => self.gt_branch_gradient = parse(key, v)?,
            "max_iters" => {
                let n: u64 = parse(key, v)?;
                self.max_iters = if n == 0 { None } else { Some(n) };
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            unknown => {
                return Err(Error::ConfigError(format!(
                    "unknown config key `{unknown}`; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parse a flat `key = value` config file body over this base config.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::ConfigError(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.apply_kv(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Serialize to the flat key/value format (diffable manifests).
    pub fn to_flat_text(&self) -> String {
        let gp_weights = self
            .gp_weights
            .iter()
            .map(|w| format!("{w}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "epochs = {}\n\
             decay_start = {}\n\
             lr0 = {}\n\
             adam_beta1 = {}\n\
             adam_beta2 = {}\n\
             crop = {}\n\
             m_patches = {}\n\
             tau = {}\n\
             lambda_gp = {}\n\
             loss_variant = {}\n\
             use_gt_branch = {}\n\
             seed = {}\n\
             base_width = {}\n\
             n_res_blocks = {}\n\
             disc_width = {}\n\
             disc_layers = {}\n\
             embed_dim = {}\n\
             proj_hidden = {}\n\
             gp_levels = {}\n\
             gp_weights = {}\n\
             tap_reduction = {}\n\
             gt_branch_gradient = {}\n\
             max_iters = {}\n\
             checkpoint_every = {}\n",
            self.epochs,
            self.decay_start,
            self.lr0,
            self.adam_beta1,
            self.adam_beta2,
            self.crop,
            self.m_patches,
            self.tau,
            self.lambda_gp,
            self.loss_variant,
            self.use_gt_branch,
            self.seed,
            self.net.base_width,
            self.net.n_res_blocks,
            self.net.disc_width,
            self.net.disc_layers,
            self.net.embed_dim,
            self.net.proj_hidden,
            self.gp_levels,
            gp_weights,
            self.tap_reduction,
            self.gt_branch_gradient,
            self.max_iters.unwrap_or(0),
            self.checkpoint_every,
        )
    }
}

/// Learning rate for a 0-based epoch: flat at `lr0` before `decay_start`,
/// then linear decay reaching exactly 0 at the final epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    debug_assert!(epoch < cfg.epochs, "epoch {epoch} outside schedule");
    if epoch < cfg.decay_start {
        cfg.lr0
    } else {
        let span = (cfg.epochs - cfg.decay_start) as f64;
        let step = (epoch - cfg.decay_start + 1) as f64;
        cfg.lr0 * (1.0 - step / span)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_flat_then_linear_to_zero() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 2e-4);
        assert_eq!(lr_schedule(29, &cfg), 2e-4);
        assert!((lr_schedule(34, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(39, &cfg) - 0.0).abs() < 1e-18);
        // non-increasing across the whole run
        let mut last = f64::INFINITY;
        for e in 0..cfg.epochs {
            let lr = lr_schedule(e, &cfg);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn flat_text_roundtrip() {
        let mut cfg = TrainConfig::desk();
        cfg.seed = 17;
        cfg.loss_variant = LossVariant::PatchNce;
        cfg.max_iters = Some(300);
        let text = cfg.to_flat_text();
        let mut back = TrainConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let mut cfg = TrainConfig::default();
        match cfg.apply_kv("learning_rate", "0.1") {
            Err(Error::ConfigError(msg)) => {
                assert!(msg.contains("unknown config key"));
                assert!(msg.contains("lr0"));
                assert!(msg.contains("tau"));
            }
            other => panic!("expected ConfigError, got {other:?}"),
        }
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut cfg = TrainConfig::desk();
        cfg.decay_start = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.decay_start = cfg.epochs + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.crop = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.gp_weights = vec![1.0];
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let mut cfg = TrainConfig::desk();
        cfg.apply_text("# a comment\n\n  seed = 9\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }
}
