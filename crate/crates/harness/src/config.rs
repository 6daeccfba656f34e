//! Run configuration, parsed strictly from TOML.

use std::path::{Path, PathBuf};

use matchsearch::bcm::{GateMode, NoiseMode};
use matchsearch::desk::{AttributeRates, DataConfig, GateSettings, GridSpec, RetrainConfig, SearchConfig};
use matchsearch::{OperatorConfig, OperatorKind};
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

/// Spatial grid sizes; channels live in [`RunConfig::c`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub hz: usize,
    pub wz: usize,
    pub hx: usize,
    pub wx: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            hz: 8,
            wz: 8,
            hx: 16,
            wx: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub n_sequences: usize,
    pub pairs_per_sequence: usize,
    /// Fraction of sequences used for training; the rest validate.
    pub split_ratio: f64,
    pub grid: Grid,
    pub c: usize,
    /// Operators in the search space.
    pub operators: Vec<OperatorKind>,
    pub attribute_rates: AttributeRates,

    pub epochs_search: usize,
    /// Inner step ε at the start of search.
    pub lr_theta: f64,
    pub lr_theta_final: f64,
    pub lr_w: f64,
    pub tau: f64,
    pub gate_mode: GateMode,
    pub noise_mode: NoiseMode,

    pub epochs_retrain: usize,
    pub lr_retrain: f64,
    pub lr_retrain_final: f64,
    pub warmup_epochs: usize,
    pub clip_norm: f64,

    pub batch_size: usize,
    pub lambda: f64,
    pub heads: usize,
    pub normalize_affinity: bool,
    pub mean_pooling: bool,

    /// Not echoed into artifacts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let search = SearchConfig::default();
        let retrain = RetrainConfig::default();
        let ops = OperatorConfig::default();
        Self {
            seed: 0,
            n_sequences: 200,
            pairs_per_sequence: 8,
            split_ratio: 0.8,
            grid: Grid::default(),
            c: 16,
            operators: OperatorKind::ALL.to_vec(),
            attribute_rates: AttributeRates::uniform(0.15),
            epochs_search: search.epochs,
            lr_theta: search.lr_theta,
            lr_theta_final: search.lr_theta_final,
            lr_w: search.lr_w,
            tau: 1.0,
            gate_mode: GateMode::Soft,
            noise_mode: NoiseMode::Zero,
            epochs_retrain: retrain.epochs,
            lr_retrain: retrain.lr,
            lr_retrain_final: retrain.lr_final,
            warmup_epochs: retrain.warmup_epochs,
            clip_norm: retrain.clip_norm,
            batch_size: search.batch_size,
            lambda: 1.0,
            heads: ops.heads,
            normalize_affinity: ops.normalize_affinity,
            mean_pooling: ops.mean_pooling,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.attribute_rates
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.grid_spec()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.n_sequences < 2 || self.pairs_per_sequence == 0 {
            return bad("need at least 2 sequences and 1 pair per sequence".into());
        }
        if self.operators.is_empty() {
            return bad("operator set is empty".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.heads == 0 || self.c % self.heads != 0 {
            return bad(format!("{} channels not divisible by {} heads", self.c, self.heads));
        }
        for (name, v) in [
            ("lr_theta", self.lr_theta),
            ("lr_theta_final", self.lr_theta_final),
            ("lr_w", self.lr_w),
            ("lr_retrain", self.lr_retrain),
            ("lr_retrain_final", self.lr_retrain_final),
            ("clip_norm", self.clip_norm),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            hz: self.grid.hz,
            wz: self.grid.wz,
            hx: self.grid.hx,
            wx: self.grid.wx,
            c: self.c,
        }
    }

    pub fn data(&self) -> DataConfig {
        DataConfig {
            seed: self.seed,
            n_sequences: self.n_sequences,
            pairs_per_sequence: self.pairs_per_sequence,
            grid: self.grid_spec(),
            rates: self.attribute_rates,
        }
    }

    pub fn operator_config(&self) -> OperatorConfig {
        OperatorConfig {
            heads: self.heads,
            normalize_affinity: self.normalize_affinity,
            mean_pooling: self.mean_pooling,
        }
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            epochs: self.epochs_search,
            batch_size: self.batch_size,
            lr_theta: self.lr_theta,
            lr_theta_final: self.lr_theta_final,
            lr_w: self.lr_w,
            clip_norm: self.clip_norm,
            lambda: self.lambda,
            gate: GateSettings {
                tau: self.tau,
                mode: self.gate_mode,
                noise: self.noise_mode,
            },
            operators: self.operator_config(),
            kinds: self.operators.clone(),
            seed: self.seed,
        }
    }

    pub fn retrain(&self) -> RetrainConfig {
        RetrainConfig {
            epochs: self.epochs_retrain,
            batch_size: self.batch_size,
            lr: self.lr_retrain,
            lr_final: self.lr_retrain_final,
            warmup_epochs: self.warmup_epochs,
            clip_norm: self.clip_norm,
            lambda: self.lambda,
            operators: self.operator_config(),
            seed: self.seed,
            ..RetrainConfig::default()
        }
    }

    /// Config as recorded in artifacts: everything but the output path.
    pub fn echo(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.output_dir = None;
        serde_json::to_value(c).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.noise_mode = NoiseMode::Sampled { seed: 3 };
        cfg.operators = vec![OperatorKind::Film, OperatorKind::Concat];
        cfg.output_dir = Some("runs/x".into());
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("seed = 1\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::parse("[grid]\nhz = 2\nwz = 2\nhx = 4\nwx = 4\nhc = 1\n").is_err());
        assert!(RunConfig::parse("seed = 4\n").unwrap().seed == 4);
    }

    #[test]
    fn invariants_checked() {
        assert!(RunConfig::parse("split_ratio = 1.0\n").is_err());
        assert!(RunConfig::parse("tau = 0.0\n").is_err());
        assert!(RunConfig::parse("[attribute_rates]\nscale_variation = 1.5\nocclusion = 0\nblur = 0\ndistractor = 0\nbackground_clutter = 0\nlow_contrast = 0\n").is_err());
        assert!(RunConfig::parse("operators = []\n").is_err());
        assert!(RunConfig::parse("operators = [\"xcorr\"]\n").is_err());
    }
}
