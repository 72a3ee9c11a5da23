//! Run configuration.
//!
//! One JSON document drives every stage. Unknown keys are rejected so a
//! typo cannot silently fall back to a default.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub tile_size_m: f64,
    pub overlap_m: f64,
    pub min_spacing_m: f64,
    pub pearson_threshold: f64,
    pub n_severity_classes: usize,
    pub sampling: SamplingConfig,
    pub gbt: GbtConfig,
    pub mvg: MvgTrainConfig,
    pub gate: GateTrainConfig,
    pub geodetector: GeoDetectorConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            tile_size_m: 15_000.0,
            overlap_m: 1_500.0,
            min_spacing_m: 100.0,
            pearson_threshold: 0.8,
            n_severity_classes: 5,
            sampling: SamplingConfig::default(),
            gbt: GbtConfig::default(),
            mvg: MvgTrainConfig::default(),
            gate: GateTrainConfig::default(),
            geodetector: GeoDetectorConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tile_size_m > 0.0) {
            return Err(Error::Validation("tile_size_m must be > 0".into()));
        }
        if !(self.overlap_m >= 0.0 && self.overlap_m < self.tile_size_m / 2.0) {
            return Err(Error::Validation(format!(
                "overlap_m {} must satisfy 0 <= overlap < tile_size/2 = {}",
                self.overlap_m,
                self.tile_size_m / 2.0
            )));
        }
        if self.n_severity_classes < 2 {
            return Err(Error::Validation("n_severity_classes must be >= 2".into()));
        }
        if !(self.pearson_threshold > 0.0 && self.pearson_threshold < 1.0) {
            return Err(Error::Validation(
                "pearson_threshold must lie in (0,1)".into(),
            ));
        }
        if !(self.min_spacing_m >= 0.0) {
            return Err(Error::Validation("min_spacing_m must be >= 0".into()));
        }
        self.sampling.validate()?;
        self.gbt.validate()?;
        self.mvg.validate()?;
        self.gate.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Augmentation target as a multiple of the raw inventory size.
    pub augment_factor: f64,
    /// Negative sample count as a multiple of the augmented positive count.
    pub negative_ratio: f64,
    /// OC-SVM dual fraction parameter.
    pub ocsvm_nu: f64,
    /// RBF width; None selects the median heuristic at fit time.
    pub ocsvm_gamma: Option<f64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            augment_factor: 2.0,
            negative_ratio: 1.0,
            ocsvm_nu: 0.1,
            ocsvm_gamma: None,
        }
    }
}

impl SamplingConfig {
    fn validate(&self) -> Result<()> {
        if !(self.augment_factor >= 1.0) {
            return Err(Error::Validation("augment_factor must be >= 1".into()));
        }
        if !(self.negative_ratio > 0.0) {
            return Err(Error::Validation("negative_ratio must be > 0".into()));
        }
        if !(self.ocsvm_nu > 0.0 && self.ocsvm_nu <= 1.0) {
            return Err(Error::Validation("ocsvm_nu must lie in (0,1]".into()));
        }
        Ok(())
    }
}

/// Gradient-boosted tree hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtHyperparams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub colsample: f64,
    pub min_child_weight: f64,
    pub l2_lambda: f64,
    pub scale_pos_weight: f64,
}

impl Default for GbtHyperparams {
    fn default() -> Self {
        GbtHyperparams {
            n_trees: 200,
            max_depth: 4,
            learning_rate: 0.1,
            subsample: 1.0,
            colsample: 1.0,
            min_child_weight: 1.0,
            l2_lambda: 1.0,
            scale_pos_weight: 1.0,
        }
    }
}

impl GbtHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Validation("n_trees must be >= 1".into()));
        }
        if self.max_depth == 0 {
            return Err(Error::Validation("max_depth must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be > 0".into()));
        }
        for (name, v) in [("subsample", self.subsample), ("colsample", self.colsample)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Validation(format!("{name} must lie in (0,1]")));
            }
        }
        if !(self.min_child_weight >= 0.0) {
            return Err(Error::Validation("min_child_weight must be >= 0".into()));
        }
        if !(self.l2_lambda >= 0.0) {
            return Err(Error::Validation("l2_lambda must be >= 0".into()));
        }
        if !(self.scale_pos_weight > 0.0) {
            return Err(Error::Validation("scale_pos_weight must be > 0".into()));
        }
        Ok(())
    }
}

/// Randomized-search space for the tree models. `scale_pos_weight_auto`
/// adds the negative:positive class ratio as an extra candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtSearchSpace {
    pub n_trees: Vec<usize>,
    pub max_depth: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub subsample: Vec<f64>,
    pub colsample: Vec<f64>,
    pub scale_pos_weight: Vec<f64>,
    pub scale_pos_weight_auto: bool,
}

impl Default for GbtSearchSpace {
    fn default() -> Self {
        GbtSearchSpace {
            n_trees: vec![100, 200, 400],
            max_depth: vec![3, 4, 6],
            learning_rate: vec![0.05, 0.1, 0.2],
            subsample: vec![0.7, 1.0],
            colsample: vec![0.7, 1.0],
            scale_pos_weight: vec![1.0],
            scale_pos_weight_auto: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtConfig {
    pub defaults: GbtHyperparams,
    pub search: GbtSearchSpace,
    /// Randomized-search draws; 0 disables the search and uses `defaults`.
    pub cv_iters: usize,
    pub cv_folds: usize,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            defaults: GbtHyperparams::default(),
            search: GbtSearchSpace::default(),
            cv_iters: 20,
            cv_folds: 3,
        }
    }
}

impl GbtConfig {
    fn validate(&self) -> Result<()> {
        self.defaults.validate()?;
        if self.cv_iters > 0 && self.cv_folds < 2 {
            return Err(Error::Validation("cv_folds must be >= 2".into()));
        }
        Ok(())
    }
}

/// Early-fusion network training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MvgTrainConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub gaussian_noise_std: f64,
    pub dropout: f64,
}

impl Default for MvgTrainConfig {
    fn default() -> Self {
        MvgTrainConfig {
            hidden: vec![256, 128, 64],
            lr: 1e-4,
            batch: 256,
            max_epochs: 100,
            patience: 10,
            gaussian_noise_std: 0.01,
            dropout: 0.10,
        }
    }
}

impl MvgTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Validation("hidden widths must be positive".into()));
        }
        if !(self.lr > 0.0) || self.batch == 0 || self.max_epochs == 0 {
            return Err(Error::Validation(
                "lr, batch, and max_epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation("dropout must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Gating-network training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub label_smoothing: f64,
}

impl Default for GateTrainConfig {
    fn default() -> Self {
        GateTrainConfig {
            lr: 1e-3,
            batch: 256,
            max_epochs: 200,
            patience: 10,
            label_smoothing: 0.05,
        }
    }
}

impl GateTrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.max_epochs == 0 {
            return Err(Error::Validation(
                "lr, batch, and max_epochs must be positive".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Validation(
                "label_smoothing must lie in [0,0.5)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeoDetectorConfig {
    pub strata: usize,
    pub top_k: usize,
    pub cell_sample_cap: usize,
    pub categorical_factors: Vec<String>,
    /// Models analyzed; GeoDetector runs only on MoE output by default.
    pub models: Vec<String>,
}

impl Default for GeoDetectorConfig {
    fn default() -> Self {
        GeoDetectorConfig {
            strata: 5,
            top_k: 5,
            cell_sample_cap: 50_000,
            categorical_factors: Vec::new(),
            models: vec!["moe".into()],
        }
    }
}

/// Synthetic study-area parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub extent_m: f64,
    pub cellsize_m: f64,
    pub n_zones: usize,
    pub n_factors: usize,
    pub n_inventory: usize,
    pub rho_star: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            extent_m: 60_000.0,
            cellsize_m: 100.0,
            n_zones: 4,
            n_factors: 8,
            n_inventory: 1_000,
            rho_star: -0.35,
            noise_std: 0.3,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if !(self.extent_m > 0.0 && self.cellsize_m > 0.0) {
            return Err(Error::Validation("extent and cellsize must be > 0".into()));
        }
        if self.n_zones == 0 {
            return Err(Error::Validation("n_zones must be >= 1".into()));
        }
        if self.rho_star.abs() >= 1.0 {
            return Err(Error::Validation("|rho_star| must be < 1".into()));
        }
        if self.n_factors < 2 {
            return Err(Error::Validation("n_factors must be >= 2".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let text = r#"{"seed": 1, "tile_sizem": 5}"#;
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_str(text);
        assert!(parsed.is_err());
    }

    #[test]
    fn overlap_bound_enforced() {
        let mut cfg = RunConfig::default();
        cfg.overlap_m = cfg.tile_size_m / 2.0;
        assert!(cfg.validate().is_err());
    }
}
