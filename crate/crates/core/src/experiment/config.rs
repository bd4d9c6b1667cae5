use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, PretrainOptions};
use crate::error::{Error, Result};
use crate::learner::{AblationFlags, HsuConfig, LearnerConfig};
use crate::objectives::LossWeights;
use crate::optim::AdamConfig;
use crate::prompt::{MatchSource, PromptConfig};

/// Every knob of a run. Serialised as flat TOML; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub tasks: usize,
    pub chunk_size: usize,
    pub test_fraction: f64,

    /// PNG manifest for the continual classes; synthetic data when absent.
    pub manifest: Option<PathBuf>,
    /// PNG manifest for the pretraining classes (manifest mode only).
    pub base_manifest: Option<PathBuf>,
    pub cl_classes: usize,
    pub base_classes: usize,
    pub per_class: usize,
    pub base_per_class: usize,
    pub separation: f64,
    pub data_seed: u64,

    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub mlp_ratio: f64,
    /// Existing backbone checkpoint; pretrained in-process when absent.
    pub pretrained: Option<PathBuf>,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,

    pub prompt_length: usize,
    pub injected_layers: Option<Vec<usize>>,
    pub eps_a: f64,
    pub eps_b: f64,
    pub match_source: MatchSource,

    pub lambda_intra: f64,
    pub lambda_inter: f64,
    pub lambda_sim: f64,
    pub lambda_ort: f64,
    pub lambda_gen: Option<f64>,
    pub standardize_gen: bool,
    pub ort_squared: bool,

    pub lr: f64,
    pub lr_grid: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lthres: f64,
    pub t_max: u32,
    pub min_lr: f64,

    pub ablation: String,
    pub outdir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            tasks: 5,
            chunk_size: 10,
            test_fraction: 0.2,
            manifest: None,
            base_manifest: None,
            cl_classes: 20,
            base_classes: 4,
            per_class: 300,
            base_per_class: 150,
            separation: 3.0,
            data_seed: 7,
            layers: 4,
            heads: 4,
            dim: 64,
            patch_size: 4,
            image_side: 16,
            mlp_ratio: 2.0,
            pretrained: None,
            pretrain_epochs: 15,
            pretrain_lr: 1e-3,
            pretrain_batch: 16,
            prompt_length: 5,
            injected_layers: None,
            eps_a: 0.2,
            eps_b: 0.1,
            match_source: MatchSource::ClassFeature,
            lambda_intra: 1.0,
            lambda_inter: 0.01,
            lambda_sim: 1.0,
            lambda_ort: 1.0,
            lambda_gen: None,
            standardize_gen: true,
            ort_squared: false,
            lr: 0.01,
            lr_grid: vec![0.001, 0.005, 0.01, 0.05, 0.1],
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lthres: 0.8,
            t_max: 20,
            min_lr: 0.005,
            ablation: "full".into(),
            outdir: None,
        }
    }
}

/// A validated config plus the notes about defaults that were filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedConfig {
    pub config: ExperimentConfig,
    pub notes: Vec<String>,
}

/// Value used for λ5 when the config leaves it out; the method description
/// never pins it down.
pub const DEFAULT_LAMBDA_GEN: f64 = 1.0;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| crate::error::load_error(path, e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the TOML serialisation.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            patch_size: self.patch_size,
            image_side: self.image_side,
            mlp_ratio: self.mlp_ratio,
            channels: 3,
        }
    }

    pub fn injected(&self) -> Vec<usize> {
        self.injected_layers.clone().unwrap_or_else(|| PromptConfig::for_layers(self.layers).injected_layers)
    }

    pub fn prompt(&self) -> PromptConfig {
        PromptConfig {
            length: self.prompt_length,
            injected_layers: self.injected(),
            eps_a: self.eps_a,
            eps_b: self.eps_b,
            match_source: self.match_source,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            intra: self.lambda_intra,
            inter: self.lambda_inter,
            sim: self.lambda_sim,
            ort: self.lambda_ort,
            gen: self.lambda_gen.unwrap_or(DEFAULT_LAMBDA_GEN),
        }
    }

    pub fn flags(&self) -> Result<AblationFlags> {
        AblationFlags::parse(&self.ablation)
    }

    pub fn learner(&self, seed: u64) -> Result<LearnerConfig> {
        Ok(LearnerConfig {
            prompt: self.prompt(),
            weights: self.weights(),
            hsu: HsuConfig { t_max: self.t_max, min_lr: self.min_lr, loss_threshold: self.lthres },
            lr: self.lr,
            adam: AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps },
            flags: self.flags()?,
            standardize_gen: self.standardize_gen,
            ort_squared: self.ort_squared,
            seed,
        })
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch,
            seed: self.data_seed,
            base_class_ids: (0..self.base_classes).collect(),
            reserved_class_ids: (self.base_classes..self.base_classes + self.cl_classes).collect(),
        }
    }
}

/// Checks every cross-field invariant and reports all violations at once.
pub fn validate_config(config: &ExperimentConfig) -> Result<NormalizedConfig> {
    let mut errs = config.backbone().validate();
    errs.extend(config.prompt().validate(config.layers));
    errs.extend(config.weights().validate());
    if config.seeds.is_empty() {
        errs.push("at least one seed is required".into());
    }
    if config.tasks == 0 {
        errs.push("tasks must be >= 1".into());
    }
    if config.chunk_size == 0 {
        errs.push("chunk_size must be >= 1".into());
    }
    if !(config.test_fraction > 0.0 && config.test_fraction < 1.0) {
        errs.push(format!("test_fraction must lie in (0, 1), got {}", config.test_fraction));
    }
    if config.manifest.is_none() {
        if config.cl_classes < config.tasks {
            errs.push(format!("{} continual classes cannot fill {} tasks", config.cl_classes, config.tasks));
        }
        if config.base_classes + config.cl_classes < 2 {
            errs.push("synthetic data needs at least 2 classes".into());
        }
        if !(config.separation > 0.0) {
            errs.push(format!("separation must be positive, got {}", config.separation));
        }
        if config.per_class < 2 {
            errs.push("per_class must be >= 2 so every class has train and test samples".into());
        }
    }
    if config.base_classes == 0 && config.pretrained.is_none() {
        errs.push("pretraining needs at least one base class".into());
    }
    for (name, v) in [("lr", config.lr), ("min_lr", config.min_lr), ("pretrain_lr", config.pretrain_lr)] {
        if !(v > 0.0 && v.is_finite()) {
            errs.push(format!("{name} must be positive, got {v}"));
        }
    }
    if config.lr_grid.iter().any(|v| !(*v > 0.0)) {
        errs.push("lr_grid entries must be positive".into());
    }
    if !(config.lthres.is_finite()) {
        errs.push("lthres must be finite".into());
    }
    if config.t_max == 0 {
        errs.push("t_max must be >= 1".into());
    }
    match config.flags() {
        Ok(f) => errs.extend(f.validate()),
        Err(Error::Config(e)) => errs.extend(e),
        Err(e) => errs.push(e.to_string()),
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }

    let mut notes = Vec::new();
    let mut normalized = config.clone();
    if normalized.lambda_gen.is_none() {
        normalized.lambda_gen = Some(DEFAULT_LAMBDA_GEN);
        notes.push(format!("lambda_gen not set; using default {DEFAULT_LAMBDA_GEN} (not fixed by the method)"));
    }
    if normalized.injected_layers.is_none() {
        let inj = normalized.injected();
        notes.push(format!("injected_layers not set; using {inj:?}"));
        normalized.injected_layers = Some(inj);
    }
    Ok(NormalizedConfig { config: normalized, notes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn errors(cfg: &ExperimentConfig) -> Vec<String> {
        match validate_config(cfg) {
            Err(Error::Config(e)) => e,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn default_is_valid_and_fills_lambda_gen() {
        let n = validate_config(&ExperimentConfig::default()).unwrap();
        assert_eq!(n.config.lambda_gen, Some(1.0));
        assert!(n.notes.iter().any(|s| s.contains("lambda_gen")));
        assert_eq!(n.config.injected_layers, Some(vec![0, 1, 2, 3]));
    }

    #[test]
    fn prompt_length_one_is_rejected() {
        let cfg = ExperimentConfig { prompt_length: 1, ..Default::default() };
        assert!(errors(&cfg).iter().any(|e| e.contains("prompt length must be >= 2")));
    }

    #[test]
    fn errors_are_aggregated() {
        let cfg = ExperimentConfig { dim: 65, heads: 4, lambda_sim: -1.0, injected_layers: Some(vec![9]), ..Default::default() };
        let e = errors(&cfg);
        assert!(e.iter().any(|m| m.contains("divisible")), "{e:?}");
        assert!(e.iter().any(|m| m.contains("lambda_sim")), "{e:?}");
        assert!(e.iter().any(|m| m.contains("injected layer 9")), "{e:?}");
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = ExperimentConfig::from_toml("tasks = 3\nlr = 0.05\n").unwrap();
        assert_eq!((partial.tasks, partial.lr, partial.chunk_size), (3, 0.05, 10));
        assert!(ExperimentConfig::from_toml("taks = 3").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { lr: 0.05, ..Default::default() };
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
