//! Experiment configuration and seed derivation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client_trainer::TrainConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::inconsistency::DEFAULT_EPS;
use crate::optim::AdamWConfig;
use crate::scenegen::{jitter_palette, DomainSpec};
use crate::segmodel::SegModelConfig;

/// Compact description of a toy street domain; expands to a `DomainSpec`
/// with the default palette.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRecipe {
    pub id: String,
    pub images: usize,
    pub class_freq: Vec<f64>,
    #[serde(default)]
    pub color_shift: [f64; 3],
    #[serde(default = "unit")]
    pub contrast: f64,
    /// Per-channel palette perturbation bound.
    #[serde(default)]
    pub palette_jitter: f64,
    #[serde(default)]
    pub palette_seed: u64,
}

fn unit() -> f64 {
    1.0
}

impl DomainRecipe {
    pub fn new(id: &str, images: usize, class_freq: &[f64]) -> Self {
        DomainRecipe {
            id: id.to_string(),
            images,
            class_freq: class_freq.to_vec(),
            color_shift: [0.0; 3],
            contrast: 1.0,
            palette_jitter: 0.0,
            palette_seed: 0,
        }
    }

    fn styled(mut self, shift: [f64; 3], contrast: f64, jitter_seed: u64) -> Self {
        self.color_shift = shift;
        self.contrast = contrast;
        self.palette_jitter = 0.06;
        self.palette_seed = jitter_seed;
        self
    }

    pub fn spec(&self, model: &SegModelConfig) -> DomainSpec {
        let mut spec = DomainSpec::street(&self.id, model.height, self.class_freq.clone());
        spec.width = model.width;
        if self.palette_jitter > 0.0 {
            spec.palette = jitter_palette(&spec.palette, self.palette_jitter, self.palette_seed);
        }
        spec.color_shift = self.color_shift;
        spec.contrast = self.contrast;
        spec
    }
}

/// Supervised training on a public labeled domain. The resulting backbone
/// is the shared starting point of every client and of the global model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub domain: DomainRecipe,
    pub training: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyConfig {
    /// Dynamic classes that are scored.
    pub classes: Vec<u8>,
    pub threshold: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub enabled: bool,
    /// Generated images per unstable class.
    pub per_class: usize,
    pub generator: DomainRecipe,
}

/// Top-level keys missing from a config file take their value from
/// [`ExperimentConfig::toy`]; nested tables must be complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Run directory; not part of the config hash.
    pub output_dir: PathBuf,
    /// Drop classes absent from both prediction and ground truth from mIoU.
    pub exclude_absent: bool,
    pub model: SegModelConfig,
    pub client_training: TrainConfig,
    pub distill: DistillConfig,
    pub fedavg: TrainConfig,
    pub pretrain: PretrainConfig,
    pub inconsistency: InconsistencyConfig,
    pub augmentation: AugmentationConfig,
    pub clients: Vec<DomainRecipe>,
    pub server: DomainRecipe,
    pub targets: Vec<DomainRecipe>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::toy()
    }
}

impl ExperimentConfig {
    /// Three clients, each missing one dynamic class, a server set without
    /// trucks and two held-out target domains.
    pub fn toy() -> Self {
        let optimizer = AdamWConfig::with_lr(3e-3);
        let client_training = TrainConfig {
            iterations: 600,
            batch_size: 4,
            optimizer,
            ..TrainConfig::default()
        };
        let budget = TrainConfig {
            iterations: 1500,
            ..client_training
        };
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/toy"),
            exclude_absent: true,
            model: SegModelConfig::default(),
            client_training,
            distill: DistillConfig {
                iterations: budget.iterations,
                batch_size: budget.batch_size,
                optimizer,
                ..DistillConfig::default()
            },
            fedavg: budget,
            pretrain: PretrainConfig {
                enabled: true,
                domain: DomainRecipe::new("public", 300, &[0.0, 0.0, 0.0, 0.4, 0.3, 0.3]),
                training: TrainConfig {
                    iterations: 800,
                    optimizer: AdamWConfig {
                        backbone_multiplier: 1.0,
                        ..optimizer
                    },
                    ..client_training
                },
            },
            inconsistency: InconsistencyConfig {
                classes: vec![3, 4, 5],
                threshold: 0.5,
                eps: DEFAULT_EPS,
            },
            augmentation: AugmentationConfig {
                enabled: true,
                per_class: 100,
                generator: DomainRecipe::new("generator", 0, &[0.0, 0.0, 0.0, 0.4, 0.3, 0.3]),
            },
            clients: vec![
                DomainRecipe::new("client_a", 300, &[0.0, 0.0, 0.0, 0.55, 0.0, 0.45]).styled([0.06, 0.0, -0.04], 1.1, 11),
                DomainRecipe::new("client_b", 300, &[0.0, 0.0, 0.0, 0.55, 0.45, 0.0]).styled([-0.05, 0.04, 0.0], 0.9, 12),
                DomainRecipe::new("client_c", 300, &[0.0, 0.0, 0.0, 0.0, 0.5, 0.5]).styled([0.0, -0.05, 0.06], 1.0, 13),
            ],
            server: DomainRecipe::new("server", 300, &[0.0, 0.0, 0.0, 0.55, 0.45, 0.0]).styled([0.03, 0.03, 0.03], 0.95, 14),
            targets: vec![
                DomainRecipe::new("real_1", 60, &[0.0, 0.0, 0.0, 0.4, 0.3, 0.3]).styled([-0.03, -0.02, 0.04], 1.05, 15),
                DomainRecipe::new("real_2", 60, &[0.0, 0.0, 0.0, 0.4, 0.3, 0.3]).styled([0.04, -0.03, -0.02], 0.92, 16),
            ],
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Global model architecture: one query per client query.
    pub fn global_model(&self) -> SegModelConfig {
        self.model.with_queries(self.num_clients() * self.model.num_queries)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.client_training.loss.validate()?;
        self.fedavg.loss.validate()?;
        self.distill.validate()?;
        if self.clients.is_empty() {
            return Err(Error::Config("at least one client is required".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("at least one target domain is required".into()));
        }
        let mut ids = BTreeSet::new();
        let mut domains: Vec<&DomainRecipe> = self.clients.iter().collect();
        domains.push(&self.server);
        domains.extend(&self.targets);
        for d in &domains {
            if !ids.insert(d.id.as_str()) {
                return Err(Error::Config(format!("domain id `{}` is used twice", d.id)));
            }
            if d.images == 0 {
                return Err(Error::Config(format!("domain `{}` has no images", d.id)));
            }
        }
        domains.push(&self.augmentation.generator);
        if self.pretrain.enabled {
            domains.push(&self.pretrain.domain);
        }
        for d in domains {
            if d.id.is_empty() || d.id.contains(['/', '\\']) || d.id.starts_with('.') {
                return Err(Error::Config(format!("domain id `{}` is not a valid directory name", d.id)));
            }
            d.spec(&self.model).validate()?;
        }
        if self.pretrain.enabled && self.pretrain.domain.images == 0 {
            return Err(Error::Config("public pretraining domain has no images".into()));
        }
        let c = self.model.num_classes;
        if self.clients[0].spec(&self.model).num_classes() != c {
            return Err(Error::Config(format!("the street palette has 6 classes, model expects {c}")));
        }
        if self.inconsistency.classes.is_empty() || self.inconsistency.classes.iter().any(|&k| k as usize >= c) {
            return Err(Error::Config(format!(
                "scored classes {:?} must be a nonempty subset of 0..{c}",
                self.inconsistency.classes
            )));
        }
        if !self.inconsistency.threshold.is_finite() || !(self.inconsistency.eps >= 0.0) {
            return Err(Error::Config("threshold must be finite and eps non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Seed of a named stage or sub-task.
    pub fn stage_seed(&self, name: &str) -> u64 {
        stage_seed(self.seed, name)
    }
}

/// First eight bytes of `SHA-256(master_seed_le || name)`.
pub fn stage_seed(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::toy();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.global_model().num_queries, 24);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::toy();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn overlapping_domain_ids_are_rejected() {
        let mut cfg = ExperimentConfig::toy();
        cfg.targets[0].id = "client_b".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("client_b")));
        let mut cfg = ExperimentConfig::toy();
        cfg.server.id = "real_2".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn invalid_recipes_are_rejected() {
        let mut cfg = ExperimentConfig::toy();
        cfg.clients[1].class_freq = vec![0.0, 0.0, 0.0, 0.5, 0.4, 0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::toy();
        cfg.inconsistency.classes = vec![3, 9];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::toy();
        cfg.clients[0].id = "../up".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_seeds_are_stable_and_distinct() {
        assert_eq!(stage_seed(7, "distill"), stage_seed(7, "distill"));
        assert_ne!(stage_seed(7, "distill"), stage_seed(7, "augment"));
        assert_ne!(stage_seed(7, "distill"), stage_seed(8, "distill"));
        let mut h = Sha256::new();
        h.update(7u64.to_le_bytes());
        h.update(b"distill");
        let d = h.finalize();
        let mut first = [0u8; 8];
        first.copy_from_slice(&d[..8]);
        assert_eq!(stage_seed(7, "distill"), u64::from_le_bytes(first));
    }

    #[test]
    fn missing_keys_fall_back_to_the_toy_world() {
        let cfg = ExperimentConfig::from_toml_str("seed = 3\noutput_dir = \"out\"").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.clients, ExperimentConfig::toy().clients);
        assert!(matches!(ExperimentConfig::from_toml_str("sed = 3"), Err(Error::Toml(_))));
    }
}
