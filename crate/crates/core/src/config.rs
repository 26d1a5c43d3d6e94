//! Experiment configuration: a TOML file with `[section]` tables and
//! `key = value` lines. Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{Ablation, FedGrConfig, LocalTrainConfig, Method, TrainerConfig};
use crate::datagen::{AugmentConfig, DatasetSpec, NoiseConfig, NoiseType};
use crate::error::{Error, Result};
use crate::noise_model::GmmConfig;
use crate::protocol::ProtocolConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Iid,
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_classes: usize,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub class_separation: f64,
    pub partition: Partition,
    pub dirichlet_alpha: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_classes: 10,
            input_dim: 16,
            n_train: 5000,
            n_test: 1000,
            class_separation: 5.0,
            partition: Partition::Iid,
            dirichlet_alpha: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub phi: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub noise_type: NoiseType,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            phi: 1.0,
            rho_min: 0.5,
            rho_max: 1.0,
            noise_type: NoiseType::Sym,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub clients: usize,
    pub sample_ratio: f64,
    pub rounds: usize,
    pub drop_probability: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            clients: 20,
            sample_ratio: 0.2,
            rounds: 150,
            drop_probability: 0.0,
            hidden_width: 64,
            hidden_layers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            method: Method::FedGr,
            seeds: vec![1, 13, 42],
            output_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub noise: NoiseSection,
    pub federation: FederationSection,
    #[serde(with = "train_serde")]
    pub train: LocalTrainConfig,
    #[serde(with = "fedgr_serde")]
    pub fedgr: FedGrConfig,
    #[serde(with = "ablation_serde")]
    pub ablation: Ablation,
    #[serde(with = "augment_serde")]
    pub augment: AugmentConfig,
    #[serde(with = "gmm_serde")]
    pub gmm: GmmConfig,
    pub run: RunSection,
}

/// Tables whose struct lives in another module get the same
/// defaults-plus-strict-keys treatment through a local mirror.
macro_rules! section_serde {
    ($module:ident, $ty:ident, { $($field:ident : $fty:ty),* $(,)? }) => {
        mod $module {
            use super::*;

            #[derive(Serialize, Deserialize)]
            #[serde(default, deny_unknown_fields)]
            struct Mirror {
                $($field: $fty),*
            }

            impl Default for Mirror {
                fn default() -> Self {
                    let d = $ty::default();
                    Self { $($field: d.$field),* }
                }
            }

            pub fn serialize<S: serde::Serializer>(v: &$ty, s: S) -> std::result::Result<S::Ok, S::Error> {
                Mirror { $($field: v.$field.clone()),* }.serialize(s)
            }

            pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<$ty, D::Error> {
                let m = Mirror::deserialize(d)?;
                Ok($ty { $($field: m.$field),* })
            }
        }
    };
}

section_serde!(train_serde, LocalTrainConfig, {
    lr: f64, momentum: f64, weight_decay: f64, batch_size: usize, local_epochs: usize,
});
section_serde!(fedgr_serde, FedGrConfig, {
    lambda_b: f64, lambda_r: f64, epsilon: f64, beta: f64, tau: f64,
    gamma_l: f64, kappa: f64, mu: f64, alpha: usize, delta: usize,
});
section_serde!(ablation_serde, Ablation, {
    disable_cs: bool, disable_lr: bool, disable_b: bool, disable_r: bool, disable_strong_aug: bool,
});
section_serde!(augment_serde, AugmentConfig, {
    weak_sigma: f64, strong_sigma: f64, strong_fraction: f64, scale_low: f64, scale_high: f64,
});
section_serde!(gmm_serde, GmmConfig, {
    max_iters: usize, tol: f64, variance_floor: f64,
});

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates configuration text.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical serialized form, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_classes: self.data.n_classes,
            n_train: self.data.n_train,
            n_test: self.data.n_test,
            input_dim: self.data.input_dim,
            class_separation: self.data.class_separation,
        }
    }

    pub fn noise_config(&self) -> NoiseConfig {
        NoiseConfig {
            phi: self.noise.phi,
            rho_min: self.noise.rho_min,
            rho_max: self.noise.rho_max,
            noise_type: self.noise.noise_type,
        }
    }

    pub fn protocol(&self, seed: u64) -> ProtocolConfig {
        ProtocolConfig {
            sample_ratio: self.federation.sample_ratio,
            rounds: self.federation.rounds,
            drop_probability: self.federation.drop_probability,
            hidden_width: self.federation.hidden_width,
            hidden_layers: self.federation.hidden_layers,
            seed,
            trainer: TrainerConfig {
                method: self.run.method,
                train: self.train,
                fedgr: self.fedgr,
                ablation: self.ablation,
                augment: self.augment,
            },
            gmm: self.gmm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_classes < 2 {
            return Err(Error::validation("n_classes", "must be at least 2"));
        }
        if d.input_dim == 0 {
            return Err(Error::validation("input_dim", "must be positive"));
        }
        if d.n_test == 0 {
            return Err(Error::validation("n_test", "must be positive"));
        }
        if !(d.class_separation >= 0.0 && d.class_separation.is_finite()) {
            return Err(Error::validation("class_separation", "must be non-negative"));
        }
        if !(d.dirichlet_alpha > 0.0 && d.dirichlet_alpha.is_finite()) {
            return Err(Error::validation("dirichlet_alpha", "must be positive"));
        }
        let k = self.federation.clients;
        if k == 0 {
            return Err(Error::validation("clients", "must be positive"));
        }
        if d.n_train < k {
            return Err(Error::validation("n_train", "must be at least the number of clients"));
        }
        self.noise_config().validate()?;
        let a = &self.augment;
        for (name, v) in [("weak_sigma", a.weak_sigma), ("strong_sigma", a.strong_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(name, "must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&a.strong_fraction) {
            return Err(Error::validation("strong_fraction", "must lie in [0, 1]"));
        }
        if !(a.scale_low.is_finite() && a.scale_high.is_finite() && a.scale_low < a.scale_high) {
            return Err(Error::validation("scale_high", "must exceed scale_low"));
        }
        if self.gmm.max_iters == 0 {
            return Err(Error::validation("max_iters", "must be positive"));
        }
        if !(self.gmm.variance_floor > 0.0) {
            return Err(Error::validation("variance_floor", "must be positive"));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::validation("seeds", "at least one seed is required"));
        }
        self.protocol(0).validate()
    }
}
