//! Run configuration: a TOML file with the sections `data`, `model`, `cprm`,
//! `csrm`, `kms`, `train` and `eval`. Every key is optional and defaults to
//! the values below; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::csrm::CsrmConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub fold_file: PathBuf,
    pub fold: usize,
    /// Minimum target pixels for an image to enter an episode index.
    pub min_pixels: usize,
    /// Side of the class-preserving random crop; 0 disables cropping.
    pub crop: usize,
    // synthetic corpus generation
    pub n_images: usize,
    pub image_size: usize,
    pub gen_seed: u64,
    pub test_classes_per_fold: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/synthetic"),
            fold_file: PathBuf::from("data/synthetic/folds.toml"),
            fold: 0,
            min_pixels: 16,
            crop: 0,
            n_images: 600,
            image_size: 64,
            gen_seed: 0,
            test_classes_per_fold: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `tiny` for the built-in frozen encoder, otherwise a weights file path.
    pub backbone: String,
    pub backbone_seed: u64,
    pub reduce_dim: usize,
    pub use_cprm: bool,
    pub use_csrm: bool,
    pub use_kms: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: "tiny".into(),
            backbone_seed: 7,
            reduce_dim: 256,
            use_cprm: true,
            use_csrm: true,
            use_kms: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CprmConfig {
    pub lambda_fuse: f64,
    /// Side of the pooled grid for channel descriptors.
    pub channel_grid: usize,
}

impl Default for CprmConfig {
    fn default() -> Self {
        Self {
            lambda_fuse: 0.5,
            channel_grid: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmsConfig {
    pub rho: f64,
    pub lambda_warm: f64,
}

impl Default for KmsConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            lambda_warm: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub eta: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 1000,
            iters_per_epoch: 100,
            batch_size: 8,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            eta: 1.0,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pairs: usize,
    pub shots: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairs: 1000,
            shots: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub cprm: CprmConfig,
    pub csrm: CsrmConfig,
    pub kms: KmsConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let valid = Self::default().to_table();
        for (section, body) in &table {
            let Some(known) = valid.get(section).and_then(|v| v.as_table()) else {
                let names: Vec<&str> = valid.keys().map(String::as_str).collect();
                return Err(Error::Config(format!(
                    "unknown section [{section}]; valid sections: {}",
                    names.join(", ")
                )));
            };
            let body = body
                .as_table()
                .ok_or_else(|| Error::Config(format!("[{section}] must be a table")))?;
            for key in body.keys() {
                if !known.contains_key(key) {
                    let names: Vec<&str> = known.keys().map(String::as_str).collect();
                    return Err(Error::Config(format!(
                        "unknown key {section}.{key}; valid keys in [{section}]: {}",
                        names.join(", ")
                    )));
                }
            }
        }
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes to a table")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let c = &self.csrm;
        for (name, v) in [("csrm.mu1", c.mu1), ("csrm.mu2", c.mu2)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.model.reduce_dim == 0 || self.cprm.channel_grid == 0 {
            return bad("model.reduce_dim and cprm.channel_grid must be positive".into());
        }
        if self.train.batch_size == 0 || self.train.iters_per_epoch == 0 {
            return bad("train.batch_size and train.iters_per_epoch must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.kms.rho) {
            return bad(format!("kms.rho must lie in [0, 1], got {}", self.kms.rho));
        }
        if self.eval.shots == 0 {
            return bad("eval.shots must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = Config::parse("").unwrap();
        assert_eq!((c.csrm.mu1, c.csrm.mu2), (0.7, 0.6));
        assert_eq!((c.csrm.step_mu1, c.csrm.step_mu2, c.csrm.cpm_iters), (0.05, 0.02, 3));
        assert_eq!((c.csrm.gamma1, c.csrm.gamma2), (0.9, 0.1));
        assert_eq!((c.kms.rho, c.kms.lambda_warm, c.cprm.lambda_fuse), (0.5, 0.8, 0.5));
        assert_eq!((c.train.eta, c.csrm.tau), (1.0, 10.0));
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let e = Config::parse("[csrm]\nmu3 = 0.5\n").unwrap_err().to_string();
        assert!(e.contains("csrm.mu3") && e.contains("mu1") && e.contains("gamma2"), "{e}");
        let e = Config::parse("[optim]\nlr = 1\n").unwrap_err().to_string();
        assert!(e.contains("valid sections") && e.contains("train"), "{e}");
    }

    #[test]
    fn round_trip_through_text() {
        let mut c = Config::default();
        c.model.reduce_dim = 32;
        c.model.use_kms = false;
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_threshold_rejected() {
        assert!(Config::parse("[csrm]\nmu1 = 1.5\n").is_err());
    }
}
