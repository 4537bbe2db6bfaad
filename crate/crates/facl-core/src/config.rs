//! Run configuration: the training config schema, named sub-seed
//! derivation, config hashing, and run-directory management.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::spectral::{BandThresholds, RandomBands};

/// Which bands the randomizing mask jitters. `LowHigh` is the shipped
/// behaviour; the others exist for the band-randomization ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RandomBandsChoice {
    #[default]
    LowHigh,
    Low,
    Mid,
    High,
    All,
}

impl RandomBandsChoice {
    pub fn to_bands(self) -> RandomBands {
        match self {
            RandomBandsChoice::LowHigh => RandomBands::default(),
            RandomBandsChoice::Low => RandomBands::only_low(),
            RandomBandsChoice::Mid => RandomBands::only_mid(),
            RandomBandsChoice::High => RandomBands::only_high(),
            RandomBandsChoice::All => RandomBands::all(),
        }
    }
}

/// Optional ablation-suite section of a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Variant names; empty means all eight.
    pub variants: Vec<String>,
    /// Victim checkpoint paths, evaluated per variant.
    pub victims: Vec<String>,
    /// Dataset manifests to evaluate on; empty means the training dataset.
    pub eval_datasets: Vec<String>,
}

/// The training configuration. All fields have paper-default values, so an
/// empty config file is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Path to a dataset manifest produced by ingestion.
    pub dataset: String,
    /// Path to the surrogate classifier checkpoint.
    pub surrogate: String,
    pub resolution: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epsilon: f64,
    pub f_low: u32,
    pub f_high: u32,
    pub base_resolution: u32,
    pub rho: f64,
    pub sigma: f64,
    pub augment_fraction: f64,
    pub random_bands: RandomBandsChoice,
    pub lambda_orig: f64,
    pub lambda_facl: f64,
    /// Tap used by the baseline separation loss.
    pub orig_tap: String,
    /// Tap used by the band-contrastive loss (may equal `orig_tap`).
    pub facl_tap: String,
    pub seed: u64,
    /// Extra checkpoint every K steps (the final one is always written).
    pub checkpoint_every: Option<usize>,
    pub generator: GeneratorConfig,
    pub ablate: Option<AblateSection>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: String::new(),
            surrogate: String::new(),
            resolution: 32,
            batch_size: 16,
            epochs: 1,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            epsilon: 10.0,
            f_low: 7,
            f_high: 112,
            base_resolution: 224,
            rho: 0.01,
            sigma: 8.0,
            augment_fraction: 0.5,
            random_bands: RandomBandsChoice::LowHigh,
            lambda_orig: 1.0,
            lambda_facl: 1.0,
            orig_tap: "pool3".into(),
            facl_tap: "pool4".into(),
            seed: 0,
            checkpoint_every: None,
            generator: GeneratorConfig {
                input_resolution: 32,
                ..GeneratorConfig::default()
            },
            ablate: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho ({}) must be in [0, 1)", self.rho)));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config(format!("sigma ({}) must be >= 0", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) {
            return Err(Error::Config(format!(
                "augment_fraction ({}) must be in [0, 1]",
                self.augment_fraction
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon ({}) must be > 0", self.epsilon)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        // surfaces ordering violations like f_low >= f_high
        BandThresholds::new(self.f_low, self.f_high, self.base_resolution)?;
        self.loss_weights().validate()?;
        self.generator.validate()?;
        if self.generator.input_resolution != self.resolution {
            return Err(Error::Config(format!(
                "generator resolution ({}) must match dataset resolution ({})",
                self.generator.input_resolution, self.resolution
            )));
        }
        Ok(())
    }

    pub fn thresholds(&self) -> BandThresholds {
        BandThresholds {
            f_low: self.f_low,
            f_high: self.f_high,
            base_resolution: self.base_resolution,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_orig: self.lambda_orig,
            lambda_facl: self.lambda_facl,
        }
    }

    /// Hex digest of the canonical serialized config.
    pub fn hash(&self) -> String {
        let toml = toml::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(toml.as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Loads and validates a training config; all defaults applied, unknown
/// keys rejected.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_toml(cfg: &TrainConfig) -> Result<String> {
    Ok(toml::to_string_pretty(cfg)?)
}

/// Named sub-seed derivation: every consumer of randomness hashes the root
/// seed with a domain string and indices, so streams never interfere.
pub fn derive_seed(root: u64, domain: &str, indices: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(domain.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// A freshly created, timestamped run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn metrics_path(&self) -> PathBuf {
        self.path.join("metrics.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path.join("generator.ckpt")
    }

    pub fn config_path(&self) -> PathBuf {
        self.path.join("config.resolved.toml")
    }

    pub fn record_path(&self) -> PathBuf {
        self.path.join("run.json")
    }
}

/// Creates `<out_dir>/runs/<utc timestamp>-<kind>-<hash8>` atomically;
/// an existing directory gets a numeric suffix instead of being reused.
pub fn create_run_dir(out_dir: &Path, kind: &str, config_hash: &str) -> Result<RunDir> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let short = &config_hash[..8.min(config_hash.len())];
    let base = out_dir.join("runs");
    std::fs::create_dir_all(&base).map_err(|e| Error::io_at(&base, e))?;
    for attempt in 0..1000u32 {
        let name = if attempt == 0 {
            format!("{stamp}-{kind}-{short}")
        } else {
            format!("{stamp}-{kind}-{short}-{attempt}")
        };
        let path = base.join(name);
        match std::fs::create_dir(&path) {
            Ok(()) => return Ok(RunDir { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io_at(&path, e)),
        }
    }
    Err(Error::Config("could not allocate a run directory".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_paper_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.rho, 0.01);
        assert_eq!(cfg.sigma, 8.0);
        assert_eq!(cfg.epsilon, 10.0);
        assert_eq!(cfg.learning_rate, 2e-4);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.adam_beta1, 0.5);
        assert_eq!(cfg.adam_beta2, 0.999);
        assert_eq!(cfg.epochs, 1);
        assert_eq!((cfg.f_low, cfg.f_high, cfg.base_resolution), (7, 112, 224));
        assert_eq!(cfg.augment_fraction, 0.5);
        assert_eq!(cfg.thresholds().scaled_to(32), (1, 16));
    }

    #[test]
    fn out_of_range_rho_is_rejected() {
        let err = parse_config("rho = 1.5").unwrap_err();
        assert!(err.to_string().contains("rho"), "error was: {err}");
    }

    #[test]
    fn misordered_thresholds_are_rejected() {
        let err = parse_config("f_low = 120\nf_high = 7").unwrap_err();
        assert!(err.to_string().contains("f_low"), "error was: {err}");
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = parse_config("not_a_real_knob = 3").unwrap_err();
        assert!(err.to_string().contains("not_a_real_knob"), "error was: {err}");
    }

    #[test]
    fn resolved_config_round_trips_exactly() {
        let mut cfg = TrainConfig::default();
        cfg.dataset = "data/synth_a/manifest.json".into();
        cfg.surrogate = "models/vgg.ckpt".into();
        cfg.learning_rate = 2e-4;
        cfg.sigma = 8.0;
        cfg.ablate = Some(AblateSection {
            variants: vec!["baseline".into(), "full".into()],
            victims: vec!["models/resnet.ckpt".into()],
            eval_datasets: vec![],
        });
        let text = config_to_toml(&cfg).unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn derive_seed_separates_domains() {
        let a = derive_seed(7, "fadr", &[0, 1]);
        let b = derive_seed(7, "fadr", &[0, 2]);
        let c = derive_seed(7, "shuffle", &[0, 1]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, "fadr", &[0, 1]));
    }

    #[test]
    fn run_dirs_never_collide() {
        let dir = tempfile::tempdir().unwrap();
        let a = create_run_dir(dir.path(), "train", "abcdef1234").unwrap();
        let b = create_run_dir(dir.path(), "train", "abcdef1234").unwrap();
        assert_ne!(a.path, b.path);
        assert!(a.path.exists() && b.path.exists());
    }
}
