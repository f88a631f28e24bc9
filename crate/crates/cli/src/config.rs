//! Experiment configuration: one JSON document drives every stage for one
//! dataset.

use std::path::{Path, PathBuf};

use sanilab::attack::{CwParams, IgsmParams, TargetPolicy};
use sanilab::detect::Direction;
use sanilab::nn::{ArchDescriptor, ArchName, TrainConfig};
use sanilab::sanitize::SanitizeMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Problems with the configuration or the paths it references. These exit
/// with status 2.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config {path}: at `{at}`: {message}")]
    Parse { path: String, at: String, message: String },
    #[error("config: `{at}`: {message}")]
    Invalid { at: String, message: String },
    #[error("config: `{at}`: path {path} does not exist")]
    MissingPath { at: String, path: String },
}

fn invalid(at: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { at: at.to_string(), message: message.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_arch")]
    pub arch: ArchChoice,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub canonical: CanonicalConfig,
    #[serde(default)]
    pub sanitize: SanitizeConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub detect: DetectConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_arch() -> ArchChoice {
    ArchChoice::Named(ArchName::MnistCnn)
}

/// A built-in architecture by name, or a full descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchChoice {
    Named(ArchName),
    Custom(ArchDescriptor),
}

impl ArchChoice {
    pub fn descriptor(&self) -> ArchDescriptor {
        match self {
            Self::Named(ArchName::MnistCnn) => ArchDescriptor::mnist_cnn(),
            Self::Named(ArchName::CanonicalCnn) => ArchDescriptor::canonical_cnn(),
            Self::Named(ArchName::SvhnCnn) => ArchDescriptor::svhn_cnn(),
            Self::Custom(d) => d.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetPath {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    /// JSON list of bounding boxes over source photographs.
    Boxes {
        manifest: PathBuf,
    },
}

impl DatasetPath {
    fn paths(&self) -> Vec<&Path> {
        match self {
            Self::Idx { images, labels } => vec![images, labels],
            Self::Boxes { manifest } => vec![manifest],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DatasetPath,
    pub test: DatasetPath,
    /// Directory of base glyphs, one subdirectory per digit.
    #[serde(default)]
    pub canonical_glyphs: Option<PathBuf>,
    /// Use only the first N training examples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

impl DataConfig {
    /// Standard MNIST file names inside `dir`.
    pub fn mnist_dir(dir: &Path) -> Self {
        let idx = |images: &str, labels: &str| DatasetPath::Idx { images: dir.join(images), labels: dir.join(labels) };
        Self {
            train: idx("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            test: idx("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
            canonical_glyphs: None,
            train_limit: None,
            test_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let c = TrainConfig::new(0);
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
            batch_size: c.batch_size,
            epochs: c.epochs,
            stop_at_train_accuracy: c.stop_at_train_accuracy,
        }
    }
}

impl TrainSettings {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            batch_size: self.batch_size,
            epochs: self.epochs,
            stop_at_train_accuracy: self.stop_at_train_accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CanonicalConfig {
    /// Side lengths, in pixels, the base glyphs are resized to.
    pub scales: Vec<usize>,
    /// Rotation angles in degrees, counter-clockwise.
    pub rotations: Vec<f64>,
    pub arch: ArchChoice,
    /// Training settings for the canonical model; the main ones when absent.
    pub train: Option<TrainSettings>,
}

impl Default for CanonicalConfig {
    fn default() -> Self {
        Self {
            scales: vec![20, 24, 28],
            rotations: (-3..=3).map(|k| f64::from(k) * 10.0).collect(),
            arch: ArchChoice::Named(ArchName::CanonicalCnn),
            train: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SanitizeConfig {
    pub mode: SanitizeMode,
    pub thresholds: Vec<f64>,
}

impl Default for SanitizeConfig {
    fn default() -> Self {
        Self { mode: SanitizeMode::SelfScored, thresholds: vec![0.0, 0.999, 0.9999, 0.99999, 0.999999, 0.9999999] }
    }
}

/// Which models an attack is run against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelection {
    Unsanitized,
    Sanitized,
    All,
}

impl ModelSelection {
    pub fn includes_unsanitized(self) -> bool {
        matches!(self, Self::Unsanitized | Self::All)
    }

    pub fn includes_sanitized(self) -> bool {
        matches!(self, Self::Sanitized | Self::All)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IgsmConfig {
    pub epsilon: f32,
    pub alpha: f32,
    pub iterations: Vec<usize>,
    pub models: ModelSelection,
}

impl Default for IgsmConfig {
    fn default() -> Self {
        let p = IgsmParams::new(1);
        Self { epsilon: p.epsilon, alpha: p.alpha, iterations: vec![5, 10, 15], models: ModelSelection::All }
    }
}

impl IgsmConfig {
    pub fn params(&self, iterations: usize) -> IgsmParams {
        IgsmParams { epsilon: self.epsilon, alpha: self.alpha, iterations }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CwTargets {
    AllWrongClasses,
    RandomWrongClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CwConfig {
    pub kappas: Vec<f32>,
    pub targets: CwTargets,
    pub binary_search_steps: usize,
    pub max_iterations: usize,
    pub learning_rate: f32,
    pub initial_const: f32,
    pub abort_early: bool,
    pub models: ModelSelection,
}

impl Default for CwConfig {
    fn default() -> Self {
        let p = CwParams::default();
        Self {
            kappas: vec![0.0, 0.1, 0.5, 1.0, 3.0, 5.0],
            targets: CwTargets::AllWrongClasses,
            binary_search_steps: p.binary_search_steps,
            max_iterations: p.max_iterations,
            learning_rate: p.learning_rate,
            initial_const: p.initial_const,
            abort_early: p.abort_early,
            models: ModelSelection::All,
        }
    }
}

impl CwConfig {
    pub fn params(&self, kappa: f32) -> CwParams {
        CwParams {
            kappa,
            binary_search_steps: self.binary_search_steps,
            max_iterations: self.max_iterations,
            learning_rate: self.learning_rate,
            initial_const: self.initial_const,
            abort_early: self.abort_early,
        }
    }

    pub fn policy(&self, seed: u64) -> TargetPolicy {
        match self.targets {
            CwTargets::AllWrongClasses => TargetPolicy::AllWrongClasses,
            CwTargets::RandomWrongClass => TargetPolicy::RandomWrongClass { seed },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Number of evaluation-split test examples to attack.
    pub examples: usize,
    pub igsm: IgsmConfig,
    pub cw: CwConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { examples: 200, igsm: IgsmConfig::default(), cw: CwConfig::default() }
    }
}

/// The model whose adversarial examples are fed to the detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackedModel {
    Unsanitized,
    /// The sanitized model paired with the detector.
    Sanitized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub target_accept: f64,
    /// Share of the test set held out for calibration; detection is measured
    /// on the rest.
    pub calibration_fraction: f64,
    /// Sanitization thresholds whose models are paired with the unsanitized
    /// model as detectors; all configured thresholds when absent.
    pub thresholds: Option<Vec<f64>>,
    pub attacked_model: AttackedModel,
    pub direction: Direction,
    /// Use only the first N normal examples of the evaluation split.
    pub normal_examples: Option<usize>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            target_accept: 0.98,
            calibration_fraction: 0.5,
            thresholds: None,
            attacked_model: AttackedModel::Unsanitized,
            direction: Direction::default(),
            normal_examples: None,
        }
    }
}

impl ExperimentConfig {
    /// Configuration when no file is given: MNIST files under `data_dir` and
    /// defaults everywhere else.
    pub fn from_data_dir(data_dir: &Path, seed: u64) -> Self {
        Self {
            seed,
            out_dir: default_out(),
            arch: default_arch(),
            data: DataConfig::mnist_dir(data_dir),
            train: TrainSettings::default(),
            canonical: CanonicalConfig::default(),
            sanitize: SanitizeConfig::default(),
            attack: AttackConfig::default(),
            detect: DetectConfig::default(),
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            at: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), source: e })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.with_seed(self.seed)
    }

    pub fn canonical_train_config(&self) -> TrainConfig {
        self.canonical.train.as_ref().unwrap_or(&self.train).with_seed(self.seed)
    }

    /// Thresholds in ascending order.
    pub fn thresholds(&self) -> Vec<f64> {
        let mut t = self.sanitize.thresholds.clone();
        t.sort_by(f64::total_cmp);
        t
    }

    pub fn detect_thresholds(&self) -> Vec<f64> {
        let mut t = self.detect.thresholds.clone().unwrap_or_else(|| self.sanitize.thresholds.clone());
        t.sort_by(f64::total_cmp);
        t
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.arch.descriptor().validate().map_err(|e| invalid("arch", e.to_string()))?;
        self.canonical.arch.descriptor().validate().map_err(|e| invalid("canonical.arch", e.to_string()))?;
        self.train_config().validate().map_err(|e| invalid("train", e.to_string()))?;
        self.canonical_train_config().validate().map_err(|e| invalid("canonical.train", e.to_string()))?;

        for (at, set) in [("data.train", &self.data.train), ("data.test", &self.data.test)] {
            for p in set.paths() {
                require_exists(at, p)?;
            }
        }
        if let Some(p) = &self.data.canonical_glyphs {
            require_exists("data.canonical_glyphs", p)?;
        } else if self.sanitize.mode == SanitizeMode::Canonical {
            return Err(invalid("data.canonical_glyphs", "canonical sanitization needs a canonical glyph directory"));
        }
        if self.data.train_limit == Some(0) || self.data.test_limit == Some(0) {
            return Err(invalid("data", "limits must be positive"));
        }

        if self.canonical.scales.is_empty() || self.canonical.rotations.is_empty() {
            return Err(invalid("canonical", "scales and rotations must be non-empty"));
        }
        if self.canonical.rotations.iter().any(|r| !r.is_finite()) {
            return Err(invalid("canonical.rotations", "rotations must be finite"));
        }

        check_thresholds("sanitize.thresholds", &self.sanitize.thresholds)?;
        if let Some(t) = &self.detect.thresholds {
            check_thresholds("detect.thresholds", t)?;
            if let Some(x) = t.iter().find(|x| !self.sanitize.thresholds.contains(x)) {
                return Err(invalid("detect.thresholds", format!("{x} is not one of sanitize.thresholds")));
            }
        }

        if self.attack.examples == 0 {
            return Err(invalid("attack.examples", "must be positive"));
        }
        for &n in &self.attack.igsm.iterations {
            self.attack.igsm.params(n).validate().map_err(|e| invalid("attack.igsm", e.to_string()))?;
        }
        for &k in &self.attack.cw.kappas {
            self.attack.cw.params(k).validate().map_err(|e| invalid("attack.cw", e.to_string()))?;
        }

        let d = &self.detect;
        if !(d.target_accept > 0.0 && d.target_accept < 1.0) {
            return Err(invalid("detect.target_accept", "must lie strictly between 0 and 1"));
        }
        if !(d.calibration_fraction > 0.0 && d.calibration_fraction < 1.0) {
            return Err(invalid("detect.calibration_fraction", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

fn require_exists(at: &str, path: &Path) -> Result<(), ConfigError> {
    if path.exists() {
        Ok(())
    } else {
        Err(ConfigError::MissingPath { at: at.to_string(), path: path.display().to_string() })
    }
}

fn check_thresholds(at: &str, t: &[f64]) -> Result<(), ConfigError> {
    if t.is_empty() {
        return Err(invalid(at, "at least one threshold is required"));
    }
    if let Some(x) = t.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(invalid(at, format!("{x} is outside [0, 1]")));
    }
    let mut sorted = t.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid(at, "thresholds must be distinct"));
    }
    Ok(())
}
