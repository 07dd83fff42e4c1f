//! Experiment configuration in the flat key-value format.
//!
//! Unknown keys are rejected. The resolved configuration, with every
//! default filled in, is re-emitted next to the run's artifacts.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::kv::{join_list, KvMap};
use crate::metrics::HdVariant;
use crate::nn::{Fusion, UpsampleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Baseline,
    ModDrop,
    Passion,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "moddrop" => Ok(Self::ModDrop),
            "passion" => Ok(Self::Passion),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::ModDrop => "moddrop",
            Self::Passion => "passion",
        })
    }
}

/// Which parts of the self-distillation objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub pixel: bool,
    pub proto: bool,
    /// Prototype distillation only for modalities the teacher neglects.
    pub delta: bool,
    /// Epoch-wise coefficient updates; off keeps `1 / (1 - MR)`.
    pub beta: bool,
}

impl Toggles {
    pub const ALL: Self = Self {
        pixel: true,
        proto: true,
        delta: true,
        beta: true,
    };
    pub const NONE: Self = Self {
        pixel: false,
        proto: false,
        delta: false,
        beta: false,
    };

    pub fn validate(&self) -> Result<()> {
        if self.delta && !self.proto {
            return Err(Error::Config("toggle `delta` requires `proto`".into()));
        }
        if self.beta && !self.pixel {
            return Err(Error::Config("toggle `beta` requires `pixel`".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated on the fly; the test set reuses the spec with its own seed
    /// stream and full modalities.
    Synthetic { train: DatasetSpec, test_samples: usize },
    /// Pre-generated containers.
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub width: usize,
    pub depth: usize,
    pub fusion: Fusion,
    pub upsample: UpsampleMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Nested,
    Plain,
}

impl FromStr for Grouping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nested" => Ok(Self::Nested),
            "plain" => Ok(Self::Plain),
            other => Err(Error::Config(format!("unknown grouping `{other}`"))),
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Nested => "nested",
            Self::Plain => "plain",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub targets: Vec<f64>,
    pub method: Method,
    pub toggles: Toggles,
    pub model: ModelSettings,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub augment_flip: bool,
    /// Maximum relative intensity jitter; 0 disables it.
    pub augment_intensity: f64,
    pub hd_variant: HdVariant,
    pub grouping: Grouping,
}

const TOGGLE_KEYS: [&str; 4] = ["pixel", "proto", "delta", "beta"];
const TOP_KEYS: [&str; 20] = [
    "method", "targets", "lr", "weight_decay", "poly_power", "epochs", "tau", "lambda1", "lambda2",
    "gamma", "seed", "out_dir", "model.width", "model.depth", "model.fusion", "model.upsample",
    "augment.flip", "augment.intensity", "eval.hd", "eval.grouping",
];
const DATA_FILE_KEYS: [&str; 2] = ["data.path", "test.path"];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                train: DatasetSpec::desk_default(120, 64, 0),
                test_samples: 30,
            },
            targets: vec![0.2, 0.5, 0.8],
            method: Method::Passion,
            toggles: Toggles::ALL,
            model: ModelSettings {
                width: 8,
                depth: 4,
                fusion: Fusion::Mean,
                upsample: UpsampleMode::Nearest,
            },
            lr: 2e-4,
            weight_decay: 1e-4,
            poly_power: 0.9,
            epochs: 40,
            tau: 4.0,
            lambda1: 0.5,
            lambda2: 0.1,
            gamma: 0.01,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            augment_flip: false,
            augment_intensity: 0.0,
            hd_variant: HdVariant::Percentile95,
            grouping: Grouping::Nested,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(text)?)
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        for key in kv.keys() {
            let known = TOP_KEYS.contains(&key)
                || TOGGLE_KEYS.contains(&key)
                || DATA_FILE_KEYS.contains(&key)
                || key.starts_with("data.")
                || key == "test.n_samples";
            if !known {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        let method = kv.get_or("method", d.method)?;
        let toggles = if method == Method::Passion {
            Toggles {
                pixel: kv.get_or("pixel", true)?,
                proto: kv.get_or("proto", true)?,
                delta: kv.get_or("delta", true)?,
                beta: kv.get_or("beta", true)?,
            }
        } else {
            if let Some(t) = TOGGLE_KEYS.iter().find(|t| kv.contains(t)) {
                return Err(Error::Config(format!(
                    "toggle `{t}` only applies to method `passion`, not `{method}`"
                )));
            }
            Toggles::NONE
        };

        let data = match (kv.get_str("data.path"), kv.get_str("test.path")) {
            (Some(train), Some(test)) => {
                if kv.keys().any(|k| k.starts_with("data.") && k != "data.path") || kv.contains("test.n_samples") {
                    return Err(Error::Config("`data.path` excludes synthetic data keys".into()));
                }
                DataSource::Files {
                    train: train.into(),
                    test: test.into(),
                }
            }
            (None, None) => {
                let has_spec = kv.keys().any(|k| k.starts_with("data."));
                let train = if has_spec {
                    DatasetSpec::from_kv(kv, "data.")?
                } else {
                    DatasetSpec::desk_default(120, 64, 0)
                };
                DataSource::Synthetic {
                    train,
                    test_samples: kv.get_or("test.n_samples", 30usize)?,
                }
            }
            _ => return Err(Error::Config("`data.path` and `test.path` go together".into())),
        };

        let targets = kv.get_list::<f64>("targets")?.unwrap_or(d.targets);
        let cfg = Self {
            data,
            targets,
            method,
            toggles,
            model: ModelSettings {
                width: kv.get_or("model.width", d.model.width)?,
                depth: kv.get_or("model.depth", d.model.depth)?,
                fusion: kv.get_or("model.fusion", d.model.fusion)?,
                upsample: kv.get_or("model.upsample", d.model.upsample)?,
            },
            lr: kv.get_or("lr", d.lr)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            poly_power: kv.get_or("poly_power", d.poly_power)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            tau: kv.get_or("tau", d.tau)?,
            lambda1: kv.get_or("lambda1", d.lambda1)?,
            lambda2: kv.get_or("lambda2", d.lambda2)?,
            gamma: kv.get_or("gamma", d.gamma)?,
            seed: kv.get_or("seed", d.seed)?,
            out_dir: kv.get_str("out_dir").map_or(d.out_dir, PathBuf::from),
            augment_flip: kv.get_or("augment.flip", false)?,
            augment_intensity: kv.get_or("augment.intensity", 0.0)?,
            hd_variant: kv.get_or("eval.hd", d.hd_variant)?,
            grouping: kv.get_or("eval.grouping", d.grouping)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.toggles.validate()?;
        if self.method != Method::Passion && self.toggles != Toggles::NONE {
            return Err(Error::Config("toggles only apply to method `passion`".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        let positive = [("lr", self.lr), ("tau", self.tau), ("poly_power", self.poly_power)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{name}` must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("weight_decay", self.weight_decay),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("gamma", self.gamma),
            ("augment.intensity", self.augment_intensity),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{name}` must be >= 0, got {v}")));
            }
        }
        if let Some(r) = self.targets.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!("missing rate {r} outside [0, 1)")));
        }
        if let DataSource::Synthetic { train, test_samples } = &self.data {
            if train.n_modalities != self.targets.len() {
                return Err(Error::Config(format!(
                    "{} missing-rate targets for {} modalities",
                    self.targets.len(),
                    train.n_modalities
                )));
            }
            if *test_samples == 0 {
                return Err(Error::Config("test.n_samples must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Every setting with defaults filled in, annotated with units.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<(String, String, &str)> = Vec::new();
        let mut put = |k: &str, v: String, note: &'static str| lines.push((k.to_string(), v, note));
        put("method", self.method.to_string(), "baseline | moddrop | passion");
        if self.method == Method::Passion {
            put("pixel", self.toggles.pixel.to_string(), "pixel-wise distillation");
            put("proto", self.toggles.proto.to_string(), "prototype distillation");
            put("delta", self.toggles.delta.to_string(), "prototype term only for neglected modalities");
            put("beta", self.toggles.beta.to_string(), "epoch-wise coefficient updates");
        }
        put("targets", join_list(&self.targets), "missing rate per modality, fraction of training samples");
        put("lr", self.lr.to_string(), "learning rate at step 0");
        put("weight_decay", self.weight_decay.to_string(), "decoupled, per unit learning rate");
        put("poly_power", self.poly_power.to_string(), "exponent of the poly decay");
        put("epochs", self.epochs.to_string(), "passes over the training set, batch size 1");
        put("tau", self.tau.to_string(), "softmax temperature, dimensionless");
        put("lambda1", self.lambda1.to_string(), "pixel distillation weight");
        put("lambda2", self.lambda2.to_string(), "prototype distillation weight");
        put("gamma", self.gamma.to_string(), "coefficient step per unit mean preference per epoch");
        put("seed", self.seed.to_string(), "presence, initialisation and shuffling");
        put("out_dir", self.out_dir.display().to_string(), "artifact directory");
        put("model.width", self.model.width.to_string(), "channels at full resolution");
        put("model.depth", self.model.depth.to_string(), "resolution levels");
        put("model.fusion", self.model.fusion.to_string(), "sum | mean | mix");
        put("model.upsample", self.model.upsample.to_string(), "nearest | linear");
        put("augment.flip", self.augment_flip.to_string(), "random flip along the last axis");
        put("augment.intensity", self.augment_intensity.to_string(), "max relative intensity scale jitter");
        put("eval.hd", self.hd_variant.to_string(), "hd-max | hd95, in pixels times spacing");
        put("eval.grouping", self.grouping.to_string(), "nested | plain");
        match &self.data {
            DataSource::Files { train, test } => {
                put("data.path", train.display().to_string(), "training container");
                put("test.path", test.display().to_string(), "test container, complete modalities");
            }
            DataSource::Synthetic { train, test_samples } => {
                put("test.n_samples", test_samples.to_string(), "synthetic test samples");
                let spec = train.to_kv();
                for key in spec.keys() {
                    let v = spec.get_str(key).unwrap_or_default().to_string();
                    lines.push((format!("data.{key}"), v, "synthetic dataset"));
                }
            }
        }
        let mut out = String::from("# resolved experiment configuration\n");
        for (k, v, note) in lines {
            out.push_str(&format!("{k} = {v}  # {note}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.lr, 2e-4);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.poly_power, 0.9);
        assert_eq!(cfg.tau, 4.0);
        assert_eq!((cfg.lambda1, cfg.lambda2, cfg.gamma), (0.5, 0.1, 0.01));
        assert_eq!(cfg.toggles, Toggles::ALL);
    }

    #[test]
    fn resolved_text_round_trips() {
        let text = "method = passion\nbeta = false\nepochs = 3\ndata.n_samples = 10\ndata.shape = 16x16\ntargets = 0.1,0.2,0.3\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);
        assert!(!again.toggles.beta);
    }

    #[test]
    fn toggle_rules() {
        assert!(ExperimentConfig::parse("method = baseline\npixel = true").is_err());
        assert!(ExperimentConfig::parse("proto = false").is_err());
        assert!(ExperimentConfig::parse("pixel = false").is_err());
        assert!(ExperimentConfig::parse("pixel = false\nbeta = false\nproto = false\ndelta = false").is_ok());
        assert!(ExperimentConfig::parse("nonsense = 1").is_err());
        assert!(ExperimentConfig::parse("epochs = 0").is_err());
        assert!(ExperimentConfig::parse("targets = 0.2,0.5").is_err());
    }
}
