//! Flat `section.key = value` run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use advpatch::applier::TransformConfig;
use advpatch::detector::ScoreMode;
use advpatch::evaluator::EvalOptions;
use advpatch::fsutil::sha256_hex;
use advpatch::patch::{InitMode, LossWeights};
use advpatch::trainer::{AdamParams, TrainConfig};
use advpatch::{Error, Result};

/// Every accepted key with its default value. Empty means unset.
const DEFAULTS: &[(&str, &str)] = &[
    ("detector.kind", "fixture"),
    ("detector.seed", "0"),
    ("detector.input_size", "416"),
    ("detector.cfg", ""),
    ("detector.weights", ""),
    ("detector.names", ""),
    ("label.conf_threshold", "0.5"),
    ("label.nms_iou", "0.45"),
    ("transform.max_rotation_deg", "20"),
    ("transform.scale_lo", "0.8"),
    ("transform.scale_hi", "1.2"),
    ("transform.noise_amplitude", "0.1"),
    ("transform.brightness_lo", "-0.1"),
    ("transform.brightness_hi", "0.1"),
    ("transform.contrast_lo", "0.8"),
    ("transform.contrast_hi", "1.2"),
    ("transform.base_scale", "0.25"),
    ("loss.alpha", "0.01"),
    ("loss.beta", "2.5"),
    ("train.mode", "OBJ"),
    ("train.learning_rate", "0.03"),
    ("train.epochs", "10"),
    ("train.batch_size", "8"),
    ("train.seed", "0"),
    ("train.patch_size", "300"),
    ("train.checkpoint_every", "0"),
    ("train.max_steps", "0"),
    ("train.init", "random"),
    ("train.adam_beta1", "0.9"),
    ("train.adam_beta2", "0.999"),
    ("train.adam_eps", "1e-8"),
    ("eval.seed", "0"),
    ("eval.iou_threshold", "0.5"),
    ("eval.passes", "1"),
    ("eval.nms_iou", "0.45"),
    ("paths.train_images", ""),
    ("paths.train_labels", ""),
    ("paths.test_images", ""),
    ("paths.test_labels", ""),
    ("paths.colors", ""),
    ("paths.runs", "runs"),
    ("paths.run_dir", ""),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorKind {
    Fixture,
    Darknet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Directory that relative paths are resolved against.
    base_dir: PathBuf,
}

impl RunConfig {
    pub fn defaults(base_dir: &Path) -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            base_dir: base_dir.to_path_buf(),
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut config = Self::defaults(&base);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `section.key = value`, found `{line}`")))?;
            config.set(key.trim(), value.trim()).map_err(|e| err(e.to_string()))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, path)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    /// Applies `key=value` overrides, then revalidates.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Checks that every value parses; called after loading and overrides.
    pub fn validate(&self) -> Result<()> {
        self.detector_kind()?;
        self.input_size()?;
        self.train_config()?;
        self.eval_options()?;
        self.f64("label.conf_threshold")?;
        self.f64("label.nms_iou")?;
        self.f64("eval.iou_threshold")?;
        self.u64("train.max_steps")?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| Error::Config(format!("{key} = `{v}`: {e}")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.typed(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.typed(key)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.typed(key)
    }

    /// Resolved path, or `None` when the key is empty.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| self.base_dir.join(v))
    }

    /// Resolved path that must be set and exist.
    pub fn existing_path(&self, key: &str) -> Result<PathBuf> {
        let p = self
            .path(key)
            .ok_or_else(|| Error::Config(format!("{key} must be set")))?;
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
        Ok(p)
    }

    pub fn detector_kind(&self) -> Result<DetectorKind> {
        match self.get("detector.kind") {
            "fixture" => Ok(DetectorKind::Fixture),
            "darknet" => Ok(DetectorKind::Darknet),
            other => Err(Error::Config(format!(
                "detector.kind = `{other}`: expected fixture or darknet"
            ))),
        }
    }

    pub fn input_size(&self) -> Result<usize> {
        let s = self.usize("detector.input_size")?;
        if s == 0 {
            return Err(Error::Config("detector.input_size must be > 0".into()));
        }
        Ok(s)
    }

    pub fn transform(&self) -> Result<TransformConfig> {
        let t = TransformConfig {
            max_rotation: self.f64("transform.max_rotation_deg")?,
            scale_range: (self.f64("transform.scale_lo")?, self.f64("transform.scale_hi")?),
            noise_amplitude: self.f64("transform.noise_amplitude")?,
            brightness_range: (
                self.f64("transform.brightness_lo")?,
                self.f64("transform.brightness_hi")?,
            ),
            contrast_range: (self.f64("transform.contrast_lo")?, self.f64("transform.contrast_hi")?),
            base_scale: self.f64("transform.base_scale")?,
        };
        t.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(t)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mode: ScoreMode = self.typed("train.mode")?;
        let init: InitMode = self.typed("train.init")?;
        let config = TrainConfig {
            mode,
            weights: LossWeights::new(self.f64("loss.alpha")?, self.f64("loss.beta")?)
                .map_err(|e| Error::Config(e.to_string()))?,
            learning_rate: self.f64("train.learning_rate")?,
            epochs: self.usize("train.epochs")?,
            batch_size: self.usize("train.batch_size")?,
            seed: self.u64("train.seed")?,
            patch_size: self.usize("train.patch_size")?,
            checkpoint_every: self.u64("train.checkpoint_every")?,
            init,
            adam: AdamParams {
                beta1: self.f64("train.adam_beta1")?,
                beta2: self.f64("train.adam_beta2")?,
                eps: self.f64("train.adam_eps")?,
            },
            transform: self.transform()?,
        };
        config.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        let options = EvalOptions {
            seed: self.u64("eval.seed")?,
            passes: self.usize("eval.passes")?,
            nms_iou: self.f64("eval.nms_iou")?,
        };
        if options.passes == 0 {
            return Err(Error::Config("eval.passes must be >= 1".into()));
        }
        Ok(options)
    }

    /// Canonical `key = value` listing of every key, sorted.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 8 hex digits of the SHA-256 of [`Self::to_text`].
    pub fn hash8(&self) -> String {
        sha256_hex(self.to_text().as_bytes())[..8].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/cfg/run.cfg"))
    }

    #[test]
    fn defaults_validate() {
        let c = parse("").unwrap();
        let t = c.train_config().unwrap();
        assert_eq!(t.learning_rate, 0.03);
        assert_eq!(t.patch_size, 300);
        assert_eq!(t.weights, LossWeights::new(0.01, 2.5).unwrap());
        assert_eq!(c.transform().unwrap(), TransformConfig::default());
    }

    #[test]
    fn values_comments_and_paths() {
        let c = parse("# header\ntrain.mode = CLS  # trailing\npaths.train_images = imgs\n").unwrap();
        assert_eq!(c.train_config().unwrap().mode, ScoreMode::Cls);
        assert_eq!(c.path("paths.train_images"), Some(PathBuf::from("/cfg/imgs")));
        assert_eq!(c.path("paths.colors"), None);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        assert!(matches!(parse("train.speed = 3\n"), Err(Error::Parse { line: 1, .. })));
        assert!(parse("train.mode\n").is_err());
        assert!(parse("train.epochs = -1\n").is_err());
        assert!(parse("train.mode = FAST\n").is_err());
        assert!(parse("detector.kind = resnet\n").is_err());
    }

    #[test]
    fn overrides_change_hash() {
        let mut c = parse("").unwrap();
        let h = c.hash8();
        c.apply_overrides(&["train.seed=7".into()]).unwrap();
        assert_ne!(c.hash8(), h);
        assert!(c.apply_overrides(&["nope=1".into()]).is_err());
        assert!(c.apply_overrides(&["train.seed".into()]).is_err());
    }
}
