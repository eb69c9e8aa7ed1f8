//! The run configuration: one TOML document covering every module, layered as
//! built-in defaults, then the config file, then command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use vpr_core::backbone::BackboneConfig;
use vpr_core::data::SyntheticConfig;
use vpr_core::encoders::{EncoderConfig, EncoderVariant};
use vpr_core::fusion::FusionConfig;
use vpr_core::model::ModelConfig;
use vpr_core::training::TrainConfig;
use vpr_core::{Error, Result, ValidationError};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub places: usize,
    pub per_place: usize,
    pub noise: f64,
    pub drift: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            seed: d.seed,
            places: d.n_places,
            per_place: d.per_place,
            noise: d.noise,
            drift: d.drift,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    /// Feature archive directory; defaults to `features/` next to the manifest.
    pub features: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub deterministic: bool,
    pub pca_dim: Option<usize>,
}

impl Default for Mode {
    fn default() -> Self {
        Self {
            deterministic: true,
            pca_dim: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
    pub train: TrainConfig,
    pub synth: SynthSection,
    pub paths: Paths,
    pub mode: Mode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fusion = FusionConfig::default();
        let dim = fusion.out_channels;
        Self {
            backbone: BackboneConfig::default(),
            fusion,
            teacher: EncoderConfig::teacher(dim),
            student: EncoderConfig::student(dim),
            train: TrainConfig::default(),
            synth: SynthSection::default(),
            paths: Paths::default(),
            mode: Mode::default(),
        }
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Command-line overrides as dotted keys, e.g. `train.epochs_teacher`.
#[derive(Default)]
pub struct Overrides(Vec<(String, Value)>);

impl Overrides {
    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.0.push((key.to_string(), value.into()));
    }

    pub fn set_opt<V: Into<Value>>(&mut self, key: &str, value: Option<V>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    fn apply(self, root: &mut Table) {
        for (key, value) in self.0 {
            let mut parts: Vec<&str> = key.split('.').collect();
            let leaf = parts.pop().expect("non-empty key");
            let mut t = &mut *root;
            for p in parts {
                t = t
                    .entry(p)
                    .or_insert_with(|| Value::Table(Table::new()))
                    .as_table_mut()
                    .expect("override path crosses a non-table value");
            }
            t.insert(leaf.to_string(), value);
        }
    }
}

impl RunConfig {
    pub fn load(file: Option<&Path>, overrides: Overrides) -> Result<Self> {
        let mut root = Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let user: Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut root, user);
        }
        overrides.apply(&mut root);
        Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn teacher_model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            fusion: self.fusion.clone(),
            encoder: self.teacher.clone(),
        }
    }

    pub fn student_model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            fusion: self.fusion.clone(),
            encoder: self.student.clone(),
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.synth.seed,
            n_places: self.synth.places,
            per_place: self.synth.per_place,
            noise: self.synth.noise,
            drift: self.synth.drift,
            image_size: self.backbone.image_size,
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        self.teacher_model().descriptor_dim()
    }

    /// Full cross-module check; every offending key is listed.
    pub fn validate(&self) -> Result<()> {
        let mut err = ValidationError::default();
        self.teacher_model().validate_into("teacher", &mut err);
        self.student.validate_into("student", &mut err);
        for (name, enc, want) in [
            ("teacher", &self.teacher, EncoderVariant::CrossImage),
            ("student", &self.student, EncoderVariant::SelfEnhanced),
        ] {
            if enc.variant != want {
                err.push(format!("{name}.variant"), format!("must be {}", want.as_str()));
            }
        }
        if self.student.dim != self.fusion.out_channels {
            err.push(
                "student.dim",
                format!("must equal fusion.out_channels = {}", self.fusion.out_channels),
            );
        }
        self.train.validate_into(&mut err);
        if self.train.batch_places > self.synth.places {
            err.push("train.batch_places", format!("exceeds synth.places = {}", self.synth.places));
        }
        if self.synth.places < 2 {
            err.push("synth.places", "must be at least 2");
        }
        if self.synth.per_place < 2 {
            err.push("synth.per_place", "must be at least 2");
        }
        if !(self.synth.noise >= 0.0) {
            err.push("synth.noise", "must be nonnegative");
        }
        if !(self.synth.drift >= 0.0) {
            err.push("synth.drift", "must be nonnegative");
        }
        if self.synth.seed > i64::MAX as u64 {
            err.push("synth.seed", "must be below 2^63");
        }
        if self.backbone.seed > i64::MAX as u64 {
            err.push("backbone.seed", "must be below 2^63");
        }
        if let Some(d) = self.mode.pca_dim {
            if d == 0 {
                err.push("mode.pca_dim", "must be at least 1");
            }
        }
        err.into_result()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write_effective(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}
