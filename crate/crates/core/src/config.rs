//! Run configuration: a sectioned TOML file whose every field can be
//! overridden through `TEA_<SECTION>_<KEY>` environment variables.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::cropping::{CropMode, RatioSchedule};
use crate::data::DatasetManifest;
use crate::distillation::DecaySchedule;
use crate::error::{Result, TeaError};
use crate::model::ModelConfig;
use crate::prototype::PrototypeConfig;
use crate::reconstruction::ReconDecoderConfig;

const ENV_PREFIX: &str = "TEA_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    /// `f32` or `f64`.
    pub precision: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: "tea".into(),
            seed: 0,
            precision: "f32".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Corpus manifest file or directory.
    pub manifest: PathBuf,
    /// Standardize channels with the manifest statistics.
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: PathBuf::from("data/synthetic"),
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub temporal_depth: usize,
    pub spatial_depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub patch_size: usize,
    pub prototypes: bool,
    pub prototype_slots: usize,
    /// Days covered by one prototype slot.
    pub prototype_slot_span: u32,
    pub reconstruction: bool,
    pub reconstruction_hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 32,
            temporal_depth: 2,
            spatial_depth: 2,
            heads: 4,
            mlp_hidden: 64,
            patch_size: 2,
            prototypes: true,
            prototype_slots: 24,
            prototype_slot_span: 15,
            reconstruction: true,
            reconstruction_hidden: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub start_lr: f64,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub validation_interval: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 100,
            batch_size: 128,
            warmup_epochs: 10.0,
            start_lr: 1e-8,
            peak_lr: 1e-3,
            floor_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            validation_interval: 500,
            eval_batch_size: 32,
        }
    }
}

/// Loss weights and the soft-label temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub ce: f64,
    pub temporal: f64,
    pub spatial: f64,
    pub prototype: f64,
    pub reconstruction: f64,
    pub soft_label: f64,
    pub temperature: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            ce: 1.0,
            temporal: 1.0,
            spatial: 1.0,
            prototype: 1.0,
            reconstruction: 1.0,
            soft_label: 1.0,
            temperature: 1.0,
        }
    }
}

impl LossSection {
    /// True when some loss needs the teacher's forward pass.
    pub fn needs_teacher(&self) -> bool {
        self.temporal > 0.0 || self.spatial > 0.0 || self.prototype > 0.0 || self.soft_label > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaSection {
    pub warmup_fraction: f64,
    pub warmup_start: f64,
    pub warmup_end: f64,
    pub final_decay: f64,
}

impl Default for EmaSection {
    fn default() -> Self {
        let d = DecaySchedule::new(0);
        EmaSection {
            warmup_fraction: d.warmup_fraction,
            warmup_start: d.warmup_start,
            warmup_end: d.warmup_end,
            final_decay: d.final_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropSection {
    /// Smallest training crop ratio; 1 disables cropping.
    pub min_ratio: f64,
    pub mode: CropMode,
}

impl Default for CropSection {
    fn default() -> Self {
        CropSection {
            min_ratio: 0.1,
            mode: CropMode::RatioAndStart,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ratios: Vec<f64>,
    pub sweep_lengths: Vec<f64>,
    pub sweep_step: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ratios: RatioSchedule::default().ratios().to_vec(),
            sweep_lengths: vec![0.1, 0.3, 0.5],
            sweep_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            output_dir: PathBuf::from("runs/tea"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub ema: EmaSection,
    pub crop: CropSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// The plain supervised configuration: no cropping, no auxiliary modules,
    /// no distillation.
    pub fn baseline() -> Self {
        let mut cfg = RunConfig::default();
        cfg.run.name = "baseline".into();
        cfg.model.prototypes = false;
        cfg.model.reconstruction = false;
        cfg.loss = LossSection {
            ce: 1.0,
            temporal: 0.0,
            spatial: 0.0,
            prototype: 0.0,
            reconstruction: 0.0,
            soft_label: 0.0,
            temperature: 1.0,
        };
        cfg.crop.min_ratio = 1.0;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, std::iter::empty(), Path::new("<string>"))
    }

    /// Reads `path` and applies `TEA_*` variables from the process environment.
    /// Relative manifest and output paths are taken from the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TeaError::parse(path, e))?;
        let mut cfg = Self::from_toml_with_overrides(&text, std::env::vars(), path)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.data.manifest, &mut cfg.paths.output_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Parses `text` after applying `(name, value)` overrides of the form
    /// `TEA_<SECTION>_<KEY>`. Other names are ignored.
    pub fn from_toml_with_overrides(
        text: &str,
        vars: impl IntoIterator<Item = (String, String)>,
        origin: &Path,
    ) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| TeaError::parse(origin, e))?;
        let sections = Self::section_names();
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let rest = rest.to_ascii_lowercase();
            let Some(section) = sections.iter().find(|s| rest.starts_with(&format!("{s}_"))) else {
                continue;
            };
            let key = &rest[section.len() + 1..];
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(sub) = entry else {
                return Err(TeaError::Config(format!("`{section}` is not a section")));
            };
            sub.insert(key.to_string(), parse_override(&value));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| TeaError::parse(origin, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn section_names() -> Vec<String> {
        match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TeaError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TeaError::Config(msg));
        let l = &self.loss;
        let weights = [l.ce, l.temporal, l.spatial, l.prototype, l.reconstruction, l.soft_label];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return bad(format!("loss weights must be finite and non-negative: {weights:?}"));
        }
        if !(l.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", l.temperature));
        }
        let t = &self.train;
        if !(t.peak_lr > t.floor_lr) || t.floor_lr < 0.0 || t.start_lr < 0.0 {
            return bad(format!("need peak_lr > floor_lr >= 0, got {} and {}", t.peak_lr, t.floor_lr));
        }
        if t.batch_size == 0 || t.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if t.validation_interval == 0 {
            return bad("validation_interval must be positive".into());
        }
        if t.warmup_epochs < 0.0 {
            return bad("warmup_epochs must be non-negative".into());
        }
        if !(self.crop.min_ratio > 0.0) {
            return bad(format!("crop.min_ratio must be positive, got {}", self.crop.min_ratio));
        }
        if !self.model.prototypes && l.prototype > 0.0 {
            return bad("prototype loss weight requires model.prototypes".into());
        }
        if !self.model.reconstruction && l.reconstruction > 0.0 {
            return bad("reconstruction loss weight requires model.reconstruction".into());
        }
        self.dtype()?;
        self.decay_schedule(1).validate()?;
        RatioSchedule::new(self.eval.ratios.clone())?;
        if self.eval.sweep_lengths.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return bad("sweep lengths must lie in (0, 1]".into());
        }
        if !(self.eval.sweep_step > 0.0 && self.eval.sweep_step <= 1.0) {
            return bad("sweep step must lie in (0, 1]".into());
        }
        Ok(())
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.run.precision.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(TeaError::Config(format!("unsupported precision `{other}`"))),
        }
    }

    pub fn decay_schedule(&self, total_steps: u64) -> DecaySchedule {
        DecaySchedule {
            warmup_fraction: self.ema.warmup_fraction,
            warmup_start: self.ema.warmup_start,
            warmup_end: self.ema.warmup_end,
            final_decay: self.ema.final_decay,
            total_steps,
        }
    }

    /// Model geometry from the model section and the corpus description.
    pub fn model_config(&self, manifest: &DatasetManifest) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            backbone: BackboneConfig {
                image_height: manifest.height,
                image_width: manifest.width,
                channels: manifest.channels,
                patch_height: m.patch_size,
                patch_width: m.patch_size,
                embed_dim: m.embed_dim,
                temporal_depth: m.temporal_depth,
                spatial_depth: m.spatial_depth,
                heads: m.heads,
                mlp_hidden: m.mlp_hidden,
                num_classes: manifest.num_classes,
                max_day_offset: manifest.max_day_offset() as usize,
            },
            prototype: PrototypeConfig {
                enabled: m.prototypes,
                slots: m.prototype_slots,
                slot_span: m.prototype_slot_span,
            },
            reconstruction: ReconDecoderConfig {
                enabled: m.reconstruction,
                hidden: m.reconstruction_hidden.clone(),
            },
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Interprets an override as a TOML value, falling back to a plain string.
fn parse_override(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
