//! Safetensors checkpoints holding student and teacher parameters plus the run
//! configuration that produced them.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{Dtype, SafeTensors, View};

use crate::config::RunConfig;
use crate::error::{Result, TeaError};
use crate::model::ModelConfig;
use crate::params::ParamStore;

pub const FORMAT: &str = "tea-checkpoint";
pub const FORMAT_VERSION: &str = "1";

const STUDENT_PREFIX: &str = "student.";
const TEACHER_PREFIX: &str = "teacher.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: ModelConfig,
    pub config_hash: String,
    pub step: u64,
    pub best_ldiou: Option<f64>,
    pub student: BTreeMap<String, Tensor>,
    pub teacher: Option<BTreeMap<String, Tensor>>,
}

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> std::borrow::Cow<'_, [u8]> {
        std::borrow::Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_raw(t: &Tensor) -> Result<Raw> {
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F32 => (Dtype::F32, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(TeaError::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(Raw {
        dtype,
        shape: t.dims().to_vec(),
        bytes,
    })
}

fn from_view(view: &safetensors::tensor::TensorView<'_>) -> Result<Tensor> {
    let dtype = match view.dtype() {
        Dtype::F32 => DType::F32,
        Dtype::F64 => DType::F64,
        other => return Err(TeaError::Checkpoint(format!("unsupported stored dtype {other:?}"))),
    };
    Ok(Tensor::from_raw_buffer(view.data(), dtype, view.shape(), &Device::Cpu)?)
}

fn json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| TeaError::Checkpoint(e.to_string()))
}

fn meta<'a>(map: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| TeaError::Checkpoint(format!("metadata key `{key}` missing")))
}

impl Checkpoint {
    pub fn from_stores(
        config: &RunConfig,
        model: &ModelConfig,
        step: u64,
        best_ldiou: Option<f64>,
        student: &ParamStore,
        teacher: Option<&ParamStore>,
    ) -> Self {
        Checkpoint {
            config: config.clone(),
            model: model.clone(),
            config_hash: config.hash(),
            step,
            best_ldiou,
            student: student.tensors(),
            teacher: teacher.map(ParamStore::tensors),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut raws = Vec::new();
        for (name, t) in &self.student {
            raws.push((format!("{STUDENT_PREFIX}{name}"), to_raw(t)?));
        }
        for (name, t) in self.teacher.iter().flatten() {
            raws.push((format!("{TEACHER_PREFIX}{name}"), to_raw(t)?));
        }
        let mut metadata = HashMap::new();
        metadata.insert("format".to_string(), FORMAT.to_string());
        metadata.insert("version".to_string(), FORMAT_VERSION.to_string());
        metadata.insert("config".to_string(), json(&self.config)?);
        metadata.insert("model".to_string(), json(&self.model)?);
        metadata.insert("config_hash".to_string(), self.config_hash.clone());
        metadata.insert("step".to_string(), self.step.to_string());
        metadata.insert("best_ldiou".to_string(), json(&self.best_ldiou)?);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        safetensors::serialize_to_file(raws.iter().map(|(n, r)| (n.as_str(), r)), Some(metadata), path)
            .map_err(|e| TeaError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let bad = |e: safetensors::SafeTensorError| TeaError::Checkpoint(format!("{}: {e}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
        let metadata = header
            .metadata()
            .clone()
            .ok_or_else(|| TeaError::Checkpoint("checkpoint has no metadata".into()))?;
        if meta(&metadata, "format")? != FORMAT {
            return Err(TeaError::Checkpoint(format!("{} is not a {FORMAT} file", path.display())));
        }
        let version = meta(&metadata, "version")?;
        if version != FORMAT_VERSION {
            return Err(TeaError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let parse = |key: &str| -> Result<serde_json::Value> {
            serde_json::from_str(meta(&metadata, key)?).map_err(|e| TeaError::parse(path, e))
        };
        let config: RunConfig = serde_json::from_value(parse("config")?).map_err(|e| TeaError::parse(path, e))?;
        let model: ModelConfig = serde_json::from_value(parse("model")?).map_err(|e| TeaError::parse(path, e))?;
        let best_ldiou: Option<f64> =
            serde_json::from_value(parse("best_ldiou")?).map_err(|e| TeaError::parse(path, e))?;
        let config_hash = meta(&metadata, "config_hash")?.to_string();
        if config.hash() != config_hash {
            return Err(TeaError::Checkpoint("stored config does not match its hash".into()));
        }
        let step = meta(&metadata, "step")?
            .parse()
            .map_err(|e| TeaError::parse(path, e))?;

        let st = SafeTensors::deserialize(&bytes).map_err(bad)?;
        let mut student = BTreeMap::new();
        let mut teacher = BTreeMap::new();
        for (name, view) in st.tensors() {
            if let Some(rest) = name.strip_prefix(STUDENT_PREFIX) {
                student.insert(rest.to_string(), from_view(&view)?);
            } else if let Some(rest) = name.strip_prefix(TEACHER_PREFIX) {
                teacher.insert(rest.to_string(), from_view(&view)?);
            } else {
                return Err(TeaError::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }
        Ok(Checkpoint {
            config,
            model,
            config_hash,
            step,
            best_ldiou,
            student,
            teacher: (!teacher.is_empty()).then_some(teacher),
        })
    }

    pub fn student_store(&self) -> Result<ParamStore> {
        ParamStore::from_tensors(self.student.clone(), self.config.dtype()?)
    }

    pub fn teacher_store(&self) -> Result<Option<ParamStore>> {
        match &self.teacher {
            Some(t) => Ok(Some(ParamStore::from_tensors(t.clone(), self.config.dtype()?)?.duplicate(true)?)),
            None => Ok(None),
        }
    }
}
