//! Full segmentation model: backbone plus optional prototype bank and
//! reconstruction decoder, and the padded batch representation it consumes.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Confidence, SpatialOutput, TemporalOutput};
use crate::data::SitsSample;
use crate::error::{Result, TeaError};
use crate::params::ParamStore;
use crate::prototype::{PrototypeBank, PrototypeConfig};
use crate::reconstruction::{ReconDecoder, ReconDecoderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub prototype: PrototypeConfig,
    pub reconstruction: ReconDecoderConfig,
}

/// Samples stacked along a batch axis. Sequences shorter than the longest one
/// are padded with invalid frames, which attention never sees.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, T, C, H, W)`
    pub values: Tensor,
    /// `(B, T)` u32
    pub day_offsets: Tensor,
    /// `(B, T)`: 1 valid, 0 invalid.
    pub valid: Tensor,
    /// `(B, T)`: 0 valid, −∞ invalid.
    pub frame_bias: Tensor,
    /// `(B, H, W)` u32
    pub labels: Tensor,
    pub valid_frames: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[SitsSample], dtype: DType, device: &Device) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| TeaError::InvalidInput("empty batch".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let t_max = samples.iter().map(|s| s.frames).max().unwrap_or(0);
        let b = samples.len();
        let frame_len = c * h * w;
        let mut values = vec![0f32; b * t_max * frame_len];
        let mut days = vec![0u32; b * t_max];
        let mut valid = vec![0f32; b * t_max];
        let mut bias = vec![f32::NEG_INFINITY; b * t_max];
        let mut labels = Vec::with_capacity(b * h * w);
        let mut valid_frames = Vec::with_capacity(b);
        for (i, s) in samples.iter().enumerate() {
            if (s.channels, s.height, s.width) != (c, h, w) {
                return Err(TeaError::Shape(format!(
                    "sample {} has shape {:?}, batch expects C={c} H={h} W={w}",
                    s.sample_id,
                    s.shape()
                )));
            }
            let base = i * t_max * frame_len;
            values[base..base + s.values.len()].copy_from_slice(&s.values);
            let last_day = s.day_offsets.last().copied().unwrap_or(0);
            for t in 0..t_max {
                let j = i * t_max + t;
                if t < s.frames {
                    days[j] = s.day_offsets[t];
                    if s.valid_mask[t] {
                        valid[j] = 1.0;
                        bias[j] = 0.0;
                    }
                } else {
                    days[j] = last_day;
                }
            }
            labels.extend(s.labels.iter().map(|l| *l as u32));
            valid_frames.push(s.valid_frames());
        }
        Ok(Batch {
            values: Tensor::from_vec(values, (b, t_max, c, h, w), device)?.to_dtype(dtype)?,
            day_offsets: Tensor::from_vec(days, (b, t_max), device)?,
            valid: Tensor::from_vec(valid, (b, t_max), device)?.to_dtype(dtype)?,
            frame_bias: Tensor::from_vec(bias, (b, t_max), device)?.to_dtype(dtype)?,
            labels: Tensor::from_vec(labels, (b, h, w), device)?,
            valid_frames,
        })
    }

    pub fn size(&self) -> usize {
        self.valid_frames.len()
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub temporal: TemporalOutput,
    pub spatial: SpatialOutput,
    /// `(B, N, K)` prototype similarity, when the bank is enabled.
    pub similarity: Option<Tensor>,
    /// `(B, K, H, W)`
    pub logits: Tensor,
    /// `(B, T, C, H, W)`, when requested and the decoder is enabled.
    pub reconstruction: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TeaModel {
    config: ModelConfig,
    backbone: Backbone,
    prototypes: Option<PrototypeBank>,
    decoder: Option<ReconDecoder>,
}

impl TeaModel {
    /// Builds the model, creating missing parameters in `store`.
    pub fn new(config: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        let backbone = Backbone::new(&config.backbone, store)?;
        let prototypes = if config.prototype.enabled {
            Some(PrototypeBank::new(
                store,
                config.backbone.num_classes,
                config.backbone.embed_dim,
                &config.prototype,
            )?)
        } else {
            None
        };
        let decoder = if config.reconstruction.enabled {
            Some(ReconDecoder::new(store, &config.backbone, &config.reconstruction)?)
        } else {
            None
        };
        let unused = store.unused();
        if !unused.is_empty() {
            return Err(TeaError::Checkpoint(format!(
                "parameters not used by this model configuration: {unused:?}"
            )));
        }
        Ok(TeaModel {
            config: config.clone(),
            backbone,
            prototypes,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn prototypes(&self) -> Option<&PrototypeBank> {
        self.prototypes.as_ref()
    }

    pub fn forward(&self, batch: &Batch, reconstruct: bool) -> Result<ModelOutput> {
        let grid = self.backbone.tokenize(&batch.values)?;
        let temporal = self
            .backbone
            .temporal_encode(&grid, &batch.day_offsets, &batch.frame_bias)?;
        let spatial = self.backbone.spatial_encode(&temporal.class_tokens)?;
        let similarity = match &self.prototypes {
            Some(bank) => Some(bank.similarity_map_masked(
                &temporal.sequence_tokens,
                &batch.day_offsets,
                &batch.valid,
            )?),
            None => None,
        };
        let confidence = match (&self.prototypes, &similarity) {
            (Some(bank), Some(sim)) => Some(Confidence {
                similarity: sim,
                scale: bank.scale(),
            }),
            _ => None,
        };
        let logits = self.backbone.segment(&spatial.dense_tokens, confidence)?;
        let reconstruction = match (&self.decoder, reconstruct) {
            (Some(dec), true) => Some(dec.reconstruct(&temporal.sequence_tokens)?),
            _ => None,
        };
        Ok(ModelOutput {
            temporal,
            spatial,
            similarity,
            logits,
            reconstruction,
        })
    }

    /// Per-pixel argmax class maps, one `H·W` vector per sample.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Vec<u32>>> {
        let logits = self.forward(batch, false)?.logits;
        let (b, _, h, w) = logits.dims4()?;
        let pred = logits.argmax(1)?.reshape((b, h * w))?;
        Ok(pred.to_vec2::<u32>()?)
    }
}
