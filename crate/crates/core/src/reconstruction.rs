//! Auxiliary decoder that maps per-frame temporal tokens back to pixels.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Result, TeaError};
use crate::nn::Linear;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconDecoderConfig {
    pub enabled: bool,
    /// Hidden widths between the token and the `h·w·C` patch output.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl Default for ReconDecoderConfig {
    fn default() -> Self {
        ReconDecoderConfig {
            enabled: true,
            hidden: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconDecoder {
    layers: Vec<Linear>,
    geometry: BackboneConfig,
}

impl ReconDecoder {
    pub fn new(store: &mut ParamStore, backbone: &BackboneConfig, config: &ReconDecoderConfig) -> Result<Self> {
        let mut widths = vec![backbone.embed_dim];
        widths.extend(&config.hidden);
        widths.push(backbone.patch_dim());
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("decoder.layers.{i}"), w[0], w[1], true))
            .collect::<Result<_>>()?;
        Ok(ReconDecoder {
            layers,
            geometry: backbone.clone(),
        })
    }

    /// Sequence tokens `(B, N, T, d)` to reconstructed values `(B, T, C, H, W)`.
    pub fn reconstruct(&self, sequence_tokens: &Tensor) -> Result<Tensor> {
        let g = &self.geometry;
        let (b, n, t, d) = sequence_tokens.dims4()?;
        if n != g.num_patches() || d != g.embed_dim {
            return Err(TeaError::Config(format!(
                "token grid {:?} does not match decoder geometry ({} patches, d={})",
                sequence_tokens.dims(),
                g.num_patches(),
                g.embed_dim
            )));
        }
        let mut x = sequence_tokens.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i < last {
                x = x.gelu_erf()?;
            }
        }
        let (nh, nw) = g.grid();
        Ok(x
            .transpose(1, 2)?
            .reshape((b * t, nh, nw, g.patch_height, g.patch_width, g.channels))?
            .permute((0, 5, 1, 3, 2, 4))?
            .reshape((b, t, g.channels, g.image_height, g.image_width))?)
    }
}

/// Mean squared error over valid frames of `(B, T, C, H, W)` tensors.
///
/// `valid` is `(B, T)` with 1 for frames that count. Returns zero when no
/// frame is valid.
pub fn reconstruction_loss(original: &Tensor, reconstructed: &Tensor, valid: &Tensor) -> Result<Tensor> {
    if original.dims() != reconstructed.dims() {
        return Err(TeaError::Shape(format!(
            "original {:?} vs reconstruction {:?}",
            original.dims(),
            reconstructed.dims()
        )));
    }
    let (b, t, c, h, w) = original.dims5()?;
    let valid = valid.to_dtype(original.dtype())?;
    if valid.dims() != [b, t] {
        return Err(TeaError::Shape(format!("valid mask {:?} vs (B, T) = ({b}, {t})", valid.dims())));
    }
    let frames = valid.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    let diff = (reconstructed - original)?.broadcast_mul(&valid.reshape((b, t, 1, 1, 1))?)?;
    let denom = (frames * (c * h * w) as f64).max(1.0);
    Ok((diff.sqr()?.sum_all()? / denom)?)
}
