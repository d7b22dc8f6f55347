//! Factorized temporal-then-spatial vision transformer.
//!
//! Each `h×w` patch of each frame becomes a token. The temporal encoder sees,
//! per patch, `K` learned class tokens followed by the frame tokens (plus a
//! day-offset position embedding) and keeps the `K` class outputs. The spatial
//! encoder then runs one stream per class over the patch grid with its own
//! class token. The head projects every dense token to `h·w` logits.
//!
//! All tensors carry a leading batch axis `B`; the per-sample layouts are the
//! trailing axes.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeaError};
use crate::nn::{Encoder, Linear};
use crate::params::{Init, ParamStore, INIT_STD};
use crate::prototype::apply_confidence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub embed_dim: usize,
    pub temporal_depth: usize,
    pub spatial_depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    /// Rows of the temporal position table; every day offset must be below it.
    pub max_day_offset: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_height == 0
            || self.patch_width == 0
            || !self.image_height.is_multiple_of(self.patch_height)
            || !self.image_width.is_multiple_of(self.patch_width)
        {
            return Err(TeaError::Config(format!(
                "{}x{} image is not divisible into {}x{} patches",
                self.image_height, self.image_width, self.patch_height, self.patch_width
            )));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(TeaError::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.num_classes == 0 || self.channels == 0 || self.max_day_offset == 0 {
            return Err(TeaError::Config("classes, channels and day table must be non-empty".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_height, self.image_width / self.patch_width)
    }

    pub fn num_patches(&self) -> usize {
        let (nh, nw) = self.grid();
        nh * nw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_height * self.patch_width * self.channels
    }
}

/// Patch tokens, `(B, N_h·N_w, T, d)`.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
}

#[derive(Debug, Clone)]
pub struct TemporalOutput {
    /// `(B, N_h·N_w, K, d)`
    pub class_tokens: Tensor,
    /// `(B, N_h·N_w, T_s, d)`
    pub sequence_tokens: Tensor,
}

#[derive(Debug, Clone)]
pub struct SpatialOutput {
    /// `(B, K, N_h·N_w + 1, d)`: class token first, then the patch tokens.
    pub tokens: Tensor,
    /// `(B, K, 1, d)`
    pub global_tokens: Tensor,
    /// `(B, K, N_h·N_w, d)`
    pub dense_tokens: Tensor,
}

/// Scaled class confidence added to the per-patch class scores.
#[derive(Debug, Clone, Copy)]
pub struct Confidence<'a> {
    /// `(B, N_h·N_w, K)`
    pub similarity: &'a Tensor,
    /// Scalar (one-element) scale.
    pub scale: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    patch_embed: Linear,
    temporal_pos: Tensor,
    temporal_cls: Tensor,
    temporal: Encoder,
    spatial_pos: Tensor,
    spatial_cls: Tensor,
    spatial: Encoder,
    head: Linear,
    classifier: Linear,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let k = config.num_classes;
        let n = config.num_patches();
        let p = "backbone";
        Ok(Backbone {
            config: config.clone(),
            patch_embed: Linear::new(store, &format!("{p}.patch_embed"), config.patch_dim(), d, true)?,
            temporal_pos: store.param(
                &format!("{p}.temporal_pos"),
                &[config.max_day_offset, d],
                Init::TruncNormal(INIT_STD),
            )?,
            temporal_cls: store.param(&format!("{p}.temporal_cls"), &[k, d], Init::TruncNormal(INIT_STD))?,
            temporal: Encoder::new(
                store,
                &format!("{p}.temporal"),
                config.temporal_depth,
                d,
                config.heads,
                config.mlp_hidden,
            )?,
            spatial_pos: store.param(&format!("{p}.spatial_pos"), &[n, d], Init::TruncNormal(INIT_STD))?,
            spatial_cls: store.param(&format!("{p}.spatial_cls"), &[k, d], Init::TruncNormal(INIT_STD))?,
            spatial: Encoder::new(
                store,
                &format!("{p}.spatial"),
                config.spatial_depth,
                d,
                config.heads,
                config.mlp_hidden,
            )?,
            head: Linear::new(
                store,
                &format!("{p}.head"),
                d,
                config.patch_height * config.patch_width,
                true,
            )?,
            classifier: Linear::new(store, &format!("{p}.classifier"), d, 1, true)?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `(B, T, C, H, W)` values to `(B, N, T, d)` patch tokens.
    pub fn tokenize(&self, values: &Tensor) -> Result<TokenGrid> {
        let cfg = &self.config;
        let (b, t, c, h, w) = values.dims5()?;
        if c != cfg.channels || h != cfg.image_height || w != cfg.image_width {
            return Err(TeaError::Config(format!(
                "input {:?} does not match configured C={} H={} W={}",
                values.dims(),
                cfg.channels,
                cfg.image_height,
                cfg.image_width
            )));
        }
        let (nh, nw) = cfg.grid();
        let (ph, pw) = (cfg.patch_height, cfg.patch_width);
        let patches = values
            .reshape((b * t, c, nh, ph, nw, pw))?
            .permute((0, 2, 4, 3, 5, 1))?
            .reshape((b, t, nh * nw, cfg.patch_dim()))?
            .transpose(1, 2)?
            .contiguous()?;
        Ok(TokenGrid {
            tokens: self.patch_embed.forward(&patches)?,
        })
    }

    /// Runs the temporal encoder.
    ///
    /// `day_offsets` is a `(B, T)` u32 tensor; `frame_bias` is `(B, T)` with 0
    /// for valid frames and −∞ for frames that must not be attended to.
    pub fn temporal_encode(&self, grid: &TokenGrid, day_offsets: &Tensor, frame_bias: &Tensor) -> Result<TemporalOutput> {
        let (b, n, t, d) = grid.tokens.dims4()?;
        let k = self.config.num_classes;
        let max_day = day_offsets.flatten_all()?.max(0)?.to_scalar::<u32>()? as usize;
        if max_day >= self.config.max_day_offset {
            return Err(TeaError::Index(format!(
                "day offset {max_day} outside temporal position table of size {}",
                self.config.max_day_offset
            )));
        }
        let pos = self
            .temporal_pos
            .index_select(&day_offsets.flatten_all()?, 0)?
            .reshape((b, 1, t, d))?;
        let frames = grid.tokens.broadcast_add(&pos)?;
        let cls = self.temporal_cls.reshape((1, 1, k, d))?.broadcast_as((b, n, k, d))?;
        let input = Tensor::cat(&[&cls, &frames], 2)?.reshape((b * n, k + t, d))?;
        let cls_bias = Tensor::zeros((b, k), frame_bias.dtype(), frame_bias.device())?;
        let key_bias = Tensor::cat(&[&cls_bias, frame_bias], 1)?.reshape((b, 1, 1, k + t))?;
        let out = self.temporal.forward(&input, Some(&key_bias))?.reshape((b, n, k + t, d))?;
        Ok(TemporalOutput {
            class_tokens: out.narrow(2, 0, k)?,
            sequence_tokens: out.narrow(2, k, t)?,
        })
    }

    /// `(B, N, K, d)` temporal class tokens to per-class spatial streams.
    pub fn spatial_encode(&self, class_tokens: &Tensor) -> Result<SpatialOutput> {
        let (b, n, k, d) = class_tokens.dims4()?;
        if n != self.config.num_patches() || k != self.config.num_classes || d != self.config.embed_dim {
            return Err(TeaError::Shape(format!(
                "spatial input {:?} does not match (B, {}, {}, {})",
                class_tokens.dims(),
                self.config.num_patches(),
                self.config.num_classes,
                self.config.embed_dim
            )));
        }
        let streams = class_tokens.transpose(1, 2)?.broadcast_add(&self.spatial_pos)?;
        let cls = self.spatial_cls.reshape((1, k, 1, d))?.broadcast_as((b, k, 1, d))?;
        let input = Tensor::cat(&[&cls, &streams], 2)?.reshape((b * k, n + 1, d))?;
        let tokens = self.spatial.forward(&input, None)?.reshape((b, k, n + 1, d))?;
        Ok(SpatialOutput {
            global_tokens: tokens.narrow(2, 0, 1)?,
            dense_tokens: tokens.narrow(2, 1, n)?,
            tokens,
        })
    }

    /// Dense tokens `(B, K, N, d)` to pixel logits `(B, K, H, W)`.
    pub fn segment(&self, dense_tokens: &Tensor, confidence: Option<Confidence<'_>>) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, k, n, _) = dense_tokens.dims4()?;
        let mut scores = self.head.forward(dense_tokens)?;
        if let Some(conf) = confidence {
            let sim = conf.similarity.transpose(1, 2)?.unsqueeze(3)?;
            scores = apply_confidence(&scores, &sim, conf.scale)?;
        }
        let (nh, nw) = cfg.grid();
        debug_assert_eq!(n, nh * nw);
        Ok(scores
            .reshape((b * k, nh, nw, cfg.patch_height, cfg.patch_width))?
            .permute((0, 1, 3, 2, 4))?
            .reshape((b, k, cfg.image_height, cfg.image_width))?)
    }

    /// Per-class image-level logits `(B, K)` from the global tokens.
    pub fn classify(&self, global_tokens: &Tensor) -> Result<Tensor> {
        Ok(self.classifier.forward(global_tokens)?.flatten_from(1)?)
    }

    pub fn dtype(&self) -> DType {
        self.temporal_pos.dtype()
    }
}
