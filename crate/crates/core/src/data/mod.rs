//! Satellite image time series samples: ingestion, padding and the
//! synthetic phenology corpus used for desk-scale runs.

mod io;
mod synthetic;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeaError};

pub use io::{load_dataset, read_sample, write_sample, DatasetSplits, SampleRecord};
pub use synthetic::{
    generate_samples, generate_synthetic_dataset, PhenologyClassSpec, SyntheticConfig,
};

/// One multispectral image time series with its per-pixel class map.
///
/// `values` is laid out frame-major as `T × C × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SitsSample {
    pub sample_id: String,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub day_offsets: Vec<u32>,
    pub valid_mask: Vec<bool>,
    pub labels: Vec<u16>,
}

impl SitsSample {
    pub fn new(
        sample_id: impl Into<String>,
        shape: [usize; 4],
        values: Vec<f32>,
        day_offsets: Vec<u32>,
        valid_mask: Vec<bool>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let [frames, channels, height, width] = shape;
        let sample = SitsSample {
            sample_id: sample_id.into(),
            frames,
            channels,
            height,
            width,
            values,
            day_offsets,
            valid_mask,
            labels,
        };
        sample.check_layout()?;
        Ok(sample)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    /// Number of scalars in one frame (`C·H·W`).
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn valid_frames(&self) -> usize {
        self.valid_mask.iter().filter(|v| **v).count()
    }

    fn check_layout(&self) -> Result<()> {
        let expected = self.frames * self.frame_len();
        if self.values.len() != expected {
            return Err(TeaError::Shape(format!(
                "sample {}: {} values for shape {:?}",
                self.sample_id,
                self.values.len(),
                self.shape()
            )));
        }
        if self.day_offsets.len() != self.frames || self.valid_mask.len() != self.frames {
            return Err(TeaError::Shape(format!(
                "sample {}: per-frame vectors do not match T={}",
                self.sample_id, self.frames
            )));
        }
        if self.labels.len() != self.height * self.width {
            return Err(TeaError::Shape(format!(
                "sample {}: label map has {} entries, expected {}",
                self.sample_id,
                self.labels.len(),
                self.height * self.width
            )));
        }
        Ok(())
    }

    /// Checks every structural invariant of a sample against `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.check_layout()?;
        if let Some(bad) = self.labels.iter().find(|l| **l as usize >= num_classes) {
            return Err(TeaError::Validation(format!(
                "sample {}: label {bad} outside [0, {})",
                self.sample_id, num_classes
            )));
        }
        let mut last: Option<u32> = None;
        for (t, (&day, &valid)) in self.day_offsets.iter().zip(&self.valid_mask).enumerate() {
            if valid {
                if let Some(prev) = last {
                    if day <= prev {
                        return Err(TeaError::Validation(format!(
                            "sample {}: day offsets not strictly increasing at frame {t}",
                            self.sample_id
                        )));
                    }
                }
                last = Some(day);
            } else if self.frame(t).iter().any(|v| *v != 0.0) {
                return Err(TeaError::Validation(format!(
                    "sample {}: invalid frame {t} carries non-zero values",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }

    /// Contiguous run of frames `[start, start + len)`. Day offsets are kept
    /// as absolute positions.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<SitsSample> {
        if len == 0 || start + len > self.frames {
            return Err(TeaError::InvalidInput(format!(
                "frame window [{start}, {}) outside sequence of length {}",
                start + len,
                self.frames
            )));
        }
        let n = self.frame_len();
        Ok(SitsSample {
            sample_id: self.sample_id.clone(),
            frames: len,
            channels: self.channels,
            height: self.height,
            width: self.width,
            values: self.values[start * n..(start + len) * n].to_vec(),
            day_offsets: self.day_offsets[start..start + len].to_vec(),
            valid_mask: self.valid_mask[start..start + len].to_vec(),
            labels: self.labels.clone(),
        })
    }
}

/// Whole days elapsed between `start_date` and `date`.
pub fn encode_temporal_position(date: NaiveDate, start_date: NaiveDate) -> Result<u32> {
    let days = (date - start_date).num_days();
    if days < 0 {
        return Err(TeaError::InvalidInput(format!(
            "acquisition date {date} precedes start date {start_date}"
        )));
    }
    u32::try_from(days).map_err(|_| TeaError::InvalidInput(format!("day offset {days} too large")))
}

/// Appends all-zero, invalid frames until the sample has `target_len` frames.
///
/// Offsets of appended frames continue on the nominal revisit grid after the
/// last existing frame.
pub fn zero_pad(sample: &SitsSample, target_len: usize, revisit_days: u32) -> Result<SitsSample> {
    if sample.frames > target_len {
        return Err(TeaError::InvalidInput(format!(
            "sample {} has {} frames, longer than padded length {target_len}",
            sample.sample_id, sample.frames
        )));
    }
    let mut out = sample.clone();
    let missing = target_len - sample.frames;
    if missing == 0 {
        return Ok(out);
    }
    out.values.resize(target_len * sample.frame_len(), 0.0);
    let mut day = match sample.day_offsets.last() {
        Some(&d) => d,
        None => 0u32.wrapping_sub(revisit_days),
    };
    for _ in 0..missing {
        day = day.wrapping_add(revisit_days);
        out.day_offsets.push(day);
        out.valid_mask.push(false);
    }
    out.frames = target_len;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    /// Split sizes for `n` samples: train and val are rounded, test takes the rest.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((n as f64) * self.train).round() as usize;
        let val = (((n as f64) * self.val).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        (train, val, n - train - val)
    }
}

/// Per-channel standardization statistics, computed on valid training frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn from_samples(samples: &[SitsSample]) -> Result<Self> {
        let channels = samples
            .first()
            .map(|s| s.channels)
            .ok_or_else(|| TeaError::InvalidInput("no samples to compute statistics".into()))?;
        let mut sum = vec![0f64; channels];
        let mut sq = vec![0f64; channels];
        let mut count = vec![0usize; channels];
        for s in samples {
            let plane = s.height * s.width;
            for t in (0..s.frames).filter(|&t| s.valid_mask[t]) {
                for (c, chunk) in s.frame(t).chunks(plane).enumerate() {
                    for &v in chunk {
                        sum[c] += v as f64;
                        sq[c] += (v as f64) * (v as f64);
                    }
                    count[c] += plane;
                }
            }
        }
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for c in 0..channels {
            let n = count[c].max(1) as f64;
            let m = sum[c] / n;
            mean.push(m);
            std.push((sq[c] / n - m * m).max(0.0).sqrt().max(1e-6));
        }
        Ok(ChannelStats { mean, std })
    }

    /// Standardizes valid frames in place; padded frames stay exactly zero.
    pub fn normalize(&self, sample: &mut SitsSample) {
        let plane = sample.height * sample.width;
        let frame_len = sample.frame_len();
        for t in 0..sample.frames {
            if !sample.valid_mask[t] {
                continue;
            }
            let frame = &mut sample.values[t * frame_len..(t + 1) * frame_len];
            for (c, chunk) in frame.chunks_mut(plane).enumerate() {
                let (m, s) = (self.mean[c], self.std[c]);
                for v in chunk {
                    *v = ((*v as f64 - m) / s) as f32;
                }
            }
        }
    }
}

/// Describes an on-disk corpus. Serialized as `manifest.toml` in the corpus root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Corpus directory; relative paths resolve against the manifest file.
    pub root: String,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub padded_length: usize,
    /// Keep only the first frames after padding (e.g. 36 of 46).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncate_length: Option<usize>,
    pub start_date: NaiveDate,
    pub revisit_days: u32,
    pub seed: u64,
    pub split: SplitRatios,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<ChannelStats>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(TeaError::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let s = self.split;
        if [s.train, s.val, s.test].iter().any(|p| *p < 0.0) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(TeaError::Config(format!(
                "split proportions must be non-negative and sum to 1, got {s:?}"
            )));
        }
        if self.padded_length == 0 {
            return Err(TeaError::Config("padded_length must be positive".into()));
        }
        if let Some(t) = self.truncate_length {
            if t == 0 || t > self.padded_length {
                return Err(TeaError::Config(format!(
                    "truncate_length {t} must lie in [1, {}]",
                    self.padded_length
                )));
            }
        }
        Ok(())
    }

    /// Sequence length of every sample after ingestion.
    pub fn sequence_length(&self) -> usize {
        self.truncate_length.unwrap_or(self.padded_length)
    }

    /// Exclusive upper bound on day offsets produced by ingestion, padded
    /// frames included.
    pub fn max_day_offset(&self) -> u32 {
        // Real acquisitions span roughly the padded grid; leave one extra grid
        // span so irregular calendars never overflow the lookup table.
        2 * self.padded_length as u32 * self.revisit_days + 1
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&path).map_err(|e| TeaError::parse(&path, e))?;
        let mut manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| TeaError::parse(&path, e))?;
        let base = path.parent().unwrap_or(std::path::Path::new("."));
        let root = std::path::Path::new(&manifest.root);
        if root.is_relative() {
            manifest.root = base.join(root).to_string_lossy().into_owned();
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let text = toml::to_string(self)
            .map_err(|e| TeaError::Config(format!("cannot serialize manifest: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
