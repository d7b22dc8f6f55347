use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{encode_temporal_position, zero_pad, ChannelStats, DatasetManifest, SitsSample};
use crate::error::{Result, TeaError};

pub const SAMPLES_DIR: &str = "samples";

/// Sidecar metadata stored next to each raw value file.
///
/// Either `day_offsets` or `dates` must be present; calendar dates are encoded
/// as whole days since the manifest start date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    /// `[T, C, H, W]` of the accompanying little-endian f32 file.
    pub shape: [usize; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day_offsets: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dates: Option<Vec<NaiveDate>>,
    pub valid_mask: Vec<bool>,
    /// Row-major `H × W` class map.
    pub labels: Vec<u16>,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplits {
    pub train: Vec<SitsSample>,
    pub val: Vec<SitsSample>,
    pub test: Vec<SitsSample>,
    pub stats: Option<ChannelStats>,
}

impl DatasetSplits {
    pub fn split(&self, name: &str) -> Result<&[SitsSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(TeaError::InvalidInput(format!("unknown split `{other}`"))),
        }
    }

    /// Standardizes every split with `stats`, or training-split statistics
    /// when none are given.
    pub fn normalize(&mut self, stats: Option<&ChannelStats>) -> Result<()> {
        let stats = match stats {
            Some(s) => s.clone(),
            None => ChannelStats::from_samples(&self.train)?,
        };
        for s in self.train.iter_mut().chain(&mut self.val).chain(&mut self.test) {
            stats.normalize(s);
        }
        self.stats = Some(stats);
        Ok(())
    }
}

fn value_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.f32"))
}

fn record_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

/// Writes `<id>.f32` (raw little-endian T,C,H,W) and `<id>.json` into `dir`.
pub fn write_sample(dir: &Path, sample: &SitsSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(sample.values.len() * 4);
    for v in &sample.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(value_path(dir, &sample.sample_id), bytes)?;
    let record = SampleRecord {
        sample_id: sample.sample_id.clone(),
        shape: sample.shape(),
        day_offsets: Some(sample.day_offsets.clone()),
        dates: None,
        valid_mask: sample.valid_mask.clone(),
        labels: sample.labels.clone(),
    };
    let json = serde_json::to_string(&record)
        .map_err(|e| TeaError::Config(format!("cannot serialize sample record: {e}")))?;
    fs::write(record_path(dir, &sample.sample_id), json)?;
    Ok(())
}

/// Reads one sample from its sidecar record and raw value file, without
/// padding or validation against a class count.
pub fn read_sample(record_file: &Path, start_date: NaiveDate) -> Result<SitsSample> {
    let text = fs::read_to_string(record_file).map_err(|e| TeaError::parse(record_file, e))?;
    let record: SampleRecord =
        serde_json::from_str(&text).map_err(|e| TeaError::parse(record_file, e))?;
    let dir = record_file.parent().unwrap_or(Path::new("."));
    let raw_path = value_path(dir, &record.sample_id);
    let raw = fs::read(&raw_path).map_err(|e| TeaError::parse(&raw_path, e))?;
    let [t, c, h, w] = record.shape;
    if raw.len() != t * c * h * w * 4 {
        return Err(TeaError::parse(
            &raw_path,
            format!("{} bytes do not match shape {:?}", raw.len(), record.shape),
        ));
    }
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let day_offsets = match (record.day_offsets, record.dates) {
        (Some(offsets), _) => offsets,
        (None, Some(dates)) => dates
            .into_iter()
            .map(|d| encode_temporal_position(d, start_date))
            .collect::<Result<_>>()
            .map_err(|e| TeaError::parse(record_file, e))?,
        (None, None) => {
            return Err(TeaError::parse(record_file, "record has neither day_offsets nor dates"))
        }
    };
    SitsSample::new(record.sample_id, record.shape, values, day_offsets, record.valid_mask, record.labels)
        .map_err(|e| TeaError::parse(record_file, e))
}

/// Loads, pads, validates and splits every sample under `<root>/samples`.
///
/// The split is a seeded shuffle of the sorted sample ids, so the same
/// manifest always yields the same assignment.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<DatasetSplits> {
    manifest.validate()?;
    let dir = Path::new(&manifest.root).join(SAMPLES_DIR);
    let mut records: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| TeaError::parse(&dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    records.sort();

    let mut samples = Vec::with_capacity(records.len());
    for path in &records {
        let raw = read_sample(path, manifest.start_date)?;
        if raw.channels != manifest.channels || raw.height != manifest.height || raw.width != manifest.width {
            return Err(TeaError::parse(
                path,
                format!(
                    "shape {:?} disagrees with manifest C={} H={} W={}",
                    raw.shape(),
                    manifest.channels,
                    manifest.height,
                    manifest.width
                ),
            ));
        }
        let mut sample = zero_pad(&raw, manifest.padded_length, manifest.revisit_days)?;
        if let Some(keep) = manifest.truncate_length {
            sample = sample.slice_frames(0, keep)?;
        }
        sample.validate(manifest.num_classes)?;
        samples.push(sample);
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(manifest.seed));
    let (n_train, n_val, _) = manifest.split.counts(samples.len());
    let mut slots: Vec<Option<SitsSample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<SitsSample> {
        let mut picked: Vec<usize> = idx.to_vec();
        picked.sort_unstable();
        picked.iter().map(|&i| slots[i].take().expect("index used once")).collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(DatasetSplits {
        train,
        val,
        test,
        stats: manifest.normalization.clone(),
    })
}
