use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{write_sample, SAMPLES_DIR};
use super::{ChannelStats, DatasetManifest, SitsSample, SplitRatios, MANIFEST_FILE};
use crate::error::{Result, TeaError};

/// Double-logistic seasonal reflectance curve of one crop class.
///
/// `value(c, day) = base[c] + amplitude[c] · (σ(growth·(day − onset)) − σ(decay·(day − senescence)))`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenologyClassSpec {
    pub name: String,
    /// Relative frequency with which a parcel receives this class.
    pub prior: f64,
    pub onset_day: f64,
    pub senescence_day: f64,
    pub growth_rate: f64,
    pub decay_rate: f64,
    pub base: Vec<f64>,
    pub amplitude: Vec<f64>,
    /// Per-pixel Gaussian noise.
    pub noise_std: f64,
    /// Parcels shift onset and senescence by a uniform draw in ±jitter days.
    #[serde(default)]
    pub onset_jitter_days: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PhenologyClassSpec {
    pub fn value(&self, channel: usize, day: f64, shift: f64) -> f64 {
        let up = sigmoid(self.growth_rate * (day - self.onset_day - shift));
        let down = sigmoid(self.decay_rate * (day - self.senescence_day - shift));
        self.base[channel] + self.amplitude[channel] * (up - down)
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let finite = self
            .base
            .iter()
            .chain(&self.amplitude)
            .chain([&self.onset_day, &self.senescence_day, &self.growth_rate, &self.decay_rate])
            .all(|v| v.is_finite());
        if !finite {
            return Err(TeaError::Config(format!("class `{}` has non-finite parameters", self.name)));
        }
        if self.onset_day >= self.senescence_day {
            return Err(TeaError::Config(format!(
                "class `{}`: onset day must precede senescence day",
                self.name
            )));
        }
        if self.base.len() != channels || self.amplitude.len() != channels {
            return Err(TeaError::Config(format!(
                "class `{}` needs {channels} base and amplitude entries",
                self.name
            )));
        }
        if !(self.prior >= 0.0 && self.prior.is_finite()) || self.noise_std < 0.0 || self.onset_jitter_days < 0.0 {
            return Err(TeaError::Config(format!("class `{}`: negative prior, noise or jitter", self.name)));
        }
        Ok(())
    }
}

/// Geometry, calendar and class catalogue of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub start_date: NaiveDate,
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub channels: usize,
    pub revisit_days: u32,
    /// Backbone patch size the corpus must be divisible by.
    pub patch_size: usize,
    /// Parcels are Voronoi cells around a jittered `n × n` grid of seeds.
    pub parcels_per_side: usize,
    /// Probability that a whole frame is lost (cloud, outage).
    pub dropout_prob: f64,
    #[serde(default)]
    pub split: SplitRatios,
    pub classes: Vec<PhenologyClassSpec>,
}

impl SyntheticConfig {
    /// K=4, 200 samples of 16×16 pixels, 24 frames every 15 days, 4 bands.
    pub fn desk_default() -> Self {
        let class = |name: &str, onset: f64, senescence: f64, base: [f64; 4], amplitude: [f64; 4]| {
            PhenologyClassSpec {
                name: name.to_string(),
                prior: 0.25,
                onset_day: onset,
                senescence_day: senescence,
                growth_rate: 0.08,
                decay_rate: 0.06,
                base: base.to_vec(),
                amplitude: amplitude.to_vec(),
                noise_std: 0.03,
                onset_jitter_days: 15.0,
            }
        };
        SyntheticConfig {
            start_date: NaiveDate::from_ymd_opt(2018, 9, 1).expect("valid date"),
            n_samples: 200,
            height: 16,
            width: 16,
            frames: 24,
            channels: 4,
            revisit_days: 15,
            patch_size: 2,
            parcels_per_side: 4,
            dropout_prob: 0.1,
            split: SplitRatios::default(),
            classes: vec![
                class("background", 100.0, 250.0, [0.10, 0.12, 0.15, 0.20], [0.01, 0.01, 0.02, 0.01]),
                class("winter", 60.0, 210.0, [0.11, 0.11, 0.17, 0.18], [-0.04, -0.05, 0.30, 0.05]),
                class("spring", 130.0, 250.0, [0.10, 0.13, 0.14, 0.19], [-0.03, -0.04, 0.35, 0.02]),
                class("summer", 190.0, 310.0, [0.09, 0.12, 0.15, 0.22], [-0.02, -0.06, 0.28, -0.03]),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(TeaError::Config("at least two classes are required".into()));
        }
        if self.patch_size == 0 || !self.height.is_multiple_of(self.patch_size) || !self.width.is_multiple_of(self.patch_size) {
            return Err(TeaError::Config(format!(
                "{}x{} image is not divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if self.frames == 0 || self.channels == 0 || self.parcels_per_side == 0 || self.revisit_days == 0 {
            return Err(TeaError::Config("frames, channels, parcels and revisit must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(TeaError::Config(format!("dropout probability {} outside [0,1]", self.dropout_prob)));
        }
        for class in &self.classes {
            class.validate(self.channels)?;
        }
        if self.classes.iter().map(|c| c.prior).sum::<f64>() <= 0.0 {
            return Err(TeaError::Config("class priors sum to zero".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TeaError::parse(path, e))?;
        let config: SyntheticConfig = toml::from_str(&text).map_err(|e| TeaError::parse(path, e))?;
        config.validate()?;
        Ok(config)
    }
}

fn parcel_map(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = config.parcels_per_side;
    let cell_h = config.height as f64 / n as f64;
    let cell_w = config.width as f64 / n as f64;
    let seeds: Vec<(f64, f64)> = (0..n * n)
        .map(|i| {
            let (gy, gx) = ((i / n) as f64, (i % n) as f64);
            (
                (gy + rng.random_range(0.15..0.85)) * cell_h,
                (gx + rng.random_range(0.15..0.85)) * cell_w,
            )
        })
        .collect();
    let mut map = Vec::with_capacity(config.height * config.width);
    for y in 0..config.height {
        for x in 0..config.width {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let nearest = seeds
                .iter()
                .enumerate()
                .map(|(i, (sy, sx))| (i, (sy - py).powi(2) + (sx - px).powi(2)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                .0;
            map.push(nearest);
        }
    }
    map
}

fn generate_one(config: &SyntheticConfig, index: usize, seed: u64) -> Result<SitsSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parcels = parcel_map(config, &mut rng);
    let n_parcels = config.parcels_per_side * config.parcels_per_side;
    let priors = WeightedIndex::new(config.classes.iter().map(|c| c.prior))
        .map_err(|e| TeaError::Config(format!("invalid class priors: {e}")))?;
    let parcel_class: Vec<usize> = (0..n_parcels).map(|_| priors.sample(&mut rng)).collect();
    let parcel_shift: Vec<f64> = parcel_class
        .iter()
        .map(|&k| {
            let j = config.classes[k].onset_jitter_days;
            if j > 0.0 {
                rng.random_range(-j..=j)
            } else {
                0.0
            }
        })
        .collect();

    let (t_len, c_len, plane) = (config.frames, config.channels, config.height * config.width);
    let mut values = vec![0f32; t_len * c_len * plane];
    let mut valid_mask = Vec::with_capacity(t_len);
    let day_offsets: Vec<u32> = (0..t_len as u32).map(|t| t * config.revisit_days).collect();
    for (t, &day) in day_offsets.iter().enumerate() {
        let dropped = config.dropout_prob > 0.0 && rng.random::<f64>() < config.dropout_prob;
        valid_mask.push(!dropped);
        for c in 0..c_len {
            for p in 0..plane {
                let parcel = parcels[p];
                let class = &config.classes[parcel_class[parcel]];
                let noise = if class.noise_std > 0.0 {
                    Normal::new(0.0, class.noise_std).expect("finite std").sample(&mut rng)
                } else {
                    0.0
                };
                if !dropped {
                    let v = class.value(c, day as f64, parcel_shift[parcel]) + noise;
                    values[(t * c_len + c) * plane + p] = v as f32;
                }
            }
        }
    }
    let labels = parcels.iter().map(|&p| parcel_class[p] as u16).collect();
    SitsSample::new(
        format!("s{index:05}"),
        [t_len, c_len, config.height, config.width],
        values,
        day_offsets,
        valid_mask,
        labels,
    )
}

/// Generates the corpus in memory. Sample `i` depends only on `(config, seed, i)`.
pub fn generate_samples(config: &SyntheticConfig, seed: u64) -> Result<Vec<SitsSample>> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..config.n_samples).map(|_| master.random()).collect();
    seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| generate_one(config, i, s))
        .collect()
}

/// Writes a synthetic corpus (manifest, raw values and sidecar records) into
/// `out_dir`. Normalization statistics come from the training split.
pub fn generate_synthetic_dataset(
    config: &SyntheticConfig,
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let samples = generate_samples(config, seed)?;
    let samples_dir = out_dir.join(SAMPLES_DIR);
    std::fs::create_dir_all(&samples_dir)?;
    for sample in &samples {
        write_sample(&samples_dir, sample)?;
    }
    let mut manifest = DatasetManifest {
        root: ".".to_string(),
        num_classes: config.classes.len(),
        channels: config.channels,
        height: config.height,
        width: config.width,
        padded_length: config.frames,
        truncate_length: None,
        start_date: config.start_date,
        revisit_days: config.revisit_days,
        seed,
        split: config.split,
        normalization: None,
        class_names: config.classes.iter().map(|c| c.name.clone()).collect(),
    };
    manifest.validate()?;
    // Statistics are computed on exactly the split the loader will produce.
    let mut probe = manifest.clone();
    probe.root = out_dir.to_string_lossy().into_owned();
    let splits = super::load_dataset(&probe)?;
    manifest.normalization = Some(ChannelStats::from_samples(&splits.train)?);
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
