//! Temporal sub-sequence selection: random training crops, prefix crops at a
//! ratio ladder for evaluation, and sliding windows for the start×length sweep.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SitsSample;
use crate::error::{Result, TeaError};

const RATIO_EPS: f64 = 1e-9;

/// Number of frames kept for `ratio` of a `total`-frame sequence:
/// round-half-up of `ratio·total`, at least one frame.
pub fn frames_for_ratio(ratio: f64, total: usize) -> usize {
    let exact = ratio * total as f64;
    ((exact + 0.5 + RATIO_EPS).floor() as usize).clamp(1, total.max(1))
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 + RATIO_EPS {
        Ok(())
    } else {
        Err(TeaError::InvalidInput(format!("ratio {ratio} outside (0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub start_index: usize,
    pub length: usize,
    pub ratio: f64,
}

impl CropWindow {
    pub fn apply(&self, sample: &SitsSample) -> Result<SitsSample> {
        sample.slice_frames(self.start_index, self.length)
    }
}

/// Ascending ladder of evaluation ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSchedule {
    ratios: Vec<f64>,
}

impl Default for RatioSchedule {
    fn default() -> Self {
        RatioSchedule {
            ratios: (1..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl RatioSchedule {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if ratios.is_empty() {
            return Err(TeaError::InvalidInput("ratio schedule is empty".into()));
        }
        for r in &ratios {
            check_ratio(*r)?;
        }
        if ratios.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TeaError::InvalidInput(format!(
                "ratio schedule must be strictly increasing: {ratios:?}"
            )));
        }
        Ok(RatioSchedule { ratios })
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }
}

/// How training crops choose their start frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CropMode {
    /// Random ratio, always starting at frame 0.
    RatioOnly,
    /// Random ratio at a random start position.
    #[default]
    RatioAndStart,
}

/// Draws a ratio uniformly from `[min_ratio, 1]` and a start uniformly from
/// the valid starts. Retained frames keep their absolute day offsets.
pub fn random_crop<R: Rng + ?Sized>(
    sample: &SitsSample,
    rng: &mut R,
    min_ratio: f64,
    mode: CropMode,
) -> Result<(SitsSample, CropWindow)> {
    check_ratio(min_ratio)?;
    let window = random_window(sample.frames, rng, min_ratio, mode);
    Ok((window.apply(sample)?, window))
}

/// Window selection behind [`random_crop`], usable without a sample.
pub fn random_window<R: Rng + ?Sized>(total: usize, rng: &mut R, min_ratio: f64, mode: CropMode) -> CropWindow {
    if min_ratio >= 1.0 {
        return CropWindow {
            start_index: 0,
            length: total,
            ratio: 1.0,
        };
    }
    let ratio = rng.random_range(min_ratio..=1.0);
    let length = frames_for_ratio(ratio, total);
    let start_index = match mode {
        CropMode::RatioOnly => 0,
        CropMode::RatioAndStart => rng.random_range(0..=total - length),
    };
    CropWindow {
        start_index,
        length,
        ratio,
    }
}

/// Keeps the first `round(ratio·T)` frames.
pub fn prefix_crop(sample: &SitsSample, ratio: f64) -> Result<SitsSample> {
    prefix_window(sample.frames, ratio)?.apply(sample)
}

pub fn prefix_window(total: usize, ratio: f64) -> Result<CropWindow> {
    check_ratio(ratio)?;
    Ok(CropWindow {
        start_index: 0,
        length: frames_for_ratio(ratio, total),
        ratio,
    })
}

/// Windows of `length_ratio` starting at `0, step, 2·step, …` while the window
/// stays inside the sequence (in ratio space).
pub fn sliding_windows(total: usize, length_ratio: f64, step_ratio: f64) -> Vec<CropWindow> {
    if total == 0 || length_ratio <= 0.0 || length_ratio > 1.0 + RATIO_EPS || step_ratio <= 0.0 {
        return Vec::new();
    }
    let length = frames_for_ratio(length_ratio, total);
    let mut windows = Vec::new();
    for k in 0.. {
        let start_ratio = k as f64 * step_ratio;
        if start_ratio + length_ratio > 1.0 + RATIO_EPS {
            break;
        }
        let start_index = ((start_ratio * total as f64 + 0.5 + RATIO_EPS).floor() as usize).min(total - length);
        windows.push(CropWindow {
            start_index,
            length,
            ratio: length_ratio,
        });
    }
    windows
}
