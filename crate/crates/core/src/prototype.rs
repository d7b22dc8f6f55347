//! Learnable temporal class prototypes.
//!
//! Every frame token is compared by cosine similarity with the prototype slot
//! of each class that covers the frame's acquisition day. Averaging those
//! cosines over the valid frames gives a per-patch class confidence that is
//! added to the segmentation scores.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeaError};
use crate::params::{Init, ParamStore, INIT_STD};

/// Lower bound on the cosine similarity denominator.
pub const COSINE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    pub enabled: bool,
    /// Temporal slots per class (`T_p`).
    pub slots: usize,
    /// Days covered by one slot.
    pub slot_span: u32,
}

#[derive(Debug, Clone)]
pub struct PrototypeBank {
    /// `(K, T_p, D)`
    prototypes: Tensor,
    /// One-element confidence scale.
    scale: Tensor,
    slot_span: u32,
}

impl PrototypeBank {
    pub fn new(store: &mut ParamStore, num_classes: usize, dim: usize, config: &PrototypeConfig) -> Result<Self> {
        if config.slots == 0 || config.slot_span == 0 {
            return Err(TeaError::Config("prototype bank needs at least one slot of positive span".into()));
        }
        Ok(PrototypeBank {
            prototypes: store.param(
                "prototype.bank",
                &[num_classes, config.slots, dim],
                Init::TruncNormal(INIT_STD),
            )?,
            scale: store.param("prototype.scale", &[1], Init::Ones)?,
            slot_span: config.slot_span,
        })
    }

    pub fn from_tensors(prototypes: Tensor, scale: Tensor, slot_span: u32) -> Self {
        PrototypeBank {
            prototypes,
            scale,
            slot_span,
        }
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn scale(&self) -> &Tensor {
        &self.scale
    }

    pub fn slots(&self) -> usize {
        self.prototypes.dims()[1]
    }

    /// `min(⌊day / slot_span⌋, T_p − 1)`
    pub fn slot_of(&self, day_offset: u32) -> u32 {
        (day_offset / self.slot_span).min(self.slots() as u32 - 1)
    }

    /// Per-patch class similarity `(B, N, K)` of sequence tokens `(B, N, T, D)`.
    ///
    /// `day_offsets` is `(B, T)` u32, `valid` is `(B, T)` with 1 for valid
    /// frames and 0 otherwise. Fails when a sample has no valid frame.
    pub fn similarity_map(&self, sequence_tokens: &Tensor, day_offsets: &Tensor, valid: &Tensor) -> Result<Tensor> {
        let counts: Vec<f64> = valid.to_dtype(DType::F64)?.sum(1)?.to_vec1()?;
        if let Some(b) = counts.iter().position(|c| *c <= 0.0) {
            return Err(TeaError::InvalidInput(format!(
                "sample {b} has no valid frame; similarity average is undefined"
            )));
        }
        self.similarity_map_masked(sequence_tokens, day_offsets, valid)
    }

    /// As [`Self::similarity_map`], but samples without any valid frame get an
    /// all-zero map instead of an error.
    pub fn similarity_map_masked(&self, sequence_tokens: &Tensor, day_offsets: &Tensor, valid: &Tensor) -> Result<Tensor> {
        let (b, _, t, d) = sequence_tokens.dims4()?;
        let k = self.prototypes.dims()[0];
        let days: Vec<u32> = day_offsets.flatten_all()?.to_vec1()?;
        let slots: Vec<u32> = days.iter().map(|d| self.slot_of(*d)).collect();
        let slots = Tensor::from_vec(slots, b * t, sequence_tokens.device())?;
        let selected = self
            .prototypes
            .index_select(&slots, 1)?
            .reshape((k, b, t, d))?
            .permute((1, 2, 0, 3))?
            .contiguous()?;
        cosine_confidence(sequence_tokens, &selected, valid)
    }
}

/// Cosine similarity between tokens `(B, N, T, D)` and the per-frame selected
/// prototypes `(B, T, K, D)`, averaged over valid frames to `(B, N, K)`.
pub fn cosine_confidence(tokens: &Tensor, selected: &Tensor, valid: &Tensor) -> Result<Tensor> {
    let (b, _, t, _) = tokens.dims4()?;
    let z = tokens.transpose(1, 2)?.contiguous()?;
    let dot = z.matmul(&selected.transpose(2, 3)?)?;
    let z_norm = z.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let p_norm = selected.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.transpose(2, 3)?;
    let denom = z_norm.broadcast_mul(&p_norm)?.maximum(COSINE_EPS)?;
    let cos = dot.broadcast_div(&denom)?;
    let valid = valid.to_dtype(tokens.dtype())?;
    let count = valid.sum_keepdim(1)?.clamp(1.0, f64::INFINITY)?;
    let weights = valid.broadcast_div(&count)?.reshape((b, t, 1, 1))?;
    Ok(cos.broadcast_mul(&weights)?.sum(1)?)
}

/// `scores + scale · similarity`, broadcasting `similarity` and `scale`.
pub fn apply_confidence(scores: &Tensor, similarity: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(scores.broadcast_add(&similarity.broadcast_mul(scale)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn bank(protos: Vec<f64>, k: usize, slots: usize, d: usize, span: u32) -> PrototypeBank {
        let dev = Device::Cpu;
        PrototypeBank::from_tensors(
            Tensor::from_vec(protos, (k, slots, d), &dev).unwrap(),
            Tensor::new(&[1.0f64], &dev).unwrap(),
            span,
        )
    }

    fn t4(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn days(v: Vec<u32>, b: usize) -> Tensor {
        let t = v.len() / b;
        Tensor::from_vec(v, (b, t), &Device::Cpu).unwrap()
    }

    fn ones(b: usize, t: usize) -> Tensor {
        Tensor::ones((b, t), DType::F64, &Device::Cpu).unwrap()
    }

    /// Direct evaluation: cosine per (frame, class) then mean over valid frames.
    fn brute_force(tokens: &[Vec<f64>], protos: &[Vec<Vec<f64>>], slots: &[usize], valid: &[bool]) -> Vec<f64> {
        let k = protos.len();
        (0..k)
            .map(|c| {
                let mut acc = 0.0;
                let mut n = 0.0;
                for (t, z) in tokens.iter().enumerate() {
                    if !valid[t] {
                        continue;
                    }
                    let p = &protos[c][slots[t]];
                    let dot: f64 = z.iter().zip(p).map(|(a, b)| a * b).sum();
                    let nz = z.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
                    acc += dot / (nz * np).max(COSINE_EPS);
                    n += 1.0;
                }
                acc / n
            })
            .collect()
    }

    #[test]
    fn hand_example_half() {
        // 1 patch, 2 frames, d=2; both frames map onto slot 0 prototype (1,0).
        let b = bank(vec![1.0, 0.0, 1.0, 0.0], 1, 2, 2, 100);
        let tokens = t4(vec![1.0, 0.0, 0.0, 1.0], (1, 1, 2, 2));
        let sim = b.similarity_map(&tokens, &days(vec![0, 5], 1), &ones(1, 2)).unwrap();
        let v = sim.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let oracle = brute_force(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![vec![1.0, 0.0], vec![1.0, 0.0]]], &[0, 0], &[true, true]);
        assert!((oracle[0] - 0.5).abs() < 1e-6);
        assert!((v[0] - oracle[0]).abs() < 1e-12);
    }

    #[test]
    fn identity_and_orthogonal() {
        let b = bank(vec![0.3, -0.4, 2.0, 1.0], 1, 2, 2, 10);
        // Frame days 3 and 12 hit slots 0 and 1; tokens equal those slots.
        let same = t4(vec![0.3, -0.4, 2.0, 1.0], (1, 1, 2, 2));
        let sim = b.similarity_map(&same, &days(vec![3, 12], 1), &ones(1, 2)).unwrap();
        assert!((sim.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0] - 1.0).abs() < 1e-5);
        let orth = t4(vec![0.4, 0.3, -1.0, 2.0], (1, 1, 2, 2));
        let sim = b.similarity_map(&orth, &days(vec![3, 12], 1), &ones(1, 2)).unwrap();
        assert!(sim.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0].abs() < 1e-12);
    }

    #[test]
    fn slots_saturate_at_last() {
        let b = bank(vec![0.0; 3 * 2], 1, 3, 2, 10);
        assert_eq!(b.slot_of(0), 0);
        assert_eq!(b.slot_of(19), 1);
        assert_eq!(b.slot_of(500), 2);
    }

    #[test]
    fn invalid_frames_are_ignored_and_empty_is_an_error() {
        let b = bank(vec![1.0, 0.0], 1, 1, 2, 10);
        let tokens = t4(vec![1.0, 0.0, -1.0, 0.0], (1, 1, 2, 2));
        let valid = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
        let sim = b.similarity_map(&tokens, &days(vec![0, 5], 1), &valid).unwrap();
        assert!((sim.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0] - 1.0).abs() < 1e-5);
        let none = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(b.similarity_map(&tokens, &days(vec![0, 5], 1), &none).is_err());
        let masked = b.similarity_map_masked(&tokens, &days(vec![0, 5], 1), &none).unwrap();
        assert_eq!(masked.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.0]);
    }

    #[test]
    fn matches_brute_force_on_random_input() {
        let dev = Device::Cpu;
        let (k, slots, d, n, t) = (3, 4, 5, 2, 6);
        let protos = Tensor::randn(0f64, 1.0, (k, slots, d), &dev).unwrap();
        let tokens = Tensor::randn(0f64, 1.0, (1, n, t, d), &dev).unwrap();
        let bank = PrototypeBank::from_tensors(protos.clone(), Tensor::new(&[1.0f64], &dev).unwrap(), 7);
        let day_list: Vec<u32> = vec![0, 6, 7, 15, 22, 40];
        let valid_list = [true, false, true, true, true, false];
        let valid = Tensor::new(&[valid_list.map(|v| v as u8 as f64)], &dev).unwrap();
        let sim = bank.similarity_map(&tokens, &days(day_list.clone(), 1), &valid).unwrap();
        let sim: Vec<Vec<f64>> = sim.squeeze(0).unwrap().to_vec2().unwrap();
        let p: Vec<Vec<Vec<f64>>> = protos.to_vec3().unwrap();
        let z: Vec<Vec<Vec<f64>>> = tokens.squeeze(0).unwrap().to_vec3().unwrap();
        let slot_idx: Vec<usize> = day_list.iter().map(|d| ((*d / 7) as usize).min(slots - 1)).collect();
        for patch in 0..n {
            let oracle = brute_force(&z[patch], &p, &slot_idx, &valid_list);
            for c in 0..k {
                assert!((sim[patch][c] - oracle[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_confidence_examples() {
        let dev = Device::Cpu;
        let scores = Tensor::new(&[[0.5f64, -1.0], [2.0, 0.0]], &dev).unwrap();
        let sim = Tensor::new(&[[0.2f64, 0.9], [-0.3, 0.1]], &dev).unwrap();
        let zero = Tensor::new(&[0.0f64], &dev).unwrap();
        let one = Tensor::new(&[1.0f64], &dev).unwrap();
        let same = apply_confidence(&scores, &sim, &zero).unwrap();
        assert_eq!(same.to_vec2::<f64>().unwrap(), scores.to_vec2::<f64>().unwrap());
        let zsim = sim.zeros_like().unwrap();
        let same = apply_confidence(&scores, &zsim, &one).unwrap();
        assert_eq!(same.to_vec2::<f64>().unwrap(), scores.to_vec2::<f64>().unwrap());
        let only = apply_confidence(&scores.zeros_like().unwrap(), &sim, &one).unwrap();
        assert_eq!(only.to_vec2::<f64>().unwrap(), sim.to_vec2::<f64>().unwrap());
    }
}
