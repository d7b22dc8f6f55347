//! EMA teacher and the student–teacher distillation losses.
//!
//! Teacher tensors entering a loss are always detached, so no gradient ever
//! reaches teacher parameters; the teacher only moves through [`ema_update`].

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeaError};
use crate::model::{ModelConfig, TeaModel};
use crate::params::{ensure_same_schema, ParamStore};

/// Gap left between the decay at the last step and the final value.
const FINAL_GAP: f64 = 1e-5;

/// Linear warmup of the EMA decay followed by an exponential approach to its
/// final value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySchedule {
    pub warmup_fraction: f64,
    pub warmup_start: f64,
    pub warmup_end: f64,
    pub final_decay: f64,
    pub total_steps: u64,
}

impl DecaySchedule {
    pub fn new(total_steps: u64) -> Self {
        DecaySchedule {
            warmup_fraction: 0.15,
            warmup_start: 0.1,
            warmup_end: 0.9,
            final_decay: 0.999,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.warmup_start
            && self.warmup_start <= self.warmup_end
            && self.warmup_end < self.final_decay
            && self.final_decay < 1.0
            && (0.0..=1.0).contains(&self.warmup_fraction);
        if ok {
            Ok(())
        } else {
            Err(TeaError::Config(format!("invalid EMA decay schedule {self:?}")))
        }
    }

    fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }
}

/// EMA decay at `step`.
pub fn decay_at(step: u64, schedule: &DecaySchedule) -> f64 {
    let s = step.min(schedule.total_steps) as f64;
    let s_w = schedule.warmup_steps();
    if s <= s_w {
        if s_w <= 0.0 {
            return schedule.warmup_end;
        }
        let f = s / s_w;
        return schedule.warmup_start * (1.0 - f) + schedule.warmup_end * f;
    }
    let remaining = schedule.total_steps as f64 - s_w;
    let gap = schedule.final_decay - schedule.warmup_end;
    let kappa = (gap / FINAL_GAP).ln() / remaining;
    schedule.final_decay - gap * (-kappa * (s - s_w)).exp()
}

/// Parameters of the EMA teacher: a detached copy of the student schema.
#[derive(Debug)]
pub struct TeacherState {
    pub params: ParamStore,
    pub model: TeaModel,
    pub step: u64,
}

impl TeacherState {
    /// Copies the student's current parameters.
    pub fn from_student(student: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let mut params = student.duplicate(true)?;
        let model = TeaModel::new(config, &mut params)?;
        Ok(TeacherState { params, model, step: 0 })
    }
}

/// `teacher ← decay·teacher + (1 − decay)·student` for every parameter.
pub fn ema_update(teacher: &mut TeacherState, student: &ParamStore, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(TeaError::InvalidInput(format!("EMA decay {decay} outside [0, 1]")));
    }
    ensure_same_schema(&teacher.params, student)?;
    for (name, t_var) in teacher.params.iter() {
        let s = student.var(name).expect("schema checked").as_tensor();
        let next = ((t_var.as_tensor() * decay)? + (s * (1.0 - decay))?)?;
        t_var.set(&next)?;
    }
    teacher.step += 1;
    Ok(())
}

fn check_pair(student: &Tensor, teacher: &Tensor, what: &str) -> Result<()> {
    if student.dims() != teacher.dims() {
        return Err(TeaError::Shape(format!(
            "{what}: student {:?} vs teacher {:?}",
            student.dims(),
            teacher.dims()
        )));
    }
    Ok(())
}

fn mse(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    Ok((student - teacher.detach())?.sqr()?.mean_all()?)
}

/// Mean-pools `(B, N, K, d)` temporal class tokens over patches to `(B, K, d)`.
pub fn pool_temporal_features(class_tokens: &Tensor) -> Result<Tensor> {
    Ok(class_tokens.mean(1)?)
}

/// MSE between `(B, K, d)` pooled temporal class tokens, normalized by `B·K·d`.
pub fn temporal_distill_loss(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    check_pair(student, teacher, "temporal features")?;
    mse(student, teacher)
}

/// MSE between `(B, K, N+1, d)` spatial encoder outputs, normalized by
/// `(N+1)·K·d` per sample and averaged over the batch.
pub fn spatial_distill_loss(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    check_pair(student, teacher, "spatial features")?;
    mse(student, teacher)
}

/// MSE between `(B, N, K)` prototype similarity maps.
pub fn prototype_align_loss(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    check_pair(student, teacher, "prototype similarity")?;
    mse(student, teacher)
}

/// Pixelwise cross-entropy of the student's tempered distribution against the
/// teacher's, averaged over pixels. Logits are `(B, K, H, W)`.
pub fn soft_label_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<Tensor> {
    check_pair(student, teacher, "logits")?;
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(TeaError::InvalidInput(format!("temperature {temperature} must be positive")));
    }
    let target = candle_nn::ops::softmax(&(teacher.detach() / temperature)?, 1)?;
    let log_p = candle_nn::ops::log_softmax(&(student / temperature)?, 1)?;
    let per_pixel = (target * log_p)?.sum_keepdim(1)?;
    Ok(per_pixel.mean_all()?.neg()?)
}

/// Per-pixel cross-entropy of `(B, K, H, W)` logits against `(B, H, W)` labels.
pub fn segmentation_loss(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = logits.dims4()?;
    let flat = logits.permute((0, 2, 3, 1))?.reshape((b * h * w, k))?;
    let log_p = candle_nn::ops::log_softmax(&flat, D::Minus1)?;
    Ok(candle_nn::loss::nll(&log_p, &labels.flatten_all()?)?)
}
