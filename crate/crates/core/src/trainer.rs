//! Training loop, evaluation protocol and model selection.
//!
//! Each step runs the student on a random temporal crop and, when any
//! distillation weight is positive, the teacher on the full sequence. The
//! weighted losses are backpropagated into the student only; the teacher then
//! follows through an EMA update.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::cropping::{prefix_crop, random_crop, sliding_windows};
use crate::data::{load_dataset, DatasetSplits};
use crate::data::{ChannelStats, DatasetManifest, SitsSample};
use crate::distillation::{
    decay_at, ema_update, pool_temporal_features, prototype_align_loss, segmentation_loss, soft_label_loss,
    spatial_distill_loss, temporal_distill_loss, DecaySchedule, TeacherState,
};
use crate::error::{Result, TeaError};
use crate::metrics::{miou, ConfusionMatrix, EvalReport, SweepCell};
use crate::model::{Batch, ModelConfig, TeaModel};
use crate::params::ParamStore;
use crate::reconstruction::reconstruction_loss;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.safetensors";

/// Linear warmup from `start` to `peak`, then cosine decay to `floor` at the
/// last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub peak: f64,
    pub floor: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn from_config(config: &RunConfig, steps_per_epoch: u64) -> Self {
        let t = &config.train;
        let total_steps = t.epochs as u64 * steps_per_epoch;
        let warmup_steps = ((t.warmup_epochs * steps_per_epoch as f64).round() as u64).min(total_steps);
        LrSchedule {
            start: t.start_lr,
            peak: t.peak_lr,
            floor: t.floor_lr,
            warmup_steps,
            total_steps,
        }
    }
}

pub fn learning_rate_at(step: u64, s: &LrSchedule) -> f64 {
    if step < s.warmup_steps {
        let f = step as f64 / s.warmup_steps as f64;
        return s.start + (s.peak - s.start) * f;
    }
    let last = s.total_steps.saturating_sub(1);
    if last <= s.warmup_steps {
        return s.peak;
    }
    let f = ((step - s.warmup_steps) as f64 / (last - s.warmup_steps) as f64).min(1.0);
    s.floor + 0.5 * (s.peak - s.floor) * (1.0 + (std::f64::consts::PI * f).cos())
}

/// Every loss component of one step. Components whose weight is zero are not
/// computed and logged as `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub decay: f64,
    pub ce: Option<f64>,
    pub temporal: Option<f64>,
    pub spatial: Option<f64>,
    pub prototype: Option<f64>,
    pub reconstruction: Option<f64>,
    pub soft_label: Option<f64>,
    pub total: f64,
}

impl LossRecord {
    /// `(name, weight, value)` triples in logging order.
    pub fn weighted(&self, config: &RunConfig) -> [(&'static str, f64, Option<f64>); 6] {
        let l = &config.loss;
        [
            ("ce", l.ce, self.ce),
            ("temporal", l.temporal, self.temporal),
            ("spatial", l.spatial, self.spatial),
            ("prototype", l.prototype, self.prototype),
            ("reconstruction", l.reconstruction, self.reconstruction),
            ("soft_label", l.soft_label, self.soft_label),
        ]
    }
}

pub struct TrainState {
    pub config: RunConfig,
    pub model_config: ModelConfig,
    pub student: ParamStore,
    pub model: TeaModel,
    pub teacher: TeacherState,
    optimizer: AdamW,
    pub step: u64,
    pub lr_schedule: LrSchedule,
    pub decay_schedule: DecaySchedule,
    pub best_ldiou: Option<f64>,
    rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh student and teacher for a training set of `train_len` samples.
    pub fn new(config: &RunConfig, model_config: &ModelConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        let dtype = config.dtype()?;
        let mut student = ParamStore::new(dtype, config.run.seed);
        let model = TeaModel::new(model_config, &mut student)?;
        let teacher = TeacherState::from_student(&student, model_config)?;
        let steps_per_epoch = train_len.div_ceil(config.train.batch_size) as u64;
        let lr_schedule = LrSchedule::from_config(config, steps_per_epoch);
        let optimizer = AdamW::new(
            student.vars(),
            ParamsAdamW {
                lr: lr_schedule.start,
                beta1: config.train.beta1,
                beta2: config.train.beta2,
                eps: 1e-8,
                weight_decay: config.train.weight_decay,
            },
        )?;
        Ok(TrainState {
            config: config.clone(),
            model_config: model_config.clone(),
            decay_schedule: config.decay_schedule(lr_schedule.total_steps),
            student,
            model,
            teacher,
            optimizer,
            step: 0,
            lr_schedule,
            best_ldiou: None,
            rng: ChaCha8Rng::seed_from_u64(config.run.seed.wrapping_add(0x5eed)),
        })
    }

    pub fn dtype(&self) -> DType {
        self.student.dtype()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_stores(
            &self.config,
            &self.model_config,
            self.step,
            self.best_ldiou,
            &self.student,
            Some(&self.teacher.params),
        )
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Weighted loss terms as tensors, in logging order.
struct Terms {
    values: [Option<Tensor>; 6],
}

const COMPONENTS: [&str; 6] = ["ce", "temporal", "spatial", "prototype", "reconstruction", "soft_label"];

fn loss_terms(samples: &[SitsSample], state: &mut TrainState) -> Result<Terms> {
    let cfg = &state.config;
    let l = &cfg.loss;
    let dtype = state.dtype();
    let device = Device::Cpu;
    let crops = samples
        .iter()
        .map(|s| random_crop(s, &mut state.rng, cfg.crop.min_ratio, cfg.crop.mode).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    let batch = Batch::from_samples(&crops, dtype, &device)?;
    let want_rec = l.reconstruction > 0.0;
    let out = state.model.forward(&batch, want_rec)?;

    let mut values: [Option<Tensor>; 6] = Default::default();
    if l.ce > 0.0 {
        values[0] = Some(segmentation_loss(&out.logits, &batch.labels)?);
    }
    if l.needs_teacher() {
        let full = Batch::from_samples(samples, dtype, &device)?;
        let t_out = state.teacher.model.forward(&full, false)?;
        if l.temporal > 0.0 {
            values[1] = Some(temporal_distill_loss(
                &pool_temporal_features(&out.temporal.class_tokens)?,
                &pool_temporal_features(&t_out.temporal.class_tokens)?,
            )?);
        }
        if l.spatial > 0.0 {
            values[2] = Some(spatial_distill_loss(&out.spatial.tokens, &t_out.spatial.tokens)?);
        }
        if l.prototype > 0.0 {
            match (&out.similarity, &t_out.similarity) {
                (Some(s), Some(t)) => values[3] = Some(prototype_align_loss(s, t)?),
                _ => return Err(TeaError::Config("prototype loss needs the prototype bank".into())),
            }
        }
        if l.soft_label > 0.0 {
            values[5] = Some(soft_label_loss(&out.logits, &t_out.logits, l.temperature)?);
        }
    }
    if want_rec {
        let rec = out
            .reconstruction
            .as_ref()
            .ok_or_else(|| TeaError::Config("reconstruction loss needs the decoder".into()))?;
        values[4] = Some(reconstruction_loss(&batch.values, rec, &batch.valid)?);
    }
    Ok(Terms { values })
}

fn weights(config: &RunConfig) -> [f64; 6] {
    let l = &config.loss;
    [l.ce, l.temporal, l.spatial, l.prototype, l.reconstruction, l.soft_label]
}

/// Weighted total of the per-component losses for `samples`, without touching
/// the optimizer or the teacher. Consumes crop randomness like a real step.
pub fn total_loss(samples: &[SitsSample], state: &mut TrainState) -> Result<Tensor> {
    let terms = loss_terms(samples, state)?;
    combine(&terms, &weights(&state.config))?
        .ok_or_else(|| TeaError::Config("every loss weight is zero".into()))
}

fn combine(terms: &Terms, w: &[f64; 6]) -> Result<Option<Tensor>> {
    let mut total: Option<Tensor> = None;
    for (t, w) in terms.values.iter().zip(w) {
        if let Some(t) = t {
            let term = if *w == 1.0 { t.clone() } else { (t * *w)? };
            total = Some(match total {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
    }
    Ok(total)
}

/// One optimization step on `samples`, followed by the teacher EMA update.
pub fn train_step(samples: &[SitsSample], state: &mut TrainState) -> Result<LossRecord> {
    if samples.is_empty() {
        return Err(TeaError::InvalidInput("empty training batch".into()));
    }
    let step = state.step;
    let lr = learning_rate_at(step, &state.lr_schedule);
    let decay = decay_at(step, &state.decay_schedule);
    let terms = loss_terms(samples, state)?;
    let mut logged = [None; 6];
    for (i, t) in terms.values.iter().enumerate() {
        if let Some(t) = t {
            let v = scalar(t)?;
            if !v.is_finite() {
                return Err(TeaError::NonFinite {
                    component: COMPONENTS[i],
                    step,
                    value: v,
                });
            }
            logged[i] = Some(v);
        }
    }
    let total = combine(&terms, &weights(&state.config))?
        .ok_or_else(|| TeaError::Config("every loss weight is zero".into()))?;
    let total_value = scalar(&total)?;
    if !total_value.is_finite() {
        return Err(TeaError::NonFinite {
            component: "total",
            step,
            value: total_value,
        });
    }
    let grads = total.backward()?;
    state.optimizer.set_learning_rate(lr);
    state.optimizer.step(&grads)?;
    ema_update(&mut state.teacher, &state.student, decay)?;
    state.step += 1;
    Ok(LossRecord {
        step,
        lr,
        decay,
        ce: logged[0],
        temporal: logged[1],
        spatial: logged[2],
        prototype: logged[3],
        reconstruction: logged[4],
        soft_label: logged[5],
        total: total_value,
    })
}

fn confusion_for(
    model: &TeaModel,
    samples: &[SitsSample],
    batch_size: usize,
    crop: impl Fn(&SitsSample) -> Result<SitsSample>,
) -> Result<ConfusionMatrix> {
    let dtype = model.backbone().dtype();
    let mut cm = ConfusionMatrix::new(model.config().backbone.num_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let crops = chunk.iter().map(&crop).collect::<Result<Vec<_>>>()?;
        let batch = Batch::from_samples(&crops, dtype, &Device::Cpu)?;
        for (sample, pred) in crops.iter().zip(model.predict(&batch)?) {
            let gt: Vec<u32> = sample.labels.iter().map(|l| *l as u32).collect();
            cm.add_all(&gt, &pred)?;
        }
    }
    Ok(cm)
}

/// Prefix-crop evaluation at every ratio with pooled confusion matrices.
pub fn validate(model: &TeaModel, samples: &[SitsSample], ratios: &[f64], batch_size: usize) -> Result<EvalReport> {
    if ratios.is_empty() {
        return Err(TeaError::InvalidInput("no evaluation ratios".into()));
    }
    if samples.is_empty() {
        return Err(TeaError::InvalidInput("no evaluation samples".into()));
    }
    let mut per_ratio = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let cm = confusion_for(model, samples, batch_size, |s| prefix_crop(s, ratio))?;
        per_ratio.push(miou(&cm)?);
    }
    EvalReport::from_per_ratio(ratios.to_vec(), per_ratio)
}

/// mIoU for every sliding (start, length) window.
pub fn sweep(
    model: &TeaModel,
    samples: &[SitsSample],
    lengths: &[f64],
    step_ratio: f64,
    batch_size: usize,
) -> Result<Vec<SweepCell>> {
    let total = samples
        .first()
        .ok_or_else(|| TeaError::InvalidInput("no evaluation samples".into()))?
        .frames;
    if samples.iter().any(|s| s.frames != total) {
        return Err(TeaError::Shape("sweep needs equal-length sequences".into()));
    }
    let mut cells = Vec::new();
    for &length in lengths {
        if !(length > 0.0 && length <= 1.0) {
            return Err(TeaError::InvalidInput(format!("sweep length {length} outside (0, 1]")));
        }
        for w in sliding_windows(total, length, step_ratio) {
            let cm = confusion_for(model, samples, batch_size, |s| w.apply(s))?;
            cells.push(SweepCell {
                length_ratio: length,
                start_index: w.start_index,
                length: w.length,
                miou: miou(&cm)?,
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best_checkpoint: PathBuf,
    pub best_ldiou: Option<f64>,
    pub log: Vec<LossRecord>,
    /// `(step, report)` for every validation pass.
    pub validation: Vec<(u64, EvalReport)>,
}

/// Loads the corpus named by `config` and applies its normalization.
pub fn load_training_data(config: &RunConfig) -> Result<(DatasetManifest, DatasetSplits)> {
    let manifest = DatasetManifest::load(&config.data.manifest)?;
    let mut splits = load_dataset(&manifest)?;
    if config.data.normalize {
        let stats = match &manifest.normalization {
            Some(s) => s.clone(),
            None => ChannelStats::from_samples(&splits.train)?,
        };
        splits.normalize(Some(&stats))?;
    }
    Ok((manifest, splits))
}

pub fn fit(config: &RunConfig) -> Result<FitOutcome> {
    let (manifest, splits) = load_training_data(config)?;
    fit_on(config, &manifest, &splits)
}

/// Trains on already loaded splits, validating on `splits.val`.
pub fn fit_on(config: &RunConfig, manifest: &DatasetManifest, splits: &DatasetSplits) -> Result<FitOutcome> {
    if splits.train.is_empty() {
        return Err(TeaError::Config("training split is empty".into()));
    }
    if splits.val.is_empty() {
        return Err(TeaError::Config("validation split is empty".into()));
    }
    let model_config = config.model_config(manifest);
    let mut state = TrainState::new(config, &model_config, splits.train.len())?;
    let out_dir = &config.paths.output_dir;
    std::fs::create_dir_all(out_dir)?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let mut log_file = BufWriter::new(File::create(out_dir.join(LOG_FILE))?);
    let total_steps = state.lr_schedule.total_steps;
    let mut outcome = FitOutcome {
        best_checkpoint: best_path.clone(),
        best_ldiou: None,
        log: Vec::new(),
        validation: Vec::new(),
    };
    if total_steps == 0 {
        state.checkpoint().save(&best_path)?;
        return Ok(outcome);
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.run.seed);
    let bs = config.train.batch_size;
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    for epoch in 0..config.train.epochs {
        order.shuffle(&mut order_rng);
        for idx in order.chunks(bs) {
            let batch: Vec<SitsSample> = idx.iter().map(|&i| splits.train[i].clone()).collect();
            let record = train_step(&batch, &mut state)?;
            writeln!(log_file, "{}", serde_json::to_string(&record).expect("record serializes"))?;
            outcome.log.push(record);
            if state.step % config.train.validation_interval == 0 || state.step == total_steps {
                let report = validate(&state.model, &splits.val, &config.eval.ratios, config.train.eval_batch_size)?;
                log::info!(
                    "epoch {epoch} step {}: val LDIoU {:.4} mmIoU {:.4}",
                    state.step,
                    report.ldiou,
                    report.mmiou
                );
                if state.best_ldiou.is_none_or(|b| report.ldiou > b) {
                    state.best_ldiou = Some(report.ldiou);
                    state.checkpoint().save(&best_path)?;
                }
                outcome.validation.push((state.step, report));
            }
        }
    }
    log_file.flush()?;
    outcome.best_ldiou = state.best_ldiou;
    Ok(outcome)
}

/// Student model and checkpoint loaded from `path`.
pub fn load_model(path: &Path) -> Result<(TeaModel, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let mut store = ckpt.student_store()?;
    let model = TeaModel::new(&ckpt.model, &mut store)?;
    Ok((model, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> LrSchedule {
        LrSchedule {
            start: 1e-8,
            peak: 1e-3,
            floor: 1e-6,
            warmup_steps: 10,
            total_steps: 50,
        }
    }

    #[test]
    fn learning_rate_anchors() {
        let s = schedule();
        assert_eq!(learning_rate_at(0, &s), 1e-8);
        assert!((learning_rate_at(10, &s) - 1e-3).abs() < 1e-18);
        assert!((learning_rate_at(49, &s) - 1e-6).abs() < 1e-18);
        assert!((learning_rate_at(5, &s) - (1e-8 + (1e-3 - 1e-8) * 0.5)).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for step in 10..50 {
            let lr = learning_rate_at(step, &s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn learning_rate_from_config() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 20;
        cfg.train.warmup_epochs = 10.0;
        let s = LrSchedule::from_config(&cfg, 3);
        assert_eq!((s.warmup_steps, s.total_steps), (30, 60));
        cfg.train.epochs = 0;
        let s = LrSchedule::from_config(&cfg, 3);
        assert_eq!((s.warmup_steps, s.total_steps), (0, 0));
    }
}
