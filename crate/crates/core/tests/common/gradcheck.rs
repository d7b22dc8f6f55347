use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tea::backbone::BackboneConfig;
use tea::data::SitsSample;
use tea::distillation::{
    pool_temporal_features, prototype_align_loss, segmentation_loss, soft_label_loss, spatial_distill_loss,
    temporal_distill_loss,
};
use tea::model::{Batch, ModelConfig, TeaModel};
use tea::params::ParamStore;
use tea::prototype::PrototypeConfig;
use tea::reconstruction::{reconstruction_loss, ReconDecoderConfig};

const STEP: f64 = 1e-5;
pub const SAMPLES_PER_LOSS: usize = 24;

pub fn tiny() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_height: 4,
            image_width: 4,
            channels: 2,
            patch_height: 2,
            patch_width: 2,
            embed_dim: 8,
            temporal_depth: 1,
            spatial_depth: 1,
            heads: 2,
            mlp_hidden: 16,
            num_classes: 2,
            max_day_offset: 64,
        },
        prototype: PrototypeConfig {
            enabled: true,
            slots: 3,
            slot_span: 10,
        },
        reconstruction: ReconDecoderConfig {
            enabled: true,
            hidden: vec![6],
        },
    }
}

fn sample(seed: u64) -> SitsSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SitsSample::new(
        format!("g{seed}"),
        [4, 2, 4, 4],
        (0..4 * 2 * 16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        vec![0, 10, 20, 30],
        vec![true; 4],
        (0..16).map(|_| rng.random_range(0..2)).collect(),
    )
    .unwrap()
}

struct Fixture {
    student: ParamStore,
    model: TeaModel,
    teacher: TeaModel,
    _teacher_params: ParamStore,
    crop: Batch,
    full: Batch,
}

fn fixture() -> Fixture {
    let cfg = tiny();
    let mut student = ParamStore::new(DType::F64, 3);
    let model = TeaModel::new(&cfg, &mut student).unwrap();
    // Scale up the small initial weights so every path carries signal.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (name, var) in student.iter() {
        let t = var.as_tensor();
        if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name.ends_with("norm.weight") {
            continue;
        }
        let noise: Vec<f64> = (0..t.elem_count()).map(|_| rng.random_range(-0.4..0.4)).collect();
        let noise = Tensor::from_vec(noise, t.dims(), &Device::Cpu).unwrap();
        var.set(&(t + noise).unwrap()).unwrap();
    }
    let mut teacher_params = student.duplicate(true).unwrap();
    for (_, var) in teacher_params.iter() {
        let t = var.as_tensor();
        let noise: Vec<f64> = (0..t.elem_count()).map(|_| rng.random_range(-0.2..0.2)).collect();
        let noise = Tensor::from_vec(noise, t.dims(), &Device::Cpu).unwrap();
        var.set(&(t + noise).unwrap()).unwrap();
    }
    let teacher = TeaModel::new(&cfg, &mut teacher_params).unwrap();
    let samples = [sample(1), sample(2)];
    let crops: Vec<SitsSample> = vec![samples[0].slice_frames(1, 3).unwrap(), samples[1].slice_frames(0, 2).unwrap()];
    Fixture {
        crop: Batch::from_samples(&crops, DType::F64, &Device::Cpu).unwrap(),
        full: Batch::from_samples(&samples, DType::F64, &Device::Cpu).unwrap(),
        student,
        model,
        teacher,
        _teacher_params: teacher_params,
    }
}

pub const NAMES: [&str; 7] = ["ce", "temporal", "spatial", "prototype", "reconstruction", "soft_label", "total"];

fn loss(f: &Fixture, which: usize) -> Tensor {
    let out = f.model.forward(&f.crop, true).unwrap();
    let t_out = f.teacher.forward(&f.full, false).unwrap();
    let parts = [
        segmentation_loss(&out.logits, &f.crop.labels).unwrap(),
        temporal_distill_loss(
            &pool_temporal_features(&out.temporal.class_tokens).unwrap(),
            &pool_temporal_features(&t_out.temporal.class_tokens).unwrap(),
        )
        .unwrap(),
        spatial_distill_loss(&out.spatial.tokens, &t_out.spatial.tokens).unwrap(),
        prototype_align_loss(out.similarity.as_ref().unwrap(), t_out.similarity.as_ref().unwrap()).unwrap(),
        reconstruction_loss(&f.crop.values, out.reconstruction.as_ref().unwrap(), &f.crop.valid).unwrap(),
        soft_label_loss(&out.logits, &t_out.logits, 2.0).unwrap(),
    ];
    if which < parts.len() {
        return parts[which].clone();
    }
    let weights = [1.0, 0.7, 1.3, 0.9, 0.5, 1.1];
    parts
        .iter()
        .zip(weights)
        .map(|(p, w)| (p * w).unwrap())
        .reduce(|a, b| (a + b).unwrap())
        .unwrap()
}

fn value(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn nudge(store: &ParamStore, name: &str, index: usize, delta: f64) {
    let var = store.var(name).unwrap();
    let t = var.as_tensor();
    let mut v = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    v[index] += delta;
    var.set(&Tensor::from_vec(v, t.dims(), &Device::Cpu).unwrap()).unwrap();
}

/// Result of checking one loss against finite differences.
pub struct GradCheck {
    pub checked: usize,
    /// Samples whose analytic gradient is clearly non-zero.
    pub informative: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Compares analytic and central-difference gradients of loss `which` on
/// `SAMPLES_PER_LOSS` randomly drawn student parameters.
pub fn check(which: usize) -> GradCheck {
    let f = fixture();
    let l = loss(&f, which);
    assert!(value(&l) > 1e-6, "{} loss is degenerate", NAMES[which]);
    let grads = l.backward().unwrap();
    let mut candidates: Vec<(String, usize, f64)> = Vec::new();
    for (name, var) in f.student.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            for (i, gv) in g.flatten_all().unwrap().to_vec1::<f64>().unwrap().into_iter().enumerate() {
                candidates.push((name.to_string(), i, gv));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(which as u64);
    let mut out = GradCheck {
        checked: 0,
        informative: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    while out.checked < SAMPLES_PER_LOSS {
        let (name, i, analytic) = candidates[rng.random_range(0..candidates.len())].clone();
        nudge(&f.student, &name, i, STEP);
        let up = value(&loss(&f, which));
        nudge(&f.student, &name, i, -2.0 * STEP);
        let down = value(&loss(&f, which));
        nudge(&f.student, &name, i, STEP);
        let numeric = (up - down) / (2.0 * STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        if rel >= out.worst {
            out.worst = rel;
            out.worst_at = format!("{name}[{i}] analytic {analytic:e} numeric {numeric:e}");
        }
        if analytic.abs() > 1e-8 {
            out.informative += 1;
        }
        out.checked += 1;
    }
    out
}
