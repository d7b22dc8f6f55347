use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use tea::data::{
    generate_samples, generate_synthetic_dataset, load_dataset, write_sample, DatasetManifest, SitsSample,
    SplitRatios, SyntheticConfig,
};
use tea::TeaError;

fn small_config() -> SyntheticConfig {
    let mut cfg = SyntheticConfig::desk_default();
    cfg.n_samples = 10;
    cfg
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn write_then_load_matches_generated_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let manifest = generate_synthetic_dataset(&cfg, dir.path(), 11).unwrap();
    assert_eq!(manifest.num_classes, 4);
    let loaded = DatasetManifest::load(dir.path()).unwrap();
    let splits = load_dataset(&loaded).unwrap();
    assert_eq!((splits.train.len(), splits.val.len(), splits.test.len()), (6, 2, 2));

    let generated = generate_samples(&cfg, 11).unwrap();
    let mut all: Vec<&SitsSample> = splits.train.iter().chain(&splits.val).chain(&splits.test).collect();
    all.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    assert_eq!(all.len(), generated.len());
    for (a, b) in all.iter().zip(&generated) {
        assert_eq!(*a, b);
    }
}

#[test]
fn generation_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&small_config(), a.path(), 3).unwrap();
    generate_synthetic_dataset(&small_config(), b.path(), 3).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&small_config(), c.path(), 4).unwrap();
    assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
}

#[test]
fn split_assignment_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&small_config(), dir.path(), 0).unwrap();
    let m = DatasetManifest::load(dir.path()).unwrap();
    let ids = |s: &[SitsSample]| s.iter().map(|x| x.sample_id.clone()).collect::<Vec<_>>();
    let first = load_dataset(&m).unwrap();
    let second = load_dataset(&m).unwrap();
    assert_eq!(ids(&first.train), ids(&second.train));
    assert_eq!(ids(&first.val), ids(&second.val));
    assert_eq!(ids(&first.test), ids(&second.test));
}

#[test]
fn desk_corpus_class_frequencies_follow_priors() {
    let cfg = SyntheticConfig::desk_default();
    let samples = generate_samples(&cfg, 0).unwrap();
    let mut counts = vec![0usize; cfg.classes.len()];
    let mut total = 0usize;
    for s in &samples {
        for l in &s.labels {
            counts[*l as usize] += 1;
            total += 1;
        }
    }
    let prior_sum: f64 = cfg.classes.iter().map(|c| c.prior).sum();
    for (k, class) in cfg.classes.iter().enumerate() {
        let freq = counts[k] as f64 / total as f64;
        let prior = class.prior / prior_sum;
        assert!((freq - prior).abs() <= 0.1 * prior, "class {k}: {freq} vs prior {prior}");
    }
}

#[test]
fn dropout_fraction_within_three_standard_errors() {
    let cfg = SyntheticConfig::desk_default();
    let samples = generate_samples(&cfg, 1).unwrap();
    let n: usize = samples.iter().map(|s| s.frames).sum();
    let invalid: usize = samples.iter().map(|s| s.frames - s.valid_frames()).sum();
    let p = cfg.dropout_prob;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    let frac = invalid as f64 / n as f64;
    assert!((frac - p).abs() <= 3.0 * se, "{frac} vs {p} ± {}", 3.0 * se);
    for s in &samples {
        for t in 0..s.frames {
            if !s.valid_mask[t] {
                assert!(s.frame(t).iter().all(|v| *v == 0.0));
            }
        }
    }
}

fn toy_sample(id: &str, frames: usize, label: u16) -> SitsSample {
    SitsSample::new(
        id,
        [frames, 1, 2, 2],
        (0..frames * 4).map(|i| i as f32 * 0.5 + 1.0).collect(),
        (0..frames as u32).map(|t| 3 + 5 * t).collect(),
        vec![true; frames],
        vec![0, label, 1, 0],
    )
    .unwrap()
}

fn toy_manifest(root: &Path, padded: usize) -> DatasetManifest {
    DatasetManifest {
        root: root.display().to_string(),
        num_classes: 2,
        channels: 1,
        height: 2,
        width: 2,
        padded_length: padded,
        truncate_length: None,
        start_date: NaiveDate::from_ymd_opt(2018, 9, 1).unwrap(),
        revisit_days: 5,
        seed: 9,
        split: SplitRatios::default(),
        normalization: None,
        class_names: Vec::new(),
    }
}

#[test]
fn germany_style_truncation_keeps_first_frames() {
    let dir = tempfile::tempdir().unwrap();
    let samples_dir = dir.path().join("samples");
    fs::create_dir_all(&samples_dir).unwrap();
    for (i, len) in [40usize, 46, 31, 44, 38].iter().enumerate() {
        write_sample(&samples_dir, &toy_sample(&format!("g{i}"), *len, 1)).unwrap();
    }
    let mut m = toy_manifest(dir.path(), 46);
    m.truncate_length = Some(36);
    let splits = load_dataset(&m).unwrap();
    let all: Vec<&SitsSample> = splits.train.iter().chain(&splits.val).chain(&splits.test).collect();
    assert_eq!(all.len(), 5);
    for s in all {
        assert_eq!(s.frames, 36);
        let original = toy_sample(&s.sample_id, 46, 1);
        let kept = s.valid_frames();
        assert_eq!(&s.values[..kept * 4], &original.values[..kept * 4]);
        assert!(s.day_offsets.windows(2).all(|w| w[1] > w[0]));
    }
}

#[test]
fn dates_in_records_become_day_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let samples_dir = dir.path().join("samples");
    fs::create_dir_all(&samples_dir).unwrap();
    fs::write(samples_dir.join("d0.f32"), [1.0f32, 2.0].iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
        .unwrap();
    fs::write(
        samples_dir.join("d0.json"),
        r#"{"sample_id":"d0","shape":[2,1,1,1],"dates":["2018-09-01","2018-09-06"],"valid_mask":[true,true],"labels":[1]}"#,
    )
    .unwrap();
    let mut m = toy_manifest(dir.path(), 4);
    m.height = 1;
    m.width = 1;
    m.split = SplitRatios {
        train: 1.0,
        val: 0.0,
        test: 0.0,
    };
    let s = &load_dataset(&m).unwrap().train[0];
    assert_eq!(s.day_offsets, vec![0, 5, 10, 15]);
    assert_eq!(s.valid_mask, vec![true, true, false, false]);
}

#[test]
fn malformed_files_are_named_in_errors() {
    let dir = tempfile::tempdir().unwrap();
    let samples_dir = dir.path().join("samples");
    fs::create_dir_all(&samples_dir).unwrap();
    write_sample(&samples_dir, &toy_sample("ok", 3, 1)).unwrap();
    fs::write(samples_dir.join("bad.json"), "{ not json").unwrap();
    match load_dataset(&toy_manifest(dir.path(), 4)) {
        Err(TeaError::Parse { path, .. }) => assert!(path.ends_with("bad.json")),
        other => panic!("expected parse error, got {other:?}"),
    }

    fs::remove_file(samples_dir.join("bad.json")).unwrap();
    fs::write(samples_dir.join("ok.f32"), [0u8; 7]).unwrap();
    match load_dataset(&toy_manifest(dir.path(), 4)) {
        Err(TeaError::Parse { path, .. }) => assert!(path.ends_with("ok.f32")),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn out_of_range_labels_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    let samples_dir = dir.path().join("samples");
    fs::create_dir_all(&samples_dir).unwrap();
    write_sample(&samples_dir, &toy_sample("hi", 3, 7)).unwrap();
    assert!(matches!(load_dataset(&toy_manifest(dir.path(), 4)), Err(TeaError::Validation(_))));
}

#[test]
fn samples_longer_than_padding_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let samples_dir = dir.path().join("samples");
    fs::create_dir_all(&samples_dir).unwrap();
    write_sample(&samples_dir, &toy_sample("long", 6, 1)).unwrap();
    assert!(matches!(load_dataset(&toy_manifest(dir.path(), 4)), Err(TeaError::InvalidInput(_))));
}
