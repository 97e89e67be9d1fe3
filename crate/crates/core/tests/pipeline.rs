use std::fs;
use std::path::Path;

use uadseg::metrics::MetricsConfig;
use uadseg::pipeline::*;
use uadseg::volume::{load_labels, save_labels, LABEL_ET, LABEL_NET, LABEL_SNFH};
use uadseg::{Dims, Error, LabelVolume};

fn repo_file(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn small_cfg() -> PipelineConfig {
    let mut cfg = PipelineConfig::toy();
    cfg.dataset.n_train = 2;
    cfg.dataset.n_val = 0;
    cfg.dataset.n_test_healthy = 1;
    cfg.dataset.n_test_tumor = 1;
    cfg.workers = 2;
    cfg
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn shipped_configs_match_presets() {
    let toy = PipelineConfig::load(&repo_file("configs/toy.json")).unwrap();
    assert_eq!(toy, PipelineConfig::toy());
    let full = PipelineConfig::load(&repo_file("configs/full.json")).unwrap();
    assert_eq!(full, PipelineConfig::default());
}

#[test]
fn full_scale_defaults() {
    let cfg = PipelineConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.postproc.threshold_fraction, 0.2);
    assert_eq!(cfg.postproc.threshold_floor, 1.2);
    assert_eq!(cfg.postproc.confidence_gate, 0.9);
    assert_eq!(cfg.postproc.max_attempts, 3);
    assert_eq!(cfg.train.lr, 1e-4);
    assert_eq!(cfg.train.batch_size, 32);
    assert_eq!(cfg.train.epochs, 100);
    assert_eq!(cfg.model.image_size, 240);
    assert_eq!(cfg.metrics.dilation_radius, 3);
    assert_eq!(cfg.metrics.min_lesion_voxels, 50);
}

#[test]
fn config_rejects_unknown_keys_and_inconsistency() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"seed": 1, "colour": "blue"}"#).unwrap();
    let err = PipelineConfig::load(&path).unwrap_err();
    assert!(err.is_config(), "{err}");
    fs::write(&path, r#"{"postproc": {"threshold_flor": 1.0}}"#).unwrap();
    assert!(PipelineConfig::load(&path).unwrap_err().is_config());
    let err = PipelineConfig::load(&dir.path().join("missing.json")).unwrap_err();
    assert!(err.is_config(), "{err}");

    let mut cfg = PipelineConfig::toy();
    cfg.dataset.phantom.dims = Dims::new(32, 64, 64);
    assert!(cfg.validate().unwrap_err().is_config());
    let mut cfg = PipelineConfig::toy();
    cfg.inference_batch = 0;
    assert!(cfg.validate().unwrap_err().is_config());

    let partial = dir.path().join("p.json");
    fs::write(&partial, r#"{"seed": 9, "workers": 3}"#).unwrap();
    let cfg = PipelineConfig::load(&partial).unwrap();
    assert_eq!((cfg.seed, cfg.workers), (9, 3));
    assert_eq!(cfg.model, PipelineConfig::default().model);
}

#[test]
fn parallel_map_keeps_order_and_reports_errors() {
    let items: Vec<usize> = (0..37).collect();
    for workers in [1, 3, 8] {
        let out = parallel_map(
            &items,
            workers,
            || Ok(0usize),
            |calls, &i| {
                *calls += 1;
                Ok(i * i)
            },
        )
        .unwrap();
        assert_eq!(out, items.iter().map(|i| i * i).collect::<Vec<_>>());
    }
    let err = parallel_map(
        &items,
        4,
        || Ok(()),
        |_, &i| {
            if i == 20 {
                Err(Error::Data("twenty".into()))
            } else {
                Ok(i)
            }
        },
    )
    .unwrap_err();
    assert!(err.to_string().contains("twenty"));
    let err = parallel_map(&items, 2, || Err::<(), _>(Error::Refiner("no".into())), |_, &i| Ok(i)).unwrap_err();
    assert!(matches!(err, Error::Refiner(_)));
    let empty: Vec<usize> = Vec::new();
    assert!(parallel_map(&empty, 4, || Ok(()), |_, &i| Ok(i)).unwrap().is_empty());
}

#[test]
fn dataset_layout_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let a = tmp.path().join("a");
    let m = generate_dataset(&cfg, &a, false).unwrap();
    let names: Vec<&str> = m.cases.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["train_000", "train_001", "test_healthy_000", "test_tumor_000"]);
    assert_eq!(m.split(Split::Test).len(), 2);
    assert!(m.cases.iter().all(|c| c.brain_voxels > 0));
    for c in &m.cases {
        let labels = load_labels(&a.join(&c.name)).unwrap();
        assert_eq!(labels.is_empty(), !c.tumor, "{}", c.name);
        assert!(a.join(&c.name).join(PHANTOM_SIDECAR).is_file());
    }
    assert_eq!(Manifest::load(&a).unwrap(), m);

    let mut one_worker = cfg.clone();
    one_worker.workers = 1;
    let b = tmp.path().join("b");
    generate_dataset(&one_worker, &b, false).unwrap();
    assert_eq!(read_tree(&a), read_tree(&b));

    let err = generate_dataset(&cfg, &a, false).unwrap_err();
    assert!(matches!(err, Error::OutputExists(_)) && err.is_config());
    fs::write(a.join("stray.txt"), "x").unwrap();
    generate_dataset(&cfg, &a, true).unwrap();
    assert!(!a.join("stray.txt").exists());

    let mut other = cfg.clone();
    other.seed = 5;
    let c = tmp.path().join("c");
    let mc = generate_dataset(&other, &c, false).unwrap();
    assert_ne!(mc.cases[0].seed, m.cases[0].seed);
}

#[test]
fn training_needs_healthy_slices() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg();
    cfg.dataset.n_train = 0;
    generate_dataset(&cfg, tmp.path(), false).unwrap();
    let err = train_model(&cfg, tmp.path(), &tmp.path().join("ckpt"), false).unwrap_err();
    assert!(matches!(err, Error::Empty(_)) && err.is_data(), "{err}");
}

fn labels_with(dims: Dims, boxes: &[(usize, u8)]) -> LabelVolume {
    let mut data = vec![0u8; dims.voxels()];
    for &(start, label) in boxes {
        for z in start..start + 3 {
            for y in 10..14 {
                for x in 10..14 {
                    data[dims.index(z, y, x)] = label;
                }
            }
        }
    }
    LabelVolume::new(dims, data).unwrap()
}

#[test]
fn evaluation_identity_and_case_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    let dims = Dims::new(8, 24, 24);
    let cases = [
        ("a", labels_with(dims, &[(1, LABEL_ET), (4, LABEL_SNFH)])),
        ("b", labels_with(dims, &[(2, LABEL_NET)])),
        ("h", LabelVolume::zeros(dims)),
    ];
    for (name, l) in &cases {
        save_labels(l, &pred.join(name)).unwrap();
        save_labels(l, &gt.join(name)).unwrap();
    }
    let report = evaluate_predictions(&pred, &gt, &MetricsConfig::phantom()).unwrap();
    assert_eq!(report.cases.len(), 3);
    for c in &report.cases {
        for score in c.regions.values() {
            assert_eq!(score.lesionwise, 1.0);
            assert_eq!(score.volumetric, 1.0);
        }
    }
    assert_eq!(report.detection_rate, Some(1.0));
    write_report(&report, &tmp.path().join("report")).unwrap();
    let table = fs::read_to_string(tmp.path().join("report/report.txt")).unwrap();
    for col in ["DSC ET", "DSC NET", "DSC SNFH", "DSC TC", "DSC WT", "DR %"] {
        assert!(table.contains(col));
    }
    assert!(tmp.path().join("report/report.json").is_file());

    fs::remove_dir_all(pred.join("b")).unwrap();
    save_labels(&cases[0].1, &pred.join("zz")).unwrap();
    let err = evaluate_predictions(&pred, &gt, &MetricsConfig::phantom()).unwrap_err();
    let msg = err.to_string();
    assert!(err.is_data() && msg.contains('b') && msg.contains("zz"), "{msg}");
}

#[test]
fn evaluation_uses_manifest_test_split() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let m = generate_dataset(&small_cfg(), &data, false).unwrap();
    let pred = tmp.path().join("pred");
    for c in m.split(Split::Test) {
        save_labels(&load_labels(&data.join(&c.name)).unwrap(), &pred.join(&c.name)).unwrap();
    }
    let report = evaluate_predictions(&pred, &data, &MetricsConfig::phantom()).unwrap();
    assert_eq!(report.cases.len(), 2);
    assert_eq!(report.detection_rate, Some(1.0));
}

#[test]
fn overlay_colours() {
    let base = [0.0f32, 1.0, 2.0, 2.0, 2.0];
    let labels = [0u8, 0, LABEL_ET, LABEL_SNFH, LABEL_NET];
    let rgb = overlay_rgb(&base, Some(&labels), 0.0, 2.0);
    assert_eq!(&rgb[0..3], &[0, 0, 0]);
    assert_eq!(&rgb[3..6], &[128, 128, 128]);
    assert_eq!(&rgb[6..9], &[128, 128, 255]);
    assert_eq!(&rgb[9..12], &[128, 255, 128]);
    assert_eq!(&rgb[12..15], &[255, 128, 128]);
    let grey = overlay_rgb(&base, None, 0.0, 2.0);
    assert!(grey.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    assert_eq!(overlay_rgb(&base, Some(&[0; 5]), 0.0, 2.0), grey);
    let flat = overlay_rgb(&[3.0; 4], None, 3.0, 3.0);
    assert!(flat.iter().all(|&v| v == 0));
}
