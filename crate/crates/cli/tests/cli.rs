use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use uadseg::model::{load_checkpoint, CHECKPOINT_HEADER};
use uadseg::pipeline::{Manifest, PipelineConfig, Split, DEBUG_STAGES, LOSS_FILE};
use uadseg::postproc::{largest_component, morph_clean, refine_volume, slice_seed, BinaryMask3D, BuiltinRefiner};
use uadseg::volume::{load_labels, load_volume, zscore_normalize};
use uadseg::{LabelVolume, Modality};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uadseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("run uadseg")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "uadseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = run(args);
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
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
                out.push((
                    p.strip_prefix(root).unwrap().to_string_lossy().into_owned(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// Small config, a dataset, and a checkpoint trained for two epochs; shared by
/// the tests that need a model.
struct Fixture {
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::toy();
    cfg.dataset.n_train = 1;
    cfg.dataset.n_val = 0;
    cfg.dataset.n_test_healthy = 1;
    cfg.dataset.n_test_tumor = 2;
    cfg.train.epochs = 2;
    cfg
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let config = root.join("config.json");
        small_config().save(&config).unwrap();
        let data = root.join("data");
        let ckpt = root.join("ckpt");
        ok(&["phantom", "--config", s(&config), "--out", s(&data)]);
        ok(&[
            "train",
            "--config",
            s(&config),
            "--dataset",
            s(&data),
            "--checkpoint",
            s(&ckpt),
        ]);
        Fixture {
            root,
            config,
            data,
            ckpt,
        }
    })
}

#[test]
fn phantom_command_counts_determinism_and_force() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = |out: &Path| {
        vec![
            "phantom".to_string(),
            "--seed".into(),
            "1".into(),
            "--n-train".into(),
            "0".into(),
            "--n-val".into(),
            "0".into(),
            "--n-healthy".into(),
            "10".into(),
            "--n-tumor".into(),
            "10".into(),
            "--out".into(),
            s(out).into(),
        ]
    };
    let a_args = args(&a);
    let a_args: Vec<&str> = a_args.iter().map(String::as_str).collect();
    ok(&a_args);
    let dirs = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(dirs, 20);
    let m = Manifest::load(&a).unwrap();
    assert_eq!(m.cases.len(), 20);
    assert_eq!(m.split(Split::Test).len(), 20);
    assert_eq!(m.cases.iter().filter(|c| c.tumor).count(), 10);

    let b_args = args(&b);
    let b_args: Vec<&str> = b_args.iter().map(String::as_str).collect();
    ok(&b_args);
    assert_eq!(read_tree(&a), read_tree(&b));

    let (c, err) = code(&a_args);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("--force"), "{err}");
    let mut forced = a_args.clone();
    forced.push("--force");
    ok(&forced);
    assert_eq!(read_tree(&a), read_tree(&b));
}

#[test]
fn train_writes_checkpoint_history_and_resumes() {
    let f = fixture();
    assert!(f.ckpt.join(CHECKPOINT_HEADER).is_file());
    let csv = fs::read_to_string(f.ckpt.join(LOSS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,saved");
    assert_eq!(lines.len(), 1 + 2);

    let copy = f.root.join("ckpt_resume");
    fs::create_dir_all(&copy).unwrap();
    for e in fs::read_dir(&f.ckpt).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, copy.join(p.file_name().unwrap())).unwrap();
    }
    let before = load_checkpoint(&copy).unwrap().epoch;
    let out = ok(&[
        "train",
        "--config",
        s(&f.config),
        "--dataset",
        s(&f.data),
        "--checkpoint",
        s(&copy),
        "--resume",
        "--epochs",
        "1",
    ]);
    assert!(out.contains(&format!("epoch {:>3}", before + 1)), "{out}");
    let csv = fs::read_to_string(copy.join(LOSS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(csv.lines().last().unwrap().starts_with(&format!("{},", before + 1)));
}

#[test]
fn train_without_healthy_slices_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    ok(&[
        "phantom",
        "--n-train",
        "0",
        "--n-val",
        "0",
        "--n-healthy",
        "0",
        "--n-tumor",
        "1",
        "--out",
        s(&data),
    ]);
    let (c, err) = code(&["train", "--dataset", s(&data), "--checkpoint", s(&tmp.path().join("c"))]);
    assert_eq!(c, 3, "{err}");
    assert!(err.contains("healthy"), "{err}");
}

fn mask_channel(dir: &Path, modality: Modality) -> BinaryMask3D {
    let vol = load_volume(dir).unwrap();
    let data = vol.modality(modality).unwrap().iter().map(|&v| v != 0.0).collect();
    BinaryMask3D::from_vec(vol.dims(), data).unwrap()
}

#[test]
fn segment_debug_stages_recompose() {
    let f = fixture();
    let out = f.root.join("seg_debug");
    ok(&[
        "segment",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&f.ckpt),
        "--input",
        s(&f.data),
        "--out",
        s(&out),
        "--debug",
    ]);
    let m = Manifest::load(&f.data).unwrap();
    let cfg = small_config();
    for case in m.split(Split::Test) {
        assert!(out.join(&case.name).join("labels.json").is_file());
        let debug = out.join("debug").join(&case.name);
        for stage in DEBUG_STAGES {
            let vol = load_volume(&debug.join(stage)).unwrap();
            assert_eq!(vol.modalities(), [Modality::T1c, Modality::T2f]);
        }
        let (norm, _) = zscore_normalize(&load_volume(&f.data.join(&case.name)).unwrap());
        for (index, modality) in [(0, Modality::T1c), (2, Modality::T2f)] {
            let otsu = mask_channel(&debug.join("3_otsu"), modality);
            let morph = morph_clean(&otsu);
            assert_eq!(morph, mask_channel(&debug.join("4_morphology"), modality));
            let comp = largest_component(&morph, cfg.postproc.connectivity);
            assert_eq!(comp, mask_channel(&debug.join("5_component"), modality));
            let mut refiner = BuiltinRefiner { tolerance: 1.0 };
            let (refined, _) = refine_volume(
                norm.modality(modality).unwrap(),
                &comp,
                &mut refiner,
                &cfg.postproc,
                |z| slice_seed(cfg.seed, index, z),
            )
            .unwrap();
            assert_eq!(refined, mask_channel(&debug.join("6_refined"), modality));
        }
        assert!(debug.join("stages.json").is_file());
    }
}

#[test]
fn segment_single_case_matches_batch_and_is_deterministic() {
    let f = fixture();
    let case = f.data.join("test_tumor_000");
    let (a, b) = (f.root.join("single_a"), f.root.join("single_b"));
    for out in [&a, &b] {
        ok(&[
            "segment",
            "--config",
            s(&f.config),
            "--checkpoint",
            s(&f.ckpt),
            "--input",
            s(&case),
            "--out",
            s(out),
        ]);
    }
    assert_eq!(read_tree(&a), read_tree(&b));
    let batch = f.root.join("batch");
    ok(&[
        "segment",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&f.ckpt),
        "--input",
        s(&f.data),
        "--out",
        s(&batch),
        "--workers",
        "3",
    ]);
    assert_eq!(
        load_labels(&a.join("test_tumor_000")).unwrap(),
        load_labels(&batch.join("test_tumor_000")).unwrap()
    );
}

#[test]
fn external_refiner_is_substitutable() {
    let f = fixture();
    let case = f.data.join("test_tumor_001");
    let (builtin, external) = (f.root.join("ref_builtin"), f.root.join("ref_external"));
    let cmd = format!("'{}' serve-refiner", env!("CARGO_BIN_EXE_uadseg"));
    for (out, extra) in [
        (&builtin, vec![]),
        (&external, vec!["--refiner", "external", "--refiner-cmd", &cmd]),
    ] {
        let mut args = vec![
            "segment",
            "--config",
            s(&f.config),
            "--checkpoint",
            s(&f.ckpt),
            "--input",
            s(&case),
            "--out",
            s(out),
            "--debug",
        ];
        args.extend(extra);
        ok(&args);
    }
    for stage in &DEBUG_STAGES[..5] {
        assert_eq!(
            read_tree(&builtin.join("debug/test_tumor_001").join(stage)),
            read_tree(&external.join("debug/test_tumor_001").join(stage)),
            "stage {stage}"
        );
    }
    let labels = load_labels(&external.join("test_tumor_001")).unwrap();
    assert_eq!(labels.dims(), load_labels(&case).unwrap().dims());

    let (c, err) = code(&[
        "segment",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&f.ckpt),
        "--input",
        s(&case),
        "--out",
        s(&f.root.join("ref_missing")),
        "--refiner",
        "external",
        "--refiner-cmd",
        "/nonexistent/refiner",
    ]);
    assert_eq!(c, 4, "{err}");
    let (c, err) = code(&[
        "segment",
        "--refiner",
        "external",
        "--checkpoint",
        s(&f.ckpt),
        "--input",
        s(&case),
    ]);
    assert_eq!(c, 2, "{err}");
}

#[test]
fn reconstruct_writes_model_modalities() {
    let f = fixture();
    let out = f.root.join("recon");
    ok(&[
        "reconstruct",
        "--checkpoint",
        s(&f.ckpt),
        "--case",
        s(&f.data.join("test_healthy_000")),
        "--out",
        s(&out),
    ]);
    let recon = load_volume(&out).unwrap();
    let orig = load_volume(&f.data.join("test_healthy_000")).unwrap();
    assert_eq!(recon.dims(), orig.dims());
    assert_eq!(recon.modalities(), Modality::ALL);
    assert!(recon.data().iter().all(|v| v.is_finite()));
}

#[test]
fn evaluate_command_identity_and_mismatch() {
    let f = fixture();
    let report = f.root.join("eval_report");
    let table = ok(&[
        "evaluate",
        "--pred",
        s(&f.data),
        "--gt",
        s(&f.data),
        "--out",
        s(&report),
    ]);
    let header = table.lines().next().unwrap();
    for col in ["DSC ET", "DSC NET", "DSC SNFH", "DSC TC", "DSC WT", "DR %"] {
        assert!(header.contains(col), "{header}");
    }
    let mean = table.lines().last().unwrap();
    assert!(mean.starts_with("mean"), "{mean}");
    let cells: Vec<&str> = mean.split_whitespace().skip(1).collect();
    assert_eq!(cells, ["1.000", "1.000", "1.000", "1.000", "1.000", "100.0"]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["detection_rate"], 1.0);

    let partial = f.root.join("partial_pred");
    fs::create_dir_all(&partial).unwrap();
    let src = f.data.join("test_tumor_000");
    fs::create_dir_all(partial.join("test_tumor_000")).unwrap();
    for name in ["labels.json", "labels.u8"] {
        fs::copy(src.join(name), partial.join("test_tumor_000").join(name)).unwrap();
    }
    let (c, err) = code(&[
        "evaluate",
        "--pred",
        s(&partial),
        "--gt",
        s(&f.data),
        "--out",
        s(&report),
    ]);
    assert_eq!(c, 3, "{err}");
    assert!(
        err.contains("test_tumor_001") && err.contains("test_healthy_000"),
        "{err}"
    );
}

fn decode(path: &Path) -> image::RgbImage {
    image::open(path).unwrap().to_rgb8()
}

#[test]
fn overlay_pngs() {
    let f = fixture();
    let case = f.data.join("test_tumor_000");
    let (a, b) = (f.root.join("ov_a"), f.root.join("ov_b"));
    for out in [&a, &b] {
        ok(&[
            "overlay",
            "--case",
            s(&case),
            "--pred",
            s(&case),
            "--gt",
            s(&case),
            "--out",
            s(out),
            "--z",
            "10:20",
        ]);
    }
    let files = read_tree(&a);
    assert_eq!(files.len(), 10);
    assert_eq!(files, read_tree(&b));
    let img = decode(&a.join("slice_015.png"));
    assert_eq!((img.width(), img.height()), (192, 96));
    let labels = load_labels(&case).unwrap();
    let coloured = img.pixels().filter(|p| !(p[0] == p[1] && p[1] == p[2])).count();
    assert_eq!(coloured, 2 * labels.slice(15).iter().filter(|&&l| l != 0).count());

    let empty_dir = f.root.join("empty_pred");
    uadseg::volume::save_labels(&LabelVolume::zeros(labels.dims()), &empty_dir).unwrap();
    let c = f.root.join("ov_empty");
    ok(&[
        "overlay",
        "--case",
        s(&case),
        "--pred",
        s(&empty_dir),
        "--out",
        s(&c),
        "--z",
        "15:16",
    ]);
    let img = decode(&c.join("slice_015.png"));
    assert_eq!((img.width(), img.height()), (96, 96));
    assert!(img.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));

    let (code_, err) = code(&["overlay", "--case", s(&case), "--out", s(&c), "--z", "20:10"]);
    assert_eq!(code_, 2, "{err}");
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"postproc": {"gate": 0.5}}"#).unwrap();
    let (c, err) = code(&["phantom", "--config", s(&bad), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(c, 2, "{err}");
    let (c, _) = code(&[
        "phantom",
        "--config",
        s(&tmp.path().join("nope.json")),
        "--out",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(c, 2);
    let (c, _) = code(&["segment", "--refiner", "sam"]);
    assert_eq!(c, 2);
    let (c, err) = code(&[
        "evaluate",
        "--pred",
        s(&tmp.path().join("none")),
        "--gt",
        s(&tmp.path().join("none")),
    ]);
    assert_eq!(c, 3, "{err}");
}

#[test]
fn serve_refiner_answers_protocol_requests() {
    use std::io::Write;
    use std::process::Stdio;
    let mut child = bin()
        .arg("serve-refiner")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    writeln!(stdin, "not json").unwrap();
    let image: Vec<u8> = [1.0f32; 16].iter().flat_map(|v| v.to_le_bytes()).collect();
    use base64::Engine;
    let b64 = base64::engine::general_purpose::STANDARD.encode(&image);
    writeln!(
        stdin,
        r#"{{"id": 7, "h": 4, "w": 4, "image_b64": "{b64}", "bbox": [0, 0, 3, 3], "points": [[1,1],[2,2],[1,2],[2,1],[0,0]]}}"#
    )
    .unwrap();
    drop(stdin);
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0]["error"].is_string());
    assert_eq!(lines[1]["id"], 7);
    assert_eq!(lines[1]["confidence"], 1.0);
    let mask = base64::engine::general_purpose::STANDARD
        .decode(lines[1]["mask_b64"].as_str().unwrap())
        .unwrap();
    assert_eq!(mask, vec![1u8; 16]);
}
