//! Run configuration and the stages the command line wires together:
//! phantom datasets, training, reconstruction, segmentation, evaluation and
//! the end-to-end phantom experiment.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{auroc, evaluate_case, MetricsConfig, MetricsReport, Region};
use crate::model::{
    build_model, history_csv, load_checkpoint, reconstruct_volume, save_checkpoint, train, EpochRecord, ModelConfig,
    ModelState, TrainConfig, CHECKPOINT_HEADER,
};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::postproc::{
    fuse_masks, segment_modality, BuiltinRefiner, ExternalRefiner, ModalityStages, PostprocConfig, RefinerMode,
    RegionRefiner,
};
use crate::volume::{
    load_labels, load_volume, read_json, save_labels, save_volume, split_pseudo_volumes, write_json, zscore_normalize,
    LabelVolume, Modality, MultimodalVolume, SliceBatch, HEADER_FILE, LABEL_HEADER_FILE,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PHANTOM_SIDECAR: &str = "phantom_spec.json";
pub const LOSS_FILE: &str = "loss.csv";
const MANIFEST_FORMAT: &str = "uadseg-dataset/1";

/// Modality order every model input uses.
pub const MODEL_MODALITIES: [Modality; 4] = Modality::ALL;
/// The two modalities that are segmented and fused.
pub const SEGMENTED: [Modality; 2] = [Modality::T1c, Modality::T2f];

/// Counts and template of a generated phantom dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Healthy phantoms used for training.
    pub n_train: usize,
    /// Healthy phantoms used for validation during training.
    pub n_val: usize,
    pub n_test_healthy: usize,
    pub n_test_tumor: usize,
    /// Template; `seed` and `tumor_present` are set per case and
    /// `tumor_count` applies to tumour cases only.
    pub phantom: PhantomSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 10,
            n_val: 1,
            n_test_healthy: 10,
            n_test_tumor: 20,
            phantom: PhantomSpec::default(),
        }
    }
}

/// Default locations used when a command is not given explicit paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            checkpoint: "run/checkpoint".into(),
            predictions: "run/predictions".into(),
            report: "run/report".into(),
        }
    }
}

/// A complete, serialisable run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub postproc: PostprocConfig,
    pub metrics: MetricsConfig,
    pub dataset: DatasetConfig,
    pub paths: PathsConfig,
    /// Worker threads for per-case work; 0 means one per CPU.
    pub workers: usize,
    /// Slices per forward pass at inference.
    pub inference_batch: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let model = ModelConfig::full();
        let mut dataset = DatasetConfig::default();
        dataset.phantom.dims.h = model.image_size;
        dataset.phantom.dims.w = model.image_size;
        Self {
            seed: 0,
            model,
            train: TrainConfig::default(),
            postproc: PostprocConfig::default(),
            metrics: MetricsConfig::default(),
            dataset,
            paths: PathsConfig::default(),
            workers: 0,
            inference_batch: 16,
        }
    }
}

impl PipelineConfig {
    /// Desk-scale phantom experiment.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig {
                lr: 2e-3,
                batch_size: 8,
                epochs: 10,
                ..TrainConfig::default()
            },
            metrics: MetricsConfig::phantom(),
            dataset: DatasetConfig::default(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path).map_err(|e| match e {
            Error::Json { path, source } => Error::InvalidConfig(format!("{}: {source}", path.display())),
            Error::Io { path, source } => Error::InvalidConfig(format!("{}: {source}", path.display())),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.postproc.validate()?;
        if self.model.n_modalities != MODEL_MODALITIES.len() {
            return Err(Error::InvalidConfig(format!(
                "the pipeline feeds {} modalities, model expects {}",
                MODEL_MODALITIES.len(),
                self.model.n_modalities
            )));
        }
        let dims = self.dataset.phantom.dims;
        if dims.h != self.model.image_size || dims.w != self.model.image_size {
            return Err(Error::InvalidConfig(format!(
                "phantom slices are {}x{}, model image_size is {}",
                dims.h, dims.w, self.model.image_size
            )));
        }
        if self.inference_batch == 0 {
            return Err(Error::InvalidConfig("inference_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

/// Map `f` over `items` on up to `workers` threads, each with its own state
/// from `init`. Results keep the input order; the first error wins.
pub fn parallel_map<T, S, R>(
    items: &[T],
    workers: usize,
    init: impl Fn() -> Result<S> + Sync,
    f: impl Fn(&mut S, &T) -> Result<R> + Sync,
) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let workers = workers.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let mut state = match init() {
                    Ok(s) => s,
                    Err(e) => {
                        let i = next.fetch_add(items.len(), Ordering::SeqCst);
                        if i < items.len() {
                            slots.lock().expect("result lock")[i] = Some(Err(e));
                        }
                        return;
                    }
                };
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    let r = f(&mut state, &items[i]);
                    let failed = r.is_err();
                    slots.lock().expect("result lock")[i] = Some(r);
                    if failed {
                        next.store(items.len(), Ordering::SeqCst);
                        break;
                    }
                }
            });
        }
    });
    let slots = slots.into_inner().expect("result lock");
    let mut out = Vec::with_capacity(items.len());
    let mut first_err = None;
    for slot in slots {
        match slot {
            Some(Ok(r)) => out.push(r),
            Some(Err(e)) => {
                first_err.get_or_insert(e);
            }
            None => {}
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Create `dir`, refusing to touch a non-empty one unless `force` is set, in
/// which case its contents are removed first.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() {
            if !force {
                return Err(Error::OutputExists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub name: String,
    pub split: Split,
    pub tumor: bool,
    pub seed: u64,
    /// Voxels inside the phantom brain mask.
    pub brain_voxels: usize,
}

/// Index of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub cases: Vec<CaseEntry>,
}

impl Manifest {
    pub fn load(dataset: &Path) -> Result<Self> {
        let m: Self = read_json(&dataset.join(MANIFEST_FILE))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::InvalidHeader(format!("unknown dataset format `{}`", m.format)));
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> Vec<&CaseEntry> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }

    pub fn case(&self, name: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.name == name)
    }
}

/// Case names and seeds, in generation order.
fn plan_cases(cfg: &PipelineConfig) -> Vec<(String, Split, bool, u64)> {
    let d = &cfg.dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let groups = [
        ("train", Split::Train, false, d.n_train),
        ("val", Split::Val, false, d.n_val),
        ("test_healthy", Split::Test, false, d.n_test_healthy),
        ("test_tumor", Split::Test, true, d.n_test_tumor),
    ];
    let mut plan = Vec::new();
    for (prefix, split, tumor, n) in groups {
        for i in 0..n {
            plan.push((format!("{prefix}_{i:03}"), split, tumor, rng.next_u64()));
        }
    }
    plan
}

/// Generate every phantom of the dataset, with labels, a spec sidecar per case
/// and `manifest.json`.
pub fn generate_dataset(cfg: &PipelineConfig, dir: &Path, force: bool) -> Result<Manifest> {
    let plan = plan_cases(cfg);
    prepare_output_dir(dir, force)?;
    let cases = parallel_map(
        &plan,
        cfg.worker_count(),
        || Ok(()),
        |_, (name, split, tumor, seed)| {
            let spec = PhantomSpec {
                seed: *seed,
                tumor_present: *tumor,
                tumor_count: if *tumor { cfg.dataset.phantom.tumor_count } else { 0 },
                ..cfg.dataset.phantom.clone()
            };
            let ph = generate_phantom(&spec)?;
            let case_dir = dir.join(name);
            save_volume(&ph.volume, &case_dir)?;
            save_labels(&ph.labels, &case_dir)?;
            write_json(&case_dir.join(PHANTOM_SIDECAR), &spec)?;
            Ok(CaseEntry {
                name: name.clone(),
                split: *split,
                tumor: *tumor,
                seed: *seed,
                brain_voxels: ph.brain_voxels(),
            })
        },
    )?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        seed: cfg.seed,
        cases,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A volume with exactly the model modalities, in model order.
fn model_input(vol: &MultimodalVolume) -> Result<MultimodalVolume> {
    if vol.modalities() == MODEL_MODALITIES {
        return Ok(vol.clone());
    }
    let mut data = Vec::with_capacity(vol.data().len());
    for m in MODEL_MODALITIES {
        data.extend_from_slice(
            vol.modality(m)
                .map_err(|_| Error::Data(format!("volume lacks modality `{m}` required by the model")))?,
        );
    }
    MultimodalVolume::new(MODEL_MODALITIES.to_vec(), vol.dims(), vol.spacing_mm(), data)
}

/// Normalised healthy slices of every case in `split`.
pub fn healthy_slices(dataset: &Path, manifest: &Manifest, split: Split) -> Result<SliceBatch> {
    let mut out: Option<SliceBatch> = None;
    for case in manifest.split(split) {
        let dir = dataset.join(&case.name);
        let vol = model_input(&load_volume(&dir)?)?;
        let labels = load_labels(&dir)?;
        let (norm, _) = zscore_normalize(&vol);
        let (healthy, _) = split_pseudo_volumes(&norm, &labels)?;
        match &mut out {
            None => out = Some(healthy),
            Some(b) => b.extend(&healthy)?,
        }
    }
    match out {
        Some(b) if !b.is_empty() => Ok(b),
        _ => Err(Error::Empty(
            format!("no healthy {split:?} slices in {}", dataset.display()).to_lowercase(),
        )),
    }
}

/// Train on the dataset's `train` split, validating on `val` (or, when that
/// split is empty, on every tenth training slice, which is then held out).
/// With `resume`, training continues from the checkpoint in `checkpoint_dir`.
/// Returns the best checkpointed state and this run's history; the history is
/// also appended to `loss.csv` beside the checkpoint.
pub fn train_model(
    cfg: &PipelineConfig,
    dataset: &Path,
    checkpoint_dir: &Path,
    resume: bool,
) -> Result<(ModelState, Vec<EpochRecord>)> {
    let manifest = Manifest::load(dataset)?;
    let all = healthy_slices(dataset, &manifest, Split::Train)?;
    let (train_set, val_set) = if manifest.split(Split::Val).is_empty() {
        let (held, kept): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|i| i % 10 == 9);
        (all.select(&kept), all.select(&held))
    } else {
        (all, healthy_slices(dataset, &manifest, Split::Val)?)
    };
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("too few healthy slices to train and validate".into()));
    }
    let mut state = if resume && checkpoint_dir.join(CHECKPOINT_HEADER).exists() {
        let s = load_checkpoint(checkpoint_dir)?;
        if s.config != cfg.model {
            return Err(Error::InvalidConfig(
                "checkpoint model differs from the configured model".into(),
            ));
        }
        s
    } else {
        fs::create_dir_all(checkpoint_dir).map_err(|e| Error::io(checkpoint_dir, e))?;
        build_model(&cfg.model, cfg.seed)?
    };
    log::info!(
        "training on {} slices, validating on {}, {} parameters",
        train_set.len(),
        val_set.len(),
        state.num_params()
    );
    let history = train(&mut state, &train_set, &val_set, &cfg.train, Some(checkpoint_dir))?;
    let csv_path = checkpoint_dir.join(LOSS_FILE);
    let mut csv = history_csv(&history);
    if resume {
        if let Ok(prev) = fs::read_to_string(&csv_path) {
            csv = prev + csv.split_once('\n').map_or("", |(_, rows)| rows);
        }
    }
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    if !checkpoint_dir.join(CHECKPOINT_HEADER).exists() {
        save_checkpoint(&state, checkpoint_dir)?;
    }
    Ok((load_checkpoint(checkpoint_dir)?, history))
}

/// Normalised input and its reconstruction, both in model modality order.
pub fn reconstruct_case(
    state: &ModelState,
    vol: &MultimodalVolume,
    batch: usize,
) -> Result<(MultimodalVolume, MultimodalVolume)> {
    let (norm, _) = zscore_normalize(&model_input(vol)?);
    let recon = reconstruct_volume(state, &norm, batch)?;
    Ok((norm, recon))
}

/// All outputs of segmenting one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSegmentation {
    pub norm: MultimodalVolume,
    pub recon: MultimodalVolume,
    pub stages: Vec<ModalityStages>,
    pub labels: LabelVolume,
}

impl CaseSegmentation {
    /// Per-slice mean squared reconstruction error over all modalities.
    pub fn slice_errors(&self) -> Vec<f64> {
        let dims = self.norm.dims();
        let plane = dims.plane();
        let channels = self.norm.modalities().len();
        (0..dims.d)
            .map(|z| {
                let mut sum = 0.0;
                for c in 0..channels {
                    let a = &self.norm.channel(c)[z * plane..(z + 1) * plane];
                    let b = &self.recon.channel(c)[z * plane..(z + 1) * plane];
                    sum += a.iter().zip(b).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>();
                }
                sum / (channels * plane) as f64
            })
            .collect()
    }
}

/// Build the configured refiner, if any.
pub fn make_refiner(cfg: &PostprocConfig) -> Result<Option<Box<dyn RegionRefiner>>> {
    Ok(match cfg.refiner {
        RefinerMode::Off => None,
        RefinerMode::Builtin => Some(Box::new(BuiltinRefiner {
            tolerance: cfg.region_tolerance,
        })),
        RefinerMode::External => Some(Box::new(ExternalRefiner::spawn(&cfg.refiner_cmd)?)),
    })
}

/// Reconstruct `vol`, segment T1c and T2f and fuse the masks.
pub fn segment_volume(
    cfg: &PipelineConfig,
    state: &ModelState,
    vol: &MultimodalVolume,
    mut refiner: Option<&mut dyn RegionRefiner>,
) -> Result<CaseSegmentation> {
    let (norm, recon) = reconstruct_case(state, vol, cfg.inference_batch)?;
    let mut stages = Vec::with_capacity(SEGMENTED.len());
    for m in SEGMENTED {
        let r = refiner.as_mut().map(|r| &mut **r as &mut dyn RegionRefiner);
        stages.push(segment_modality(&norm, &recon, m, r, &cfg.postproc, cfg.seed)?);
    }
    let labels = fuse_masks(stages[0].mask(), stages[1].mask())?;
    Ok(CaseSegmentation {
        norm,
        recon,
        stages,
        labels,
    })
}

/// Directory names of the six debug stages, in pipeline order.
pub const DEBUG_STAGES: [&str; 6] = [
    "1_residual",
    "2_threshold",
    "3_otsu",
    "4_morphology",
    "5_component",
    "6_refined",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageInfo {
    modality: Modality,
    tau: f32,
    refined_slices: usize,
    accepted_slices: usize,
    failed_slices: usize,
}

/// Write each stage as a volume holding one channel per segmented modality,
/// plus `stages.json` with the thresholds and refinement counts.
pub fn write_debug_stages(seg: &CaseSegmentation, dir: &Path) -> Result<()> {
    let dims = seg.norm.dims();
    let spacing = seg.norm.spacing_mm();
    let modalities: Vec<Modality> = seg.stages.iter().map(|s| s.modality).collect();
    let as_f32 = |m: &crate::postproc::BinaryMask3D| m.data().iter().map(|&b| b as u8 as f32).collect::<Vec<f32>>();
    for (k, name) in DEBUG_STAGES.iter().enumerate() {
        let mut data = Vec::with_capacity(modalities.len() * dims.voxels());
        for s in &seg.stages {
            match k {
                0 => data.extend_from_slice(&s.residual),
                1 => data.extend_from_slice(&s.thresholded),
                2 => data.extend(as_f32(&s.otsu)),
                3 => data.extend(as_f32(&s.morph)),
                4 => data.extend(as_f32(&s.component)),
                _ => data.extend(as_f32(&s.refined)),
            }
        }
        let vol = MultimodalVolume::new(modalities.clone(), dims, spacing, data)?;
        save_volume(&vol, &dir.join(name))?;
    }
    let info: Vec<StageInfo> = seg
        .stages
        .iter()
        .map(|s| StageInfo {
            modality: s.modality,
            tau: s.tau,
            refined_slices: s.refinements.len(),
            accepted_slices: s.refinements.iter().filter(|(_, o)| o.accepted).count(),
            failed_slices: s.refinements.iter().filter(|(_, o)| o.failed).count(),
        })
        .collect();
    write_json(&dir.join("stages.json"), &info)
}

/// Summary of one segmented case, enough for the experiment statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedCase {
    pub name: String,
    pub slice_errors: Vec<f64>,
    pub predicted_wt_voxels: usize,
}

/// Segment every listed case from `dataset` into `out/<case>/`, optionally
/// writing debug stages into `debug/<case>/`.
pub fn segment_cases(
    cfg: &PipelineConfig,
    state: &ModelState,
    dataset: &Path,
    cases: &[String],
    out: &Path,
    debug: Option<&Path>,
) -> Result<Vec<SegmentedCase>> {
    parallel_map(
        cases,
        cfg.worker_count(),
        || make_refiner(&cfg.postproc),
        |refiner, name| {
            let vol = load_volume(&dataset.join(name))?;
            let r = refiner.as_mut().map(|b| b.as_mut() as &mut dyn RegionRefiner);
            let seg = segment_volume(cfg, state, &vol, r)?;
            save_labels(&seg.labels, &out.join(name))?;
            if let Some(d) = debug {
                write_debug_stages(&seg, &d.join(name))?;
            }
            log::info!(
                "segmented {name}: {} tumour voxels",
                seg.labels.data().iter().filter(|&&l| l != 0).count()
            );
            Ok(SegmentedCase {
                name: name.clone(),
                slice_errors: seg.slice_errors(),
                predicted_wt_voxels: seg.labels.data().iter().filter(|&&l| l != 0).count(),
            })
        },
    )
}

/// Case directories (holding a label volume) directly under `root`.
pub fn label_cases(root: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().join(LABEL_HEADER_FILE).is_file() {
            out.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    Ok(out)
}

/// Score predictions against ground truth. When `gt_root` is a dataset with a
/// manifest only its test cases are expected (predictions named after its
/// other cases are ignored); otherwise every labelled case directory. Both
/// sides must list the same cases.
pub fn evaluate_predictions(pred_root: &Path, gt_root: &Path, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let mut pred = label_cases(pred_root)?;
    let gt: BTreeSet<String> = match Manifest::load(gt_root) {
        Ok(m) => {
            for c in m.cases.iter().filter(|c| c.split != Split::Test) {
                pred.remove(&c.name);
            }
            m.split(Split::Test).into_iter().map(|c| c.name.clone()).collect()
        }
        Err(_) => label_cases(gt_root)?,
    };
    let missing: Vec<&String> = gt.difference(&pred).collect();
    let extra: Vec<&String> = pred.difference(&gt).collect();
    if !missing.is_empty() || !extra.is_empty() {
        let list = |v: &[&String]| v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        return Err(Error::Data(format!(
            "case lists differ: missing predictions [{}], no ground truth for [{}]",
            list(&missing),
            list(&extra)
        )));
    }
    let names: Vec<String> = gt.into_iter().collect();
    let cases = names
        .iter()
        .map(|name| {
            let p = load_labels(&pred_root.join(name))?;
            let g = load_labels(&gt_root.join(name))?;
            evaluate_case(name, &p, &g, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::new(cases, cfg.clone())
}

/// Write `report.json` and `report.txt` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("report.json"), report)?;
    let path = dir.join("report.txt");
    fs::write(&path, report.table()).map_err(|e| Error::io(&path, e))
}

/// Statistics of the end-to-end phantom experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub train_slices: usize,
    pub epochs: usize,
    pub best_val_loss: Option<f64>,
    /// Test slices containing tumour / free of tumour.
    pub anomalous_slices: usize,
    pub healthy_slices: usize,
    /// Mean reconstruction MSE over anomalous and over healthy test slices.
    pub mean_error_anomalous: f64,
    pub mean_error_healthy: f64,
    /// Slice-level AUROC of reconstruction MSE, anomalous vs healthy slices.
    pub slice_auroc: f64,
    /// Detection rate over tumour cases.
    pub detection_rate: f64,
    /// Mean WT volumetric Dice over tumour cases.
    pub mean_wt_dice: f64,
    pub mean_wt_lesionwise_dice: f64,
    /// Predicted tumour volume as a fraction of brain volume, per healthy case.
    pub healthy_wt_fraction: Vec<(String, f64)>,
    pub max_healthy_wt_fraction: f64,
}

/// Paths of an experiment directory.
#[derive(Debug, Clone)]
pub struct ExperimentLayout {
    pub root: PathBuf,
}

impl ExperimentLayout {
    pub fn dataset(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }
    pub fn debug(&self) -> PathBuf {
        self.root.join("debug")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Generate phantoms, train, segment every test case, evaluate, and write
/// `summary.json` beside the report.
pub fn run_experiment(cfg: &PipelineConfig, out: &Path, force: bool, debug: bool) -> Result<ExperimentSummary> {
    cfg.validate()?;
    prepare_output_dir(out, force)?;
    let layout = ExperimentLayout {
        root: out.to_path_buf(),
    };
    cfg.save(&out.join("config.json"))?;
    let manifest = generate_dataset(cfg, &layout.dataset(), false)?;
    let (state, history) = train_model(cfg, &layout.dataset(), &layout.checkpoint(), false)?;
    let train_slices = healthy_slices(&layout.dataset(), &manifest, Split::Train)?.len();
    let test: Vec<String> = manifest.split(Split::Test).iter().map(|c| c.name.clone()).collect();
    let debug_dir = debug.then(|| layout.debug());
    let segmented = segment_cases(
        cfg,
        &state,
        &layout.dataset(),
        &test,
        &layout.predictions(),
        debug_dir.as_deref(),
    )?;
    let report = evaluate_predictions(&layout.predictions(), &layout.dataset(), &cfg.metrics)?;
    write_report(&report, &layout.report())?;

    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    let mut healthy_wt_fraction = Vec::new();
    for seg in &segmented {
        let entry = manifest
            .case(&seg.name)
            .expect("segmented cases come from the manifest");
        let labels = load_labels(&layout.dataset().join(&seg.name))?;
        let plane = labels.dims().plane();
        for (z, &e) in seg.slice_errors.iter().enumerate() {
            if labels.data()[z * plane..(z + 1) * plane].iter().any(|&l| l != 0) {
                pos.push(e);
            } else {
                neg.push(e);
            }
        }
        if !entry.tumor {
            healthy_wt_fraction.push((
                seg.name.clone(),
                seg.predicted_wt_voxels as f64 / entry.brain_voxels as f64,
            ));
        }
    }
    let tumour_cases: Vec<_> = report.cases.iter().filter(|c| c.detected.is_some()).collect();
    let mean = |f: &dyn Fn(&crate::metrics::CaseMetrics) -> f64| {
        tumour_cases.iter().map(|c| f(c)).sum::<f64>() / tumour_cases.len().max(1) as f64
    };
    let summary = ExperimentSummary {
        train_slices,
        epochs: history.len(),
        best_val_loss: state.best_val_loss,
        anomalous_slices: pos.len(),
        healthy_slices: neg.len(),
        mean_error_anomalous: pos.iter().sum::<f64>() / pos.len().max(1) as f64,
        mean_error_healthy: neg.iter().sum::<f64>() / neg.len().max(1) as f64,
        slice_auroc: auroc(&pos, &neg).unwrap_or(f64::NAN),
        detection_rate: report.detection_rate.unwrap_or(0.0),
        mean_wt_dice: mean(&|c| c.regions[&Region::Wt].volumetric),
        mean_wt_lesionwise_dice: mean(&|c| c.regions[&Region::Wt].lesionwise),
        max_healthy_wt_fraction: healthy_wt_fraction.iter().map(|(_, f)| *f).fold(0.0, f64::max),
        healthy_wt_fraction,
    };
    write_json(&layout.report().join("summary.json"), &summary)?;
    Ok(summary)
}

/// RGB rendering of one slice: grey base scaled from `[lo, hi]`, with labels
/// blended in (ET blue, SNFH green, NET red).
pub fn overlay_rgb(base: &[f32], labels: Option<&[u8]>, lo: f32, hi: f32) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(base.len() * 3);
    for (i, &v) in base.iter().enumerate() {
        let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round();
        let color = match labels.map_or(0, |l| l[i]) {
            crate::volume::LABEL_ET => Some([0.0, 0.0, 255.0]),
            crate::volume::LABEL_SNFH => Some([0.0, 255.0, 0.0]),
            crate::volume::LABEL_NET => Some([255.0, 0.0, 0.0]),
            _ => None,
        };
        match color {
            None => out.extend([g as u8; 3]),
            Some(c) => out.extend(c.map(|c: f32| (0.5 * g + 0.5 * c).round() as u8)),
        }
    }
    out
}

/// Whether `dir` holds a volume.
pub fn is_volume_dir(dir: &Path) -> bool {
    dir.join(HEADER_FILE).is_file()
}
