//! Residual-to-mask postprocessing and multimodal mask fusion.
//!
//! Per modality: one-sided residual → threshold `τ = max(f·max, floor)` →
//! Otsu → per-slice opening/closing → largest 3-D component → optional
//! prompt-driven refinement of each slice (followed by a second
//! largest-component pass). The T1c and T2f masks are then fused into
//! ET / SNFH / NET labels.

mod morph;
mod otsu;
mod prompts;
mod refine;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelVolume, Modality, MultimodalVolume, LABEL_ET, LABEL_NET, LABEL_SNFH};

pub use morph::{
    dilate2d, erode2d, fill_holes2d, fill_holes_per_slice, label_components, label_components_3d, largest_component,
    largest_component_3d, morph_clean, CONNECTIVITIES,
};
pub use otsu::{otsu_binarize_values, otsu_split, OtsuHistogram, OTSU_BINS};
pub use prompts::{make_prompts, PromptSet, PROMPT_POINTS};
pub use refine::{
    iou, refine_slice, serve_refiner, BuiltinRefiner, ExternalRefiner, RefineOutcome, RefinePolicy, RefineRequest,
    RefinerReply, RegionRefiner, WireRequest, WireResponse,
};

/// Boolean volume indexed `(z, y, x)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask3D {
    dims: Dims,
    data: Vec<bool>,
}

impl BinaryMask3D {
    pub fn from_vec(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.voxels() {
            return Err(Error::shape("mask", &[dims.d, dims.h, dims.w], &[data.len()]));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![false; dims.voxels()],
        }
    }

    /// Voxels whose label is one of `classes`.
    pub fn from_labels(labels: &LabelVolume, classes: &[u8]) -> Self {
        Self {
            dims: labels.dims(),
            data: labels.mask_of(classes),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<bool> {
        self.data
    }

    pub fn slice(&self, z: usize) -> &[bool] {
        let p = self.dims.plane();
        &self.data[z * p..(z + 1) * p]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [bool] {
        let p = self.dims.plane();
        &mut self.data[z * p..(z + 1) * p]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Whether every true voxel of `self` is true in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask3D) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    fn zip_with(&self, other: &BinaryMask3D, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        if self.dims != other.dims {
            let (a, b) = (self.dims, other.dims);
            return Err(Error::shape("mask", &[a.d, a.h, a.w], &[b.d, b.h, b.w]));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { dims: self.dims, data })
    }

    pub fn and(&self, other: &BinaryMask3D) -> Result<Self> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask3D) -> Result<Self> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &BinaryMask3D) -> Result<Self> {
        self.zip_with(other, |a, b| a && !b)
    }

    /// The mask as a single-modality `0.0 / 1.0` volume.
    pub fn to_volume(&self, modality: Modality, spacing_mm: [f64; 3]) -> Result<MultimodalVolume> {
        let data = self.data.iter().map(|&b| b as u8 as f32).collect();
        MultimodalVolume::new(vec![modality], self.dims, spacing_mm, data)
    }
}

/// Per-modality one-sided residual `max(original − reconstruction, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    volume: MultimodalVolume,
}

impl ResidualMap {
    pub fn modality(&self, m: Modality) -> Result<&[f32]> {
        self.volume.modality(m)
    }

    pub fn as_volume(&self) -> &MultimodalVolume {
        &self.volume
    }

    pub fn into_volume(self) -> MultimodalVolume {
        self.volume
    }
}

fn check_pair(original: &MultimodalVolume, recon: &MultimodalVolume) -> Result<()> {
    if original.shape() != recon.shape() || original.modalities() != recon.modalities() {
        return Err(Error::shape("residual", &original.shape(), &recon.shape()));
    }
    Ok(())
}

/// Hyperintense residual of every modality.
pub fn residual(original: &MultimodalVolume, recon: &MultimodalVolume) -> Result<ResidualMap> {
    check_pair(original, recon)?;
    let data = residual_values(original.data(), recon.data());
    Ok(ResidualMap {
        volume: original.with_data(data)?,
    })
}

fn residual_values(original: &[f32], recon: &[f32]) -> Vec<f32> {
    original.iter().zip(recon).map(|(&o, &r)| (o - r).max(0.0)).collect()
}

/// Zero every value below `τ = max(fraction · max(map), floor)`; returns the
/// thresholded map and `τ`.
pub fn threshold(map: &[f32], fraction: f64, floor: f64) -> (Vec<f32>, f32) {
    let peak = map.iter().fold(0.0f32, |m, &v| m.max(v));
    let tau = (fraction * peak as f64).max(floor) as f32;
    let out = map.iter().map(|&v| if v >= tau { v } else { 0.0 }).collect();
    (out, tau)
}

/// Otsu binarisation of a thresholded map.
pub fn otsu_binarize(map: &[f32], dims: Dims) -> Result<BinaryMask3D> {
    BinaryMask3D::from_vec(dims, otsu_binarize_values(map))
}

/// Which refiner, if any, runs after the largest-component step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RefinerMode {
    Off,
    #[default]
    Builtin,
    External,
}

/// Postprocessing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocConfig {
    pub threshold_fraction: f64,
    /// Residual floor, in z-score units.
    pub threshold_floor: f64,
    /// 3-D neighbourhood of the component step: 6, 18 or 26.
    pub connectivity: u8,
    pub refiner: RefinerMode,
    /// Command line of the external refiner.
    pub refiner_cmd: Vec<String>,
    pub confidence_gate: f64,
    pub max_attempts: usize,
    /// Intensity tolerance of the built-in region grower, in z-score units.
    pub region_tolerance: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            threshold_fraction: 0.2,
            threshold_floor: 1.2,
            connectivity: 26,
            refiner: RefinerMode::Builtin,
            refiner_cmd: Vec::new(),
            confidence_gate: 0.9,
            max_attempts: 3,
            region_tolerance: 1.0,
        }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.threshold_fraction) {
            return bad(format!("threshold_fraction {} outside [0, 1]", self.threshold_fraction));
        }
        if !(self.threshold_floor.is_finite() && self.threshold_floor > 0.0) {
            return bad(format!(
                "threshold_floor must be positive, got {}",
                self.threshold_floor
            ));
        }
        if !CONNECTIVITIES.contains(&self.connectivity) {
            return bad(format!("connectivity must be 6, 18 or 26, got {}", self.connectivity));
        }
        if !(0.0..=1.0).contains(&self.confidence_gate) {
            return bad(format!("confidence_gate {} outside [0, 1]", self.confidence_gate));
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        if !(self.region_tolerance.is_finite() && self.region_tolerance >= 0.0) {
            return bad(format!(
                "region_tolerance must be nonnegative, got {}",
                self.region_tolerance
            ));
        }
        if self.refiner == RefinerMode::External && self.refiner_cmd.is_empty() {
            return bad("refiner `external` needs refiner_cmd".into());
        }
        Ok(())
    }

    pub fn policy(&self) -> RefinePolicy {
        RefinePolicy {
            confidence_gate: self.confidence_gate,
            max_attempts: self.max_attempts,
        }
    }
}

/// Every intermediate of [`segment_modality`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStages {
    pub modality: Modality,
    pub tau: f32,
    pub residual: Vec<f32>,
    pub thresholded: Vec<f32>,
    pub otsu: BinaryMask3D,
    pub morph: BinaryMask3D,
    pub component: BinaryMask3D,
    /// Final mask: refined slices restacked and reduced to the largest
    /// component again; equals `component` when no refiner ran.
    pub refined: BinaryMask3D,
    /// `(z, outcome)` for every refined slice.
    pub refinements: Vec<(usize, RefineOutcome)>,
}

impl ModalityStages {
    pub fn mask(&self) -> &BinaryMask3D {
        &self.refined
    }
}

/// Prompt seed of slice `z` of the `index`-th segmented modality.
pub fn slice_seed(seed: u64, index: usize, z: usize) -> u64 {
    seed ^ ((index as u64 + 1) << 40) ^ ((z as u64) << 8)
}

/// Refine every nonempty slice of `mask` against `image` and keep the largest
/// component of the result.
pub fn refine_volume(
    image: &[f32],
    mask: &BinaryMask3D,
    refiner: &mut dyn RegionRefiner,
    cfg: &PostprocConfig,
    seed_of: impl Fn(usize) -> u64,
) -> Result<(BinaryMask3D, Vec<(usize, RefineOutcome)>)> {
    let dims = mask.dims();
    let plane = dims.plane();
    let mut out = mask.clone();
    let mut log = Vec::new();
    for z in 0..dims.d {
        if !mask.slice(z).iter().any(|&b| b) {
            continue;
        }
        let image_slice = &image[z * plane..(z + 1) * plane];
        let outcome = refine_slice(
            image_slice,
            mask.slice(z),
            dims.h,
            dims.w,
            refiner,
            seed_of(z),
            cfg.policy(),
        )?;
        out.slice_mut(z).copy_from_slice(&outcome.mask);
        log.push((z, outcome));
    }
    Ok((largest_component(&out, cfg.connectivity), log))
}

/// Run the full per-modality chain. `refiner = None` skips refinement.
pub fn segment_modality(
    original: &MultimodalVolume,
    recon: &MultimodalVolume,
    modality: Modality,
    refiner: Option<&mut dyn RegionRefiner>,
    cfg: &PostprocConfig,
    seed: u64,
) -> Result<ModalityStages> {
    check_pair(original, recon)?;
    let dims = original.dims();
    let index = original
        .position(modality)
        .ok_or_else(|| Error::UnknownModality(modality.tag().into()))?;
    let image = original.modality(modality)?;
    let residual = residual_values(image, recon.modality(modality)?);
    let (thresholded, tau) = threshold(&residual, cfg.threshold_fraction, cfg.threshold_floor);
    let otsu = otsu_binarize(&thresholded, dims)?;
    let morph = morph_clean(&otsu);
    let component = largest_component(&morph, cfg.connectivity);
    let (refined, refinements) = match refiner {
        Some(r) => refine_volume(image, &component, r, cfg, |z| slice_seed(seed, index, z))?,
        None => (component.clone(), Vec::new()),
    };
    Ok(ModalityStages {
        modality,
        tau,
        residual,
        thresholded,
        otsu,
        morph,
        component,
        refined,
        refinements,
    })
}

/// Combine the T1c and T2f masks: ET = T1c, SNFH = T2f ∖ T1c, and NET = the
/// per-slice holes of ET ∪ SNFH.
pub fn fuse_masks(t1c: &BinaryMask3D, t2f: &BinaryMask3D) -> Result<LabelVolume> {
    let et = t1c;
    let snfh = t2f.and_not(t1c)?;
    let union = et.or(&snfh)?;
    let net = fill_holes_per_slice(&union).and_not(&union)?;
    let data = (0..union.data().len())
        .map(|i| {
            if et.data()[i] {
                LABEL_ET
            } else if snfh.data()[i] {
                LABEL_SNFH
            } else if net.data()[i] {
                LABEL_NET
            } else {
                0
            }
        })
        .collect();
    LabelVolume::new(t1c.dims(), data)
}
