//! Seeded synthetic multimodal brain phantoms with ground-truth tumour labels.
//!
//! The brain is a soft-edged ellipsoid with Gaussian-smoothed texture in each
//! modality. Each tumour is a nested sphere: an enhancing core (bright in
//! T1c), a non-enhancing shell (dark in T1c, unremarkable in T2f) and an
//! outer FLAIR-hyperintense shell (bright in T2f).
//!
//! All randomness comes from one ChaCha8 stream seeded by [`PhantomSpec::seed`],
//! consumed in a fixed order, so a spec fully determines the output.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::gaussian_taps;
use crate::volume::{Dims, LabelVolume, Modality, MultimodalVolume, LABEL_ET, LABEL_NET, LABEL_SNFH};

/// Identifier of the random stream recorded alongside generated data.
pub const RNG_ALGORITHM: &str = "chacha8/rand_distr-standard-normal";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToneStats {
    pub mean: f64,
    pub std: f64,
}

const fn tone(mean: f64, std: f64) -> ToneStats {
    ToneStats { mean, std }
}

/// Raw intensity statistics of each tissue class for one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueTable {
    pub background: ToneStats,
    pub healthy: ToneStats,
    pub net: ToneStats,
    pub snfh: ToneStats,
    pub et: ToneStats,
}

/// Per-modality tissue intensities.
///
/// Raw values are chosen so that, after per-volume z-scoring of the default
/// geometry (brain ≈ 27 % of the field of view), ET sits about +3 above healthy
/// tissue in T1c, SNFH about +3 in T2f, and NET about −1 in T1c.
pub fn default_intensity_model() -> BTreeMap<Modality, TissueTable> {
    BTreeMap::from([
        (
            Modality::T1c,
            TissueTable {
                background: tone(0.0, 0.02),
                healthy: tone(1.0, 0.06),
                net: tone(0.55, 0.06),
                snfh: tone(1.05, 0.06),
                et: tone(2.4, 0.08),
            },
        ),
        (
            Modality::T1n,
            TissueTable {
                background: tone(0.0, 0.02),
                healthy: tone(0.9, 0.06),
                net: tone(0.7, 0.06),
                snfh: tone(0.85, 0.06),
                et: tone(0.95, 0.06),
            },
        ),
        (
            Modality::T2f,
            TissueTable {
                background: tone(0.0, 0.02),
                healthy: tone(0.8, 0.05),
                net: tone(0.85, 0.05),
                snfh: tone(1.9, 0.08),
                et: tone(1.8, 0.08),
            },
        ),
        (
            Modality::T2w,
            TissueTable {
                background: tone(0.0, 0.02),
                healthy: tone(1.1, 0.06),
                net: tone(1.3, 0.06),
                snfh: tone(1.8, 0.06),
                et: tone(1.4, 0.06),
            },
        ),
    ])
}

/// Radii (in voxels) of the nested tumour shells, drawn uniformly per tumour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TumorGeometry {
    pub et_radius: (f64, f64),
    pub net_thickness: (f64, f64),
    pub snfh_thickness: (f64, f64),
}

impl Default for TumorGeometry {
    fn default() -> Self {
        Self {
            et_radius: (2.5, 3.5),
            net_thickness: (1.5, 2.0),
            snfh_thickness: (2.5, 3.5),
        }
    }
}

impl TumorGeometry {
    fn max_radius(&self) -> f64 {
        self.et_radius.1 + self.net_thickness.1 + self.snfh_thickness.1
    }
}

/// Everything needed to regenerate a phantom bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    pub seed: u64,
    pub tumor_present: bool,
    pub tumor_count: usize,
    pub intensity_model: BTreeMap<Modality, TissueTable>,
    /// Gaussian sigma, in voxels, of the tissue texture.
    pub smoothness_sigma: f64,
    /// Width, in voxels, of the brain/background transition.
    pub edge_softness: f64,
    pub tumor_geometry: TumorGeometry,
    pub rng: String,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims::new(32, 96, 96),
            spacing_mm: [1.0, 1.0, 1.0],
            seed: 0,
            tumor_present: true,
            tumor_count: 1,
            intensity_model: default_intensity_model(),
            smoothness_sigma: 1.0,
            edge_softness: 1.5,
            tumor_geometry: TumorGeometry::default(),
            rng: RNG_ALGORITHM.into(),
        }
    }
}

impl PhantomSpec {
    pub fn healthy(seed: u64) -> Self {
        Self {
            seed,
            tumor_present: false,
            tumor_count: 0,
            ..Self::default()
        }
    }

    pub fn tumor(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let Dims { d, h, w } = self.dims;
        if d < 8 || h < 16 || w < 16 {
            return Err(Error::InvalidConfig(format!("phantom extent {d}x{h}x{w} too small")));
        }
        if self.tumor_present && self.tumor_count == 0 {
            return Err(Error::InvalidConfig("tumor_present with tumor_count 0".into()));
        }
        if self.rng != RNG_ALGORITHM {
            return Err(Error::InvalidConfig(format!("unsupported rng `{}`", self.rng)));
        }
        if self.intensity_model.is_empty() {
            return Err(Error::InvalidConfig("intensity model lists no modality".into()));
        }
        let g = &self.tumor_geometry;
        for (lo, hi) in [g.et_radius, g.net_thickness, g.snfh_thickness] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::InvalidConfig(format!("bad tumour radius range ({lo}, {hi})")));
            }
        }
        if self.tumor_present {
            let axes = brain_axes_nominal(self.dims);
            let smallest = axes.iter().copied().fold(f64::INFINITY, f64::min);
            if g.max_radius() > 0.7 * smallest {
                return Err(Error::InvalidConfig(format!(
                    "tumour radius up to {:.1} voxels does not fit a brain with semi-axis {smallest:.1}",
                    g.max_radius()
                )));
            }
        }
        if !(self.smoothness_sigma >= 0.0 && self.edge_softness > 0.0) {
            return Err(Error::InvalidConfig("smoothing parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Generated phantom plus its brain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: MultimodalVolume,
    pub labels: LabelVolume,
    /// Voxels whose brain membership is at least one half.
    pub brain: Vec<bool>,
}

impl Phantom {
    pub fn brain_voxels(&self) -> usize {
        self.brain.iter().filter(|&&b| b).count()
    }
}

fn brain_axes_nominal(dims: Dims) -> [f64; 3] {
    [dims.d as f64 * 0.42, dims.h as f64 * 0.40, dims.w as f64 * 0.36]
}

#[derive(Debug, Clone, Copy)]
struct Sphere {
    center: [f64; 3],
    et: f64,
    net: f64,
    snfh: f64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Separable Gaussian blur with reflected borders.
fn blur3d(field: &mut [f64], dims: Dims, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let taps = gaussian_taps(2 * radius + 1, sigma);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let Dims { d, h, w } = dims;
    let mut tmp = vec![0.0; field.len()];
    // x
    for z in 0..d {
        for y in 0..h {
            let row = dims.index(z, y, 0);
            for x in 0..w {
                let mut s = 0.0;
                for (t, &g) in taps.iter().enumerate() {
                    s += g * field[row + reflect(x as isize + t as isize - radius as isize, w)];
                }
                tmp[row + x] = s;
            }
        }
    }
    // y
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (t, &g) in taps.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - radius as isize, h);
                    s += g * tmp[dims.index(z, yy, x)];
                }
                field[dims.index(z, y, x)] = s;
            }
        }
    }
    // z
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (t, &g) in taps.iter().enumerate() {
                    let zz = reflect(z as isize + t as isize - radius as isize, d);
                    s += g * field[dims.index(zz, y, x)];
                }
                tmp[dims.index(z, y, x)] = s;
            }
        }
    }
    field.copy_from_slice(&tmp);
}

/// Unit-variance smoothed noise.
fn texture(rng: &mut ChaCha8Rng, dims: Dims, sigma: f64) -> Vec<f64> {
    let mut field: Vec<f64> = (0..dims.voxels()).map(|_| normal(rng)).collect();
    blur3d(&mut field, dims, sigma);
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in field.iter_mut() {
        *v = (*v - mean) / std.max(1e-12);
    }
    field
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Generate the volume, labels and brain mask described by `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let nominal = brain_axes_nominal(dims);
    let axes: [f64; 3] = std::array::from_fn(|i| nominal[i] * uniform(&mut rng, (0.92, 1.08)));
    let extent = [dims.d as f64, dims.h as f64, dims.w as f64];
    let center: [f64; 3] =
        std::array::from_fn(|i| (extent[i] - 1.0) / 2.0 + extent[i] * uniform(&mut rng, (-0.03, 0.03)));
    let mean_axis = (axes[0] + axes[1] + axes[2]) / 3.0;

    let mut membership = vec![0.0f64; dims.voxels()];
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let p = [z as f64, y as f64, x as f64];
                let r = (0..3)
                    .map(|i| ((p[i] - center[i]) / axes[i]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let signed = (r - 1.0) * mean_axis / spec.edge_softness;
                membership[dims.index(z, y, x)] = 1.0 / (1.0 + signed.exp());
            }
        }
    }
    let brain: Vec<bool> = membership.iter().map(|&b| b >= 0.5).collect();

    let mut spheres: Vec<Sphere> = Vec::new();
    if spec.tumor_present {
        let g = spec.tumor_geometry;
        for _ in 0..spec.tumor_count {
            let et = uniform(&mut rng, g.et_radius);
            let net = et + uniform(&mut rng, g.net_thickness);
            let snfh = net + uniform(&mut rng, g.snfh_thickness);
            let mut placed = None;
            for _ in 0..10_000 {
                let c: [f64; 3] = std::array::from_fn(|i| center[i] + axes[i] * uniform(&mut rng, (-0.7, 0.7)));
                // Every point of the outer sphere must sit well inside the brain.
                let fits = (0..3)
                    .map(|i| (((c[i] - center[i]).abs() + snfh) / axes[i]).powi(2))
                    .sum::<f64>()
                    <= 0.85;
                let apart = spheres.iter().all(|s| {
                    let dist = (0..3).map(|i| (s.center[i] - c[i]).powi(2)).sum::<f64>().sqrt();
                    dist > s.snfh + snfh + 3.0
                });
                if fits && apart {
                    placed = Some(c);
                    break;
                }
            }
            let c = placed.ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "could not place {} disjoint tumours inside the brain",
                    spec.tumor_count
                ))
            })?;
            spheres.push(Sphere {
                center: c,
                et,
                net,
                snfh,
            });
        }
    }

    let mut labels = vec![0u8; dims.voxels()];
    for s in &spheres {
        let lo: [usize; 3] = std::array::from_fn(|i| (s.center[i] - s.snfh).floor().max(0.0) as usize);
        let hi: [usize; 3] =
            std::array::from_fn(|i| ((s.center[i] + s.snfh).ceil() as usize).min(extent[i] as usize - 1));
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let p = [z as f64, y as f64, x as f64];
                    let dist = (0..3).map(|i| (p[i] - s.center[i]).powi(2)).sum::<f64>().sqrt();
                    let label = if dist <= s.et {
                        LABEL_ET
                    } else if dist <= s.net {
                        LABEL_NET
                    } else if dist <= s.snfh {
                        LABEL_SNFH
                    } else {
                        continue;
                    };
                    labels[dims.index(z, y, x)] = label;
                }
            }
        }
    }

    let modalities: Vec<Modality> = spec.intensity_model.keys().copied().collect();
    let mut data = Vec::with_capacity(modalities.len() * dims.voxels());
    for m in &modalities {
        let table = spec.intensity_model[m];
        let tex = texture(&mut rng, dims, spec.smoothness_sigma);
        for i in 0..dims.voxels() {
            let value = match labels[i] {
                LABEL_ET => table.et.mean + tex[i] * table.et.std,
                LABEL_NET => table.net.mean + tex[i] * table.net.std,
                LABEL_SNFH => table.snfh.mean + tex[i] * table.snfh.std,
                _ => {
                    let b = membership[i];
                    let mean = table.background.mean + b * (table.healthy.mean - table.background.mean);
                    let std = table.background.std + b * (table.healthy.std - table.background.std);
                    mean + tex[i] * std
                }
            };
            data.push(value as f32);
        }
    }

    Ok(Phantom {
        volume: MultimodalVolume::new(modalities, dims, spec.spacing_mm, data)?,
        labels: LabelVolume::new(dims, labels)?,
        brain,
    })
}
