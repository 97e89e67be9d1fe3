//! Multimodal volume data model, the on-disk directory format, per-volume
//! z-score normalisation and the healthy/anomalous slice split.
//!
//! A volume directory holds `header.json` plus one `<tag>.f32` file per
//! modality: little-endian `f32`, C order with z outermost and x innermost.
//! Label volumes are stored as `labels.u8` with a `labels.json` header.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MRI sequence tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1c,
    T1n,
    T2f,
    T2w,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1c, Modality::T1n, Modality::T2f, Modality::T2w];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::T1c => "t1c",
            Modality::T1n => "t1n",
            Modality::T2f => "t2f",
            Modality::T2w => "t2w",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::UnknownModality(s.to_string()))
    }
}

/// Spatial extent `(depth, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub fn voxels(self) -> usize {
        self.d * self.h * self.w
    }

    pub fn plane(self) -> usize {
        self.h * self.w
    }

    pub fn index(self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }
}

/// Four-modality (or fewer) intensity volume, indexed `(modality, z, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalVolume {
    modalities: Vec<Modality>,
    dims: Dims,
    spacing_mm: [f64; 3],
    data: Vec<f32>,
}

impl MultimodalVolume {
    pub fn new(modalities: Vec<Modality>, dims: Dims, spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::InvalidHeader("at least one modality required".into()));
        }
        let mut seen = HashSet::new();
        for m in &modalities {
            if !seen.insert(*m) {
                return Err(Error::DuplicateModality(m.tag().into()));
            }
        }
        if dims.d == 0 || dims.h == 0 || dims.w == 0 {
            return Err(Error::InvalidHeader(format!("empty spatial extent {dims:?}")));
        }
        if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidHeader(format!(
                "spacing must be positive, got {spacing_mm:?}"
            )));
        }
        let expected = modalities.len() * dims.voxels();
        if data.len() != expected {
            return Err(Error::shape(
                "volume",
                &[modalities.len(), dims.d, dims.h, dims.w],
                &[data.len()],
            ));
        }
        let per = dims.voxels();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData {
                tag: modalities[i / per].tag().into(),
                index: i % per,
            });
        }
        Ok(Self {
            modalities,
            dims,
            spacing_mm,
            data,
        })
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// `[M, D, H, W]`.
    pub fn shape(&self) -> [usize; 4] {
        [self.modalities.len(), self.dims.d, self.dims.h, self.dims.w]
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn position(&self, m: Modality) -> Option<usize> {
        self.modalities.iter().position(|&x| x == m)
    }

    /// Voxels of the `i`-th modality.
    pub fn channel(&self, i: usize) -> &[f32] {
        let n = self.dims.voxels();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.dims.voxels();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn modality(&self, m: Modality) -> Result<&[f32]> {
        let i = self.position(m).ok_or_else(|| Error::UnknownModality(m.tag().into()))?;
        Ok(self.channel(i))
    }

    /// Axial slice `z` of modality index `i`, `H·W` values.
    pub fn slice(&self, i: usize, z: usize) -> &[f32] {
        let p = self.dims.plane();
        &self.channel(i)[z * p..(z + 1) * p]
    }

    /// Axial slice `z` with all modalities stacked channel-first, `M·H·W` values.
    pub fn stacked_slice(&self, z: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.modalities.len() * self.dims.plane());
        for i in 0..self.modalities.len() {
            out.extend_from_slice(self.slice(i, z));
        }
        out
    }

    /// Volume with identical metadata and new voxel data.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.modalities.clone(), self.dims, self.spacing_mm, data)
    }
}

/// Voxel labels: 0 background, 1 NET, 2 SNFH, 3 ET.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    data: Vec<u8>,
}

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NET: u8 = 1;
pub const LABEL_SNFH: u8 = 2;
pub const LABEL_ET: u8 = 3;

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.voxels() {
            return Err(Error::shape("labels", &[dims.d, dims.h, dims.w], &[data.len()]));
        }
        if let Some(index) = data.iter().position(|&v| v > LABEL_ET) {
            return Err(Error::UnknownLabel {
                value: data[index],
                index,
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0; dims.voxels()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let p = self.dims.plane();
        &self.data[z * p..(z + 1) * p]
    }

    /// Boolean mask of voxels whose label is in `classes`.
    pub fn mask_of(&self, classes: &[u8]) -> Vec<bool> {
        self.data.iter().map(|v| classes.contains(v)).collect()
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }
}

/// Statistics used to z-score one modality of one volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub modality: Modality,
    pub mean: f64,
    pub std: f64,
    pub epsilon: f64,
}

/// Guard against division by a vanishing standard deviation.
pub const NORMALIZATION_EPSILON: f64 = 1e-8;

impl NormalizationRecord {
    pub fn divisor(&self) -> f64 {
        self.std.max(self.epsilon)
    }
}

/// Per-volume, per-modality z-score over all voxels.
pub fn zscore_normalize(vol: &MultimodalVolume) -> (MultimodalVolume, Vec<NormalizationRecord>) {
    let mut out = vol.clone();
    let mut records = Vec::with_capacity(vol.modalities.len());
    for (i, &m) in vol.modalities.iter().enumerate() {
        let values = vol.channel(i);
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let record = NormalizationRecord {
            modality: m,
            mean,
            std: var.sqrt(),
            epsilon: NORMALIZATION_EPSILON,
        };
        let div = record.divisor();
        for v in out.channel_mut(i) {
            *v = ((*v as f64 - mean) / div) as f32;
        }
        records.push(record);
    }
    (out, records)
}

/// Inverse of [`zscore_normalize`].
pub fn denormalize(vol: &MultimodalVolume, records: &[NormalizationRecord]) -> Result<MultimodalVolume> {
    if records.len() != vol.modalities.len() {
        return Err(Error::shape("denormalize", &[vol.modalities.len()], &[records.len()]));
    }
    let mut out = vol.clone();
    for (i, r) in records.iter().enumerate() {
        let div = r.divisor();
        for v in out.channel_mut(i) {
            *v = (*v as f64 * div + r.mean) as f32;
        }
    }
    Ok(out)
}

/// Stack of channel-first 2-D slices, `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SliceBatch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    /// Source slice index of every entry.
    pub z: Vec<usize>,
}

impl SliceBatch {
    pub fn empty(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: Vec::new(),
            z: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn slice_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn get(&self, i: usize) -> &[f32] {
        let n = self.slice_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, z: usize, slice: &[f32]) {
        debug_assert_eq!(slice.len(), self.slice_len());
        self.data.extend_from_slice(slice);
        self.z.push(z);
    }

    /// Append every slice of `other`; spatial layout must match.
    pub fn extend(&mut self, other: &SliceBatch) -> Result<()> {
        if (self.channels, self.height, self.width) != (other.channels, other.height, other.width) {
            return Err(Error::shape(
                "slice batch",
                &[self.channels, self.height, self.width],
                &[other.channels, other.height, other.width],
            ));
        }
        self.data.extend_from_slice(&other.data);
        self.z.extend_from_slice(&other.z);
        Ok(())
    }

    /// New batch holding the entries at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> SliceBatch {
        let mut out = SliceBatch::empty(self.channels, self.height, self.width);
        for &i in indices {
            out.push(self.z[i], self.get(i));
        }
        out
    }
}

/// Split axial slices into those with no labelled voxel and the rest.
pub fn split_pseudo_volumes(vol: &MultimodalVolume, labels: &LabelVolume) -> Result<(SliceBatch, SliceBatch)> {
    let dims = vol.dims();
    if dims != labels.dims() {
        return Err(Error::shape(
            "split_pseudo_volumes",
            &[dims.d, dims.h, dims.w],
            &[labels.dims.d, labels.dims.h, labels.dims.w],
        ));
    }
    let c = vol.modalities.len();
    let mut healthy = SliceBatch::empty(c, dims.h, dims.w);
    let mut anomalous = SliceBatch::empty(c, dims.h, dims.w);
    for z in 0..dims.d {
        let slice = vol.stacked_slice(z);
        if labels.slice(z).iter().any(|&v| v != 0) {
            anomalous.push(z, &slice);
        } else {
            healthy.push(z, &slice);
        }
    }
    Ok((healthy, anomalous))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    shape: [usize; 4],
    spacing_mm: [f64; 3],
    modalities: Vec<String>,
    dtype: String,
    order: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelHeader {
    shape: [usize; 3],
    dtype: String,
    order: String,
    legend: std::collections::BTreeMap<String, String>,
}

pub const HEADER_FILE: &str = "header.json";
pub const LABEL_FILE: &str = "labels.u8";
pub const LABEL_HEADER_FILE: &str = "labels.json";

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a volume directory.
pub fn load_volume(dir: &Path) -> Result<MultimodalVolume> {
    let header: VolumeHeader = read_json(&dir.join(HEADER_FILE))?;
    if header.dtype != "f32le" || header.order != "zyx" {
        return Err(Error::InvalidHeader(format!(
            "unsupported dtype/order {}/{}",
            header.dtype, header.order
        )));
    }
    let [m, d, h, w] = header.shape;
    if m != header.modalities.len() {
        return Err(Error::InvalidHeader(format!(
            "shape declares {m} modalities but {} tags listed",
            header.modalities.len()
        )));
    }
    let mut modalities = Vec::with_capacity(m);
    let mut seen = HashSet::new();
    for tag in &header.modalities {
        let modality: Modality = tag.parse()?;
        if !seen.insert(modality) {
            return Err(Error::DuplicateModality(tag.clone()));
        }
        modalities.push(modality);
    }
    let dims = Dims::new(d, h, w);
    let expected = 4 * dims.voxels();
    let mut data = Vec::with_capacity(m * dims.voxels());
    for modality in &modalities {
        let path = dir.join(format!("{}.f32", modality.tag()));
        if !path.exists() {
            return Err(Error::MissingModality {
                tag: modality.tag().into(),
                path,
            });
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != expected {
            return Err(Error::ByteCount {
                path,
                expected,
                found: bytes.len(),
            });
        }
        let start = data.len();
        data.extend(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        if let Some(i) = data[start..].iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData {
                tag: modality.tag().into(),
                index: i,
            });
        }
    }
    MultimodalVolume::new(modalities, dims, header.spacing_mm, data)
}

/// Write a volume directory, creating it if needed.
pub fn save_volume(vol: &MultimodalVolume, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = VolumeHeader {
        shape: vol.shape(),
        spacing_mm: vol.spacing_mm,
        modalities: vol.modalities.iter().map(|m| m.tag().to_string()).collect(),
        dtype: "f32le".into(),
        order: "zyx".into(),
    };
    write_json(&dir.join(HEADER_FILE), &header)?;
    for (i, m) in vol.modalities.iter().enumerate() {
        let path = dir.join(format!("{}.f32", m.tag()));
        let bytes: Vec<u8> = vol.channel(i).iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Read `labels.u8` + `labels.json` from `dir`.
pub fn load_labels(dir: &Path) -> Result<LabelVolume> {
    let header: LabelHeader = read_json(&dir.join(LABEL_HEADER_FILE))?;
    if header.dtype != "u8" || header.order != "zyx" {
        return Err(Error::InvalidHeader(format!(
            "unsupported label dtype/order {}/{}",
            header.dtype, header.order
        )));
    }
    let [d, h, w] = header.shape;
    let dims = Dims::new(d, h, w);
    let path = dir.join(LABEL_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != dims.voxels() {
        return Err(Error::ByteCount {
            path,
            expected: dims.voxels(),
            found: bytes.len(),
        });
    }
    LabelVolume::new(dims, bytes)
}

/// Write `labels.u8` + `labels.json` into `dir`.
pub fn save_labels(labels: &LabelVolume, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let legend = [("0", "background"), ("1", "NET"), ("2", "SNFH"), ("3", "ET")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let header = LabelHeader {
        shape: [labels.dims.d, labels.dims.h, labels.dims.w],
        dtype: "u8".into(),
        order: "zyx".into(),
        legend,
    };
    write_json(&dir.join(LABEL_HEADER_FILE), &header)?;
    let path = dir.join(LABEL_FILE);
    fs::write(&path, &labels.data).map_err(|e| Error::io(&path, e))
}
