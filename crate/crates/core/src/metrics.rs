//! Volumetric and lesion-wise Dice, detection rate and the evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::{label_components_3d, BinaryMask3D};
use crate::volume::{Dims, LabelVolume, LABEL_ET, LABEL_NET, LABEL_SNFH};

/// Evaluated tumour region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Region {
    Et,
    Net,
    Snfh,
    Tc,
    Wt,
}

impl Region {
    pub const ALL: [Region; 5] = [Region::Et, Region::Net, Region::Snfh, Region::Tc, Region::Wt];

    /// Label values making up the region.
    pub fn labels(self) -> &'static [u8] {
        match self {
            Region::Et => &[LABEL_ET],
            Region::Net => &[LABEL_NET],
            Region::Snfh => &[LABEL_SNFH],
            Region::Tc => &[LABEL_NET, LABEL_ET],
            Region::Wt => &[LABEL_NET, LABEL_SNFH, LABEL_ET],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Et => "ET",
            Region::Net => "NET",
            Region::Snfh => "SNFH",
            Region::Tc => "TC",
            Region::Wt => "WT",
        }
    }
}

fn check_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::shape("dice", &[a.d, a.h, a.w], &[b.d, b.h, b.w]));
    }
    Ok(())
}

fn dice_counts(inter: usize, a: usize, b: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Dice over whole volumes; two empty masks score 1.
pub fn volumetric_dice(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<f64> {
    check_dims(pred.dims(), gt.dims())?;
    let inter = pred.data().iter().zip(gt.data()).filter(|(&p, &g)| p && g).count();
    Ok(dice_counts(inter, pred.count(), gt.count()))
}

/// One ground-truth lesion and the prediction components matched to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMatch {
    /// Component label in the ground truth (raster order, 1-based).
    pub id: u32,
    pub voxels: usize,
    /// Prediction component labels overlapping the dilated lesion.
    pub matched: Vec<u32>,
    pub dice: f64,
}

/// A prediction component matched to no lesion; scores 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsePositive {
    pub id: u32,
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LesionMatchTable {
    pub lesions: Vec<LesionMatch>,
    pub false_positives: Vec<FalsePositive>,
}

/// Voxels within Chebyshev distance `r` of `members`, as flat indices.
fn chebyshev_dilate(dims: Dims, members: &[usize], r: usize) -> Vec<usize> {
    let coord = |i: usize| [i / dims.plane(), (i / dims.w) % dims.h, i % dims.w];
    let ext = [dims.d, dims.h, dims.w];
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &i in members {
        let c = coord(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a].saturating_sub(r));
            hi[a] = hi[a].max((c[a] + r).min(ext[a] - 1));
        }
    }
    let size = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let local = |c: [usize; 3]| ((c[0] - lo[0]) * size[1] + (c[1] - lo[1])) * size[2] + (c[2] - lo[2]);
    let mut grid = vec![false; size[0] * size[1] * size[2]];
    for &i in members {
        grid[local(coord(i))] = true;
    }
    // Separable 1-D max filters give the Chebyshev ball.
    for axis in 0..3 {
        let stride = [size[1] * size[2], size[2], 1][axis];
        let n = size[axis];
        let mut next = vec![false; grid.len()];
        for (start, flag) in grid.iter().enumerate() {
            let pos = (start / stride) % n;
            if *flag {
                let first = start - pos.min(r) * stride;
                for k in 0..=(pos.min(r) + r.min(n - 1 - pos)) {
                    next[first + k * stride] = true;
                }
            }
        }
        grid = next;
    }
    let mut out = Vec::new();
    for z in 0..size[0] {
        for y in 0..size[1] {
            for x in 0..size[2] {
                if grid[(z * size[1] + y) * size[2] + x] {
                    out.push(dims.index(lo[0] + z, lo[1] + y, lo[2] + x));
                }
            }
        }
    }
    out
}

/// Lesion-wise Dice: ground-truth lesions are 26-connected components with at
/// least `min_lesion_voxels` voxels; each is matched to the prediction
/// components touching its Chebyshev dilation by `dilation_radius` and scored
/// against their union. Unmatched prediction components add a 0 term. Two
/// empty masks score 1.
pub fn lesionwise_dice(
    pred: &BinaryMask3D,
    gt: &BinaryMask3D,
    dilation_radius: usize,
    min_lesion_voxels: usize,
) -> Result<(f64, LesionMatchTable)> {
    check_dims(pred.dims(), gt.dims())?;
    let dims = gt.dims();
    let (gt_labels, gt_sizes) = label_components_3d(gt);
    let (pred_labels, pred_sizes) = label_components_3d(pred);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); gt_sizes.len()];
    for (i, &l) in gt_labels.iter().enumerate() {
        if l != 0 {
            members[l as usize - 1].push(i);
        }
    }
    let mut pred_members: Vec<Vec<usize>> = vec![Vec::new(); pred_sizes.len()];
    for (i, &l) in pred_labels.iter().enumerate() {
        if l != 0 {
            pred_members[l as usize - 1].push(i);
        }
    }
    let mut used = vec![false; pred_sizes.len()];
    let mut table = LesionMatchTable::default();
    for (k, lesion) in members.iter().enumerate() {
        if lesion.len() < min_lesion_voxels.max(1) {
            continue;
        }
        let id = k as u32 + 1;
        let mut matched: Vec<u32> = chebyshev_dilate(dims, lesion, dilation_radius)
            .into_iter()
            .map(|i| pred_labels[i])
            .filter(|&l| l != 0)
            .collect();
        matched.sort_unstable();
        matched.dedup();
        let mut pred_count = 0;
        let mut inter = 0;
        for &p in &matched {
            used[p as usize - 1] = true;
            pred_count += pred_sizes[p as usize - 1];
            inter += pred_members[p as usize - 1]
                .iter()
                .filter(|&&i| gt_labels[i] == id)
                .count();
        }
        table.lesions.push(LesionMatch {
            id,
            voxels: lesion.len(),
            matched,
            dice: dice_counts(inter, pred_count, lesion.len()),
        });
    }
    for (p, &size) in pred_sizes.iter().enumerate() {
        if !used[p] {
            table.false_positives.push(FalsePositive {
                id: p as u32 + 1,
                voxels: size,
            });
        }
    }
    let terms = table.lesions.len() + table.false_positives.len();
    let score = if terms == 0 {
        1.0
    } else {
        table.lesions.iter().map(|l| l.dice).sum::<f64>() / terms as f64
    };
    Ok((score, table))
}

/// Fraction of cases whose score exceeds zero.
pub fn detection_rate(per_case: &[f64]) -> Result<f64> {
    if per_case.is_empty() {
        return Err(Error::Empty("detection rate over zero cases".into()));
    }
    Ok(per_case.iter().filter(|&&d| d > 0.0).count() as f64 / per_case.len() as f64)
}

/// Which whole-tumour Dice decides detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DetectionBasis {
    #[default]
    Lesionwise,
    Volumetric,
}

/// Lesion-matching parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub dilation_radius: usize,
    pub min_lesion_voxels: usize,
    pub detection_basis: DetectionBasis,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            dilation_radius: 3,
            min_lesion_voxels: 50,
            detection_basis: DetectionBasis::Lesionwise,
        }
    }
}

impl MetricsConfig {
    /// Settings for small phantoms, where every component counts.
    pub fn phantom() -> Self {
        Self {
            dilation_radius: 0,
            min_lesion_voxels: 0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub lesionwise: f64,
    pub volumetric: f64,
    pub matches: LesionMatchTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub regions: BTreeMap<Region, RegionScore>,
    /// Whether the whole tumour scored above zero on the detection basis;
    /// `None` when the ground truth has no tumour.
    pub detected: Option<bool>,
}

/// Score every region of one case.
pub fn evaluate_case(case: &str, pred: &LabelVolume, gt: &LabelVolume, cfg: &MetricsConfig) -> Result<CaseMetrics> {
    check_dims(pred.dims(), gt.dims())?;
    let mut regions = BTreeMap::new();
    for region in Region::ALL {
        let p = BinaryMask3D::from_labels(pred, region.labels());
        let g = BinaryMask3D::from_labels(gt, region.labels());
        let (lesionwise, matches) = lesionwise_dice(&p, &g, cfg.dilation_radius, cfg.min_lesion_voxels)?;
        regions.insert(
            region,
            RegionScore {
                lesionwise,
                volumetric: volumetric_dice(&p, &g)?,
                matches,
            },
        );
    }
    let wt = &regions[&Region::Wt];
    let has_tumour = gt.data().iter().any(|&l| l != 0);
    let detected = has_tumour.then_some(match cfg.detection_basis {
        DetectionBasis::Lesionwise => wt.lesionwise > 0.0,
        DetectionBasis::Volumetric => wt.volumetric > 0.0,
    });
    Ok(CaseMetrics {
        case: case.to_string(),
        regions,
        detected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMean {
    pub lesionwise: f64,
    pub volumetric: f64,
}

/// Per-case scores, their means and the detection rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: MetricsConfig,
    pub cases: Vec<CaseMetrics>,
    pub mean: BTreeMap<Region, RegionMean>,
    /// Over cases whose ground truth has a tumour; `None` if there are none.
    pub detection_rate: Option<f64>,
}

impl MetricsReport {
    pub fn new(cases: Vec<CaseMetrics>, config: MetricsConfig) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Empty("no cases to report".into()));
        }
        let n = cases.len() as f64;
        let mean = Region::ALL
            .into_iter()
            .map(|r| {
                let (l, v) = cases.iter().fold((0.0, 0.0), |(l, v), c| {
                    (l + c.regions[&r].lesionwise, v + c.regions[&r].volumetric)
                });
                (
                    r,
                    RegionMean {
                        lesionwise: l / n,
                        volumetric: v / n,
                    },
                )
            })
            .collect();
        let flags: Vec<f64> = cases
            .iter()
            .filter_map(|c| c.detected)
            .map(|d| d as u8 as f64)
            .collect();
        Ok(Self {
            detection_rate: detection_rate(&flags).ok(),
            config,
            cases,
            mean,
        })
    }

    /// Lesion-wise table: one row per case plus the mean row.
    pub fn table(&self) -> String {
        let mut header = vec!["case".to_string()];
        header.extend(Region::ALL.iter().map(|r| format!("DSC {}", r.name())));
        header.push("DR %".into());
        let mut rows = vec![header];
        for c in &self.cases {
            let mut row = vec![c.case.clone()];
            row.extend(Region::ALL.iter().map(|r| format!("{:.3}", c.regions[r].lesionwise)));
            row.push(
                c.detected
                    .map_or("-".into(), |d| format!("{:.1}", if d { 100.0 } else { 0.0 })),
            );
            rows.push(row);
        }
        let mut row = vec!["mean".to_string()];
        row.extend(Region::ALL.iter().map(|r| format!("{:.3}", self.mean[r].lesionwise)));
        row.push(self.detection_rate.map_or("-".into(), |r| format!("{:.1}", 100.0 * r)));
        rows.push(row);
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            if i == rows.len() - 1 {
                let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
                let _ = writeln!(out, "{}", rule.join("  "));
            }
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (s, &w))| if j == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  "));
        }
        out
    }
}

/// Area under the ROC curve of `positives` versus `negatives` (Mann–Whitney,
/// ties counted as one half).
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Empty("AUROC needs both positive and negative scores".into()));
    }
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in positives {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (positives.len() * negatives.len()) as f64)
}
