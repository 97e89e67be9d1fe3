//! Binary morphology, 3-D connected components and 2-D hole filling.

use std::collections::VecDeque;

use crate::volume::Dims;

use super::BinaryMask3D;

const CROSS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Erosion with the radius-1 cross. Neighbours outside the slice are ignored,
/// so the image border does not erode the mask.
pub fn erode2d(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    cross_filter(mask, h, w, true)
}

/// Dilation with the radius-1 cross. Neighbours outside the slice are ignored.
pub fn dilate2d(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    cross_filter(mask, h, w, false)
}

fn cross_filter(mask: &[bool], h: usize, w: usize, erode: bool) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let mut v = mask[y * w + x];
            for (dy, dx) in CROSS {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let n = mask[ny as usize * w + nx as usize];
                v = if erode { v && n } else { v || n };
            }
            out[y * w + x] = v;
        }
    }
    out
}

/// Per-axial-slice opening followed by closing with the radius-1 cross.
pub fn morph_clean(mask: &BinaryMask3D) -> BinaryMask3D {
    let Dims { h, w, .. } = mask.dims();
    let mut out = mask.clone();
    for z in 0..mask.dims().d {
        let s = mask.slice(z);
        let opened = dilate2d(&erode2d(s, h, w), h, w);
        let closed = erode2d(&dilate2d(&opened, h, w), h, w);
        out.slice_mut(z).copy_from_slice(&closed);
    }
    out
}

/// Neighbourhood sizes accepted by [`label_components`].
pub const CONNECTIVITIES: [u8; 3] = [6, 18, 26];

/// 26-connected component labels; see [`label_components`].
pub fn label_components_3d(mask: &BinaryMask3D) -> (Vec<u32>, Vec<usize>) {
    label_components(mask, 26)
}

/// Component labels (1-based, 0 = background) in raster order of each
/// component's first voxel, plus the size of every component. `connectivity`
/// is 6 (faces), 18 (faces and edges) or 26 (faces, edges and corners).
pub fn label_components(mask: &BinaryMask3D, connectivity: u8) -> (Vec<u32>, Vec<usize>) {
    assert!(CONNECTIVITIES.contains(&connectivity), "connectivity {connectivity}");
    let reach = match connectivity {
        6 => 1,
        18 => 2,
        _ => 3,
    };
    let dims = mask.dims();
    let data = mask.data();
    let mut labels = vec![0u32; data.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if !data[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = (i / dims.plane(), (i / dims.w) % dims.h, i % dims.w);
            for nz in z.saturating_sub(1)..=(z + 1).min(dims.d - 1) {
                for ny in y.saturating_sub(1)..=(y + 1).min(dims.h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(dims.w - 1) {
                        let steps = (nz != z) as u8 + (ny != y) as u8 + (nx != x) as u8;
                        let j = dims.index(nz, ny, nx);
                        if steps <= reach && data[j] && labels[j] == 0 {
                            labels[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keep only the largest 26-connected component; ties go to the component whose
/// first voxel comes first in `(z, y, x)` raster order.
pub fn largest_component_3d(mask: &BinaryMask3D) -> BinaryMask3D {
    largest_component(mask, 26)
}

/// [`largest_component_3d`] with a configurable neighbourhood.
pub fn largest_component(mask: &BinaryMask3D, connectivity: u8) -> BinaryMask3D {
    let (labels, sizes) = label_components(mask, connectivity);
    let mut best: Option<(u32, usize)> = None;
    for (i, &s) in sizes.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i as u32 + 1, s));
        }
    }
    let keep = best.map_or(0, |(id, _)| id);
    let data = labels.iter().map(|&l| l != 0 && l == keep).collect();
    BinaryMask3D::from_vec(mask.dims(), data).expect("same size")
}

/// Fill background regions of a 2-D slice that are not 4-connected to the border.
pub fn fill_holes2d(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut outside = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y + 1 == h || x + 1 == w) && !mask[y * w + x] {
                outside[y * w + x] = true;
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for (dy, dx) in CROSS {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if !mask[j] && !outside[j] {
                outside[j] = true;
                queue.push_back((ny as usize, nx as usize));
            }
        }
    }
    outside.iter().map(|&o| !o).collect()
}

/// [`fill_holes2d`] applied to every axial slice.
pub fn fill_holes_per_slice(mask: &BinaryMask3D) -> BinaryMask3D {
    let Dims { h, w, .. } = mask.dims();
    let mut out = mask.clone();
    for z in 0..mask.dims().d {
        let filled = fill_holes2d(mask.slice(z), h, w);
        out.slice_mut(z).copy_from_slice(&filled);
    }
    out
}
