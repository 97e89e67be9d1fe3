//! Independent brute-force oracles shared by the test suites.
#![allow(dead_code)]

use uadseg::postproc::BinaryMask3D;
use uadseg::Dims;

/// Direct sliding-window SSIM: explicit 2-D weights, no separability, no shared code.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> f64 {
    let size = 11usize;
    let sigma = 1.5f64;
    let mut weights = vec![0.0; size * size];
    let mut total = 0.0;
    for i in 0..size {
        for j in 0..size {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            let v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            weights[i * size + j] = v;
            total += v;
        }
    }
    for v in weights.iter_mut() {
        *v /= total;
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - size {
        for x in 0..=w - size {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let q = (y + i) * w + x + j;
                    ma += weights[i * size + j] * a[q];
                    mb += weights[i * size + j] * b[q];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let q = (y + i) * w + x + j;
                    let wt = weights[i * size + j];
                    va += wt * (a[q] - ma).powi(2);
                    vb += wt * (b[q] - mb).powi(2);
                    cov += wt * (a[q] - ma) * (b[q] - mb);
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Between-class variance over voxels, evaluated candidate by candidate.
pub fn otsu_oracle(map: &[f32]) -> Vec<bool> {
    let nz: Vec<f32> = map.iter().copied().filter(|&v| v != 0.0).collect();
    let lo = nz.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = nz.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if nz.is_empty() || lo == hi {
        return map.iter().map(|&v| v != 0.0).collect();
    }
    let bin = |v: f32| {
        let b = ((v as f64 - lo as f64) / (hi as f64 - lo as f64) * 256.0).floor() as i64;
        b.clamp(0, 255) as usize
    };
    let mut best_t = 0;
    let mut best = -1.0f64;
    for t in 0..255 {
        let c0: Vec<f64> = nz
            .iter()
            .map(|&v| bin(v))
            .filter(|&b| b <= t)
            .map(|b| b as f64)
            .collect();
        let c1: Vec<f64> = nz
            .iter()
            .map(|&v| bin(v))
            .filter(|&b| b > t)
            .map(|b| b as f64)
            .collect();
        if c0.is_empty() || c1.is_empty() {
            continue;
        }
        let n = nz.len() as f64;
        let (w0, w1) = (c0.len() as f64 / n, c1.len() as f64 / n);
        let mu0 = c0.iter().sum::<f64>() / c0.len() as f64;
        let mu1 = c1.iter().sum::<f64>() / c1.len() as f64;
        let var = w0 * w1 * (mu0 - mu1).powi(2);
        if var > best * (1.0 + 1e-12) {
            best = var;
            best_t = t;
        }
    }
    map.iter().map(|&v| v != 0.0 && bin(v) > best_t).collect()
}

/// Erosion / dilation on a grid padded with the neutral border value.
pub fn padded_op(m: &[bool], h: usize, w: usize, erode: bool) -> Vec<bool> {
    let (ph, pw) = (h + 2, w + 2);
    let mut pad = vec![erode; ph * pw];
    for y in 0..h {
        for x in 0..w {
            pad[(y + 1) * pw + x + 1] = m[y * w + x];
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 1..=h {
        for x in 1..=w {
            let nb = [
                pad[y * pw + x],
                pad[(y - 1) * pw + x],
                pad[(y + 1) * pw + x],
                pad[y * pw + x - 1],
                pad[y * pw + x + 1],
            ];
            out.push(if erode {
                nb.iter().all(|&b| b)
            } else {
                nb.iter().any(|&b| b)
            });
        }
    }
    out
}

pub fn morph_oracle(m: &BinaryMask3D) -> Vec<bool> {
    let Dims { d, h, w } = m.dims();
    let mut out = Vec::new();
    for z in 0..d {
        let s = m.slice(z);
        let opened = padded_op(&padded_op(s, h, w, true), h, w, false);
        out.extend(padded_op(&padded_op(&opened, h, w, false), h, w, true));
    }
    out
}

pub fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Union-find over 26-neighbourhoods; largest set, smallest first index on ties.
pub fn lcc_oracle(m: &BinaryMask3D) -> Vec<bool> {
    let Dims { d, h, w } = m.dims();
    let data = m.data();
    let mut parent: Vec<usize> = (0..data.len()).collect();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = ((z as usize * h) + y as usize) * w + x as usize;
                if !data[i] {
                    continue;
                }
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                            if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                                continue;
                            }
                            let j = ((nz as usize * h) + ny as usize) * w + nx as usize;
                            if data[j] {
                                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                                parent[a.max(b)] = a.min(b);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut size = vec![0usize; data.len()];
    for (i, &on) in data.iter().enumerate() {
        if on {
            let r = find(&mut parent, i);
            size[r] += 1;
        }
    }
    // Union by minimum index makes each root its component's first voxel.
    let mut best = None;
    for r in 0..data.len() {
        if size[r] > 0 && best.is_none_or(|b: usize| size[r] > size[b]) {
            best = Some(r);
        }
    }
    (0..data.len())
        .map(|i| data[i] && Some(find(&mut parent, i)) == best)
        .collect()
}

/// Recursive flood fill of the background from the border.
pub fn holes_oracle(m: &[bool], h: usize, w: usize) -> Vec<bool> {
    fn visit(m: &[bool], seen: &mut [bool], h: usize, w: usize, y: isize, x: isize) {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            return;
        }
        let i = y as usize * w + x as usize;
        if m[i] || seen[i] {
            return;
        }
        seen[i] = true;
        visit(m, seen, h, w, y - 1, x);
        visit(m, seen, h, w, y + 1, x);
        visit(m, seen, h, w, y, x - 1);
        visit(m, seen, h, w, y, x + 1);
    }
    let mut seen = vec![false; m.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if y == 0 || x == 0 || y == h as isize - 1 || x == w as isize - 1 {
                visit(m, &mut seen, h, w, y, x);
            }
        }
    }
    seen.iter().map(|&s| !s).collect()
}

/// Brute-force lesion-wise Dice straight from its definition.
pub fn lesion_oracle(pred: &BinaryMask3D, gt: &BinaryMask3D, radius: usize, min_voxels: usize) -> f64 {
    let Dims { d, h, w } = gt.dims();
    let comps = |m: &BinaryMask3D| -> Vec<Vec<[usize; 3]>> {
        let mut seen = vec![false; d * h * w];
        let mut out = Vec::new();
        let at = |c: [usize; 3]| (c[0] * h + c[1]) * w + c[2];
        let size = [d, h, w];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !m.data()[at([z, y, x])] || seen[at([z, y, x])] {
                        continue;
                    }
                    let mut comp = vec![];
                    let mut stack = vec![[z, y, x]];
                    seen[at([z, y, x])] = true;
                    while let Some(c) = stack.pop() {
                        comp.push(c);
                        for n in 0..27 {
                            let d = [n / 9, (n / 3) % 3, n % 3];
                            let q = [c[0] + d[0], c[1] + d[1], c[2] + d[2]];
                            if (0..3).any(|i| q[i] == 0 || q[i] > size[i]) {
                                continue;
                            }
                            let q = [q[0] - 1, q[1] - 1, q[2] - 1];
                            if m.data()[at(q)] && !seen[at(q)] {
                                seen[at(q)] = true;
                                stack.push(q);
                            }
                        }
                    }
                    out.push(comp);
                }
            }
        }
        out
    };
    let lesions: Vec<_> = comps(gt).into_iter().filter(|c| c.len() >= min_voxels.max(1)).collect();
    let preds = comps(pred);
    let cheb = |a: [usize; 3], b: [usize; 3]| (0..3).map(|i| a[i].abs_diff(b[i])).max().unwrap();
    let mut matched_any = vec![false; preds.len()];
    let mut scores = Vec::new();
    for l in &lesions {
        let hits: Vec<usize> = (0..preds.len())
            .filter(|&p| preds[p].iter().any(|&v| l.iter().any(|&g| cheb(v, g) <= radius)))
            .collect();
        let union: Vec<[usize; 3]> = hits.iter().flat_map(|&p| preds[p].clone()).collect();
        for &p in &hits {
            matched_any[p] = true;
        }
        let inter = union.iter().filter(|v| l.contains(v)).count();
        scores.push(2.0 * inter as f64 / (union.len() + l.len()) as f64);
    }
    scores.extend(matched_any.iter().filter(|&&m| !m).map(|_| 0.0));
    if scores.is_empty() {
        1.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}
