//! Structural similarity with a Gaussian window, forward and adjoint.
//!
//! Statistics are taken over "valid" window positions only, so an `h×w` plane
//! yields `(h−10)×(w−10)` SSIM values for the default 11-tap window. The
//! scalar result is the mean over every valid position of every plane.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::kernels::{filter_valid, filter_valid_adjoint, gaussian_taps};
use super::Scalar;

/// Window and stabilisation constants for SSIM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl SsimParams {
    pub fn with_data_range(data_range: f64) -> Self {
        Self {
            data_range,
            ..Self::default()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.data_range.is_nan() || self.data_range <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "SSIM data_range must be positive, got {}",
                self.data_range
            )));
        }
        if self.window.is_multiple_of(2) || self.window == 0 {
            return Err(Error::InvalidConfig("SSIM window must be odd".into()));
        }
        if h < self.window || w < self.window {
            return Err(Error::InvalidConfig(format!(
                "SSIM window {} does not fit a {h}x{w} plane",
                self.window
            )));
        }
        Ok(())
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            data_range: 4.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Filtered local moments of one plane pair, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct PlaneMoments<T> {
    mu_a: Vec<T>,
    mu_b: Vec<T>,
    e_aa: Vec<T>,
    e_bb: Vec<T>,
    e_ab: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct SsimCache<T> {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub params: SsimParams,
    moments: Vec<PlaneMoments<T>>,
}

/// Mean SSIM over `planes` stacked `h×w` planes.
pub(crate) fn ssim_forward<T: Scalar>(
    a: &[T],
    b: &[T],
    planes: usize,
    h: usize,
    w: usize,
    params: SsimParams,
) -> Result<(T, SsimCache<T>)> {
    params.validate(h, w)?;
    let taps: Vec<T> = gaussian_taps(params.window, params.sigma)
        .into_iter()
        .map(T::from_f64_lossy)
        .collect();
    let c1 = T::from_f64_lossy(params.c1());
    let c2 = T::from_f64_lossy(params.c2());
    let two = T::from_f64_lossy(2.0);
    let plane = h * w;
    let mut moments = Vec::with_capacity(planes);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for p in 0..planes {
        let pa = &a[p * plane..(p + 1) * plane];
        let pb = &b[p * plane..(p + 1) * plane];
        let aa: Vec<T> = pa.iter().map(|&v| v * v).collect();
        let bb: Vec<T> = pb.iter().map(|&v| v * v).collect();
        let ab: Vec<T> = pa.iter().zip(pb).map(|(&x, &y)| x * y).collect();
        let m = PlaneMoments {
            mu_a: filter_valid(pa, h, w, &taps),
            mu_b: filter_valid(pb, h, w, &taps),
            e_aa: filter_valid(&aa, h, w, &taps),
            e_bb: filter_valid(&bb, h, w, &taps),
            e_ab: filter_valid(&ab, h, w, &taps),
        };
        for i in 0..m.mu_a.len() {
            let (m1, m2) = (m.mu_a[i], m.mu_b[i]);
            let a1 = two * m1 * m2 + c1;
            let a2 = two * (m.e_ab[i] - m1 * m2) + c2;
            let b1 = m1 * m1 + m2 * m2 + c1;
            let b2 = (m.e_aa[i] - m1 * m1) + (m.e_bb[i] - m2 * m2) + c2;
            total += ((a1 * a2) / (b1 * b2)).as_f64();
        }
        count += m.mu_a.len();
        moments.push(m);
    }
    let value = T::from_f64_lossy(total / count as f64);
    Ok((
        value,
        SsimCache {
            planes,
            h,
            w,
            params,
            moments,
        },
    ))
}

/// Gradients of `upstream · ssim(a, b)` with respect to `a` and `b`.
pub(crate) fn ssim_backward<T: Scalar>(a: &[T], b: &[T], cache: &SsimCache<T>, upstream: T) -> (Vec<T>, Vec<T>) {
    let SsimCache {
        planes, h, w, params, ..
    } = *cache;
    let taps: Vec<T> = gaussian_taps(params.window, params.sigma)
        .into_iter()
        .map(T::from_f64_lossy)
        .collect();
    let c1 = T::from_f64_lossy(params.c1());
    let c2 = T::from_f64_lossy(params.c2());
    let two = T::from_f64_lossy(2.0);
    let plane = h * w;
    let valid = cache.moments.first().map_or(0, |m| m.mu_a.len());
    let scale = upstream / T::from_usize(planes * valid).expect("count fits");

    let mut da = vec![T::zero(); a.len()];
    let mut db = vec![T::zero(); b.len()];
    for (p, m) in cache.moments.iter().enumerate() {
        let n = m.mu_a.len();
        let mut g_mu_a = vec![T::zero(); n];
        let mut g_mu_b = vec![T::zero(); n];
        let mut g_e_aa = vec![T::zero(); n];
        let mut g_e_bb = vec![T::zero(); n];
        let mut g_e_ab = vec![T::zero(); n];
        for i in 0..n {
            let (m1, m2) = (m.mu_a[i], m.mu_b[i]);
            let a1 = two * m1 * m2 + c1;
            let a2 = two * (m.e_ab[i] - m1 * m2) + c2;
            let b1 = m1 * m1 + m2 * m2 + c1;
            let b2 = (m.e_aa[i] - m1 * m1) + (m.e_bb[i] - m2 * m2) + c2;
            let den = b1 * b2;
            let s = a1 * a2 / den;
            g_mu_a[i] = scale * ((two * m2 * a2 - two * m2 * a1) / den - s * (two * m1 / b1 - two * m1 / b2));
            g_mu_b[i] = scale * ((two * m1 * a2 - two * m1 * a1) / den - s * (two * m2 / b1 - two * m2 / b2));
            g_e_aa[i] = -scale * s / b2;
            g_e_bb[i] = -scale * s / b2;
            g_e_ab[i] = scale * two * a1 / den;
        }
        let adj_mu_a = filter_valid_adjoint(&g_mu_a, h, w, &taps);
        let adj_mu_b = filter_valid_adjoint(&g_mu_b, h, w, &taps);
        let adj_aa = filter_valid_adjoint(&g_e_aa, h, w, &taps);
        let adj_bb = filter_valid_adjoint(&g_e_bb, h, w, &taps);
        let adj_ab = filter_valid_adjoint(&g_e_ab, h, w, &taps);
        let pa = &a[p * plane..(p + 1) * plane];
        let pb = &b[p * plane..(p + 1) * plane];
        for q in 0..plane {
            da[p * plane + q] = adj_mu_a[q] + two * pa[q] * adj_aa[q] + pb[q] * adj_ab[q];
            db[p * plane + q] = adj_mu_b[q] + two * pb[q] * adj_bb[q] + pa[q] * adj_ab[q];
        }
    }
    (da, db)
}

/// SSIM between two stacks of planes without building a graph.
pub fn ssim<T: Scalar>(a: &[T], b: &[T], planes: usize, h: usize, w: usize, params: SsimParams) -> Result<T> {
    if a.len() != planes * h * w || b.len() != a.len() {
        return Err(Error::shape("ssim", &[a.len()], &[b.len()]));
    }
    ssim_forward(a, b, planes, h, w, params).map(|(v, _)| v)
}
