//! Image-quality metrics shared by evaluation and the training loss.
//!
//! SSIM uses a normalized Gaussian window (std 1.5) applied separably with
//! zero padding, one axis at a time, so the same code serves 2D projections
//! and 3D volumes. All reductions run in a fixed sequential order.

use crate::projector::Projection;
use crate::volume::VoxelVolume;
use crate::{Error, Result};

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_WINDOW: usize = 11;

/// Anything with an x-fastest shape and a flat sample buffer.
pub trait Grid {
    fn shape(&self) -> Vec<usize>;
    fn values(&self) -> &[f64];
}

impl Grid for VoxelVolume {
    fn shape(&self) -> Vec<usize> {
        self.dims().to_vec()
    }
    fn values(&self) -> &[f64] {
        self.data()
    }
}

impl Grid for Projection {
    fn shape(&self) -> Vec<usize> {
        self.dims().to_vec()
    }
    fn values(&self) -> &[f64] {
        self.data()
    }
}

fn check_same<G: Grid>(a: &G, b: &G) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::dims(sa, sb));
    }
    Ok(sa)
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::invalid("mse of empty inputs"));
    }
    let s = a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y));
    Ok(s / a.len() as f64)
}

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<G: Grid>(a: &G, b: &G, peak: f64) -> Result<f64> {
    psnr_capped(a, b, peak, PSNR_CAP_DB)
}

pub fn psnr_capped<G: Grid>(a: &G, b: &G, peak: f64, cap_db: f64) -> Result<f64> {
    check_same(a, b)?;
    let m = mse(a.values(), b.values())?;
    if m == 0.0 {
        return Ok(cap_db);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(cap_db))
}

/// Mean SSIM of `a` against `b`.
pub fn ssim<G: Grid>(a: &G, b: &G, window: usize, peak: f64) -> Result<f64> {
    let shape = check_same(a, b)?;
    Ok(ssim_core(&shape, a.values(), b.values(), window, peak, false)?.0)
}

/// Mean SSIM and its gradient with respect to `b`.
pub fn ssim_with_grad(shape: &[usize], a: &[f64], b: &[f64], window: usize, peak: f64) -> Result<(f64, Vec<f64>)> {
    let (v, g, _) = ssim_core(shape, a, b, window, peak, true)?;
    Ok((v, g))
}

/// Per-sample SSIM map.
pub fn ssim_map(shape: &[usize], a: &[f64], b: &[f64], window: usize, peak: f64) -> Result<Vec<f64>> {
    Ok(ssim_core(shape, a, b, window, peak, false)?.2)
}

pub(crate) fn ssim_window(window: usize) -> Vec<f64> {
    let r = (window / 2) as isize;
    let mut w: Vec<f64> = (-r..=r)
        .map(|i| (-0.5 * (i as f64 / SSIM_SIGMA).powi(2)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for x in &mut w {
        *x /= s;
    }
    w
}

fn ssim_core(
    shape: &[usize],
    a: &[f64],
    b: &[f64],
    window: usize,
    peak: f64,
    want_grad: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if window.is_multiple_of(2) || window == 0 {
        return Err(Error::invalid(format!("SSIM window must be odd, got {window}")));
    }
    let n: usize = shape.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::dims(n, (a.len(), b.len())));
    }
    if n == 0 {
        return Err(Error::invalid("SSIM of empty inputs"));
    }
    let k = ssim_window(window);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_separable(shape, a, &k);
    let mu_b = filter_separable(shape, b, &k);
    let e_aa = filter_separable(shape, &aa, &k);
    let e_bb = filter_separable(shape, &bb, &k);
    let e_ab = filter_separable(shape, &ab, &k);

    let mut map = vec![0.0; n];
    let (mut d_mu, mut d_bb, mut d_ab) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let a1 = 2.0 * ma * mb + c1;
        let a2 = 2.0 * cov + c2;
        let b1 = ma * ma + mb * mb + c1;
        let b2 = va + vb + c2;
        let s = a1 * a2 / (b1 * b2);
        map[i] = s;
        if want_grad {
            d_mu[i] = s * (2.0 * ma / a1 - 2.0 * ma / a2 - 2.0 * mb / b1 + 2.0 * mb / b2);
            d_bb[i] = -s / b2;
            d_ab[i] = 2.0 * s / a2;
        }
    }
    let mean = map.iter().fold(0.0, |acc, v| acc + v) / n as f64;
    let grad = if want_grad {
        // The zero-padded symmetric filter is its own adjoint.
        let g_mu = filter_separable(shape, &d_mu, &k);
        let g_bb = filter_separable(shape, &d_bb, &k);
        let g_ab = filter_separable(shape, &d_ab, &k);
        (0..n)
            .map(|j| (g_mu[j] + 2.0 * b[j] * g_bb[j] + a[j] * g_ab[j]) / n as f64)
            .collect()
    } else {
        Vec::new()
    };
    Ok((mean, grad, map))
}

/// Correlates `data` with `kernel` along every axis, zero padding outside.
pub(crate) fn filter_separable(shape: &[usize], data: &[f64], kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut cur = data.to_vec();
    let mut stride = 1usize;
    for &len in shape {
        let mut next = vec![0.0; cur.len()];
        let block = stride * len;
        for start in (0..cur.len()).step_by(block) {
            for inner in 0..stride {
                let base = start + inner;
                for i in 0..len as isize {
                    let mut acc = 0.0;
                    for (t, &w) in kernel.iter().enumerate() {
                        let j = i + t as isize - r;
                        if j >= 0 && j < len as isize {
                            acc += w * cur[base + j as usize * stride];
                        }
                    }
                    next[base + i as usize * stride] = acc;
                }
            }
        }
        cur = next;
        stride = block;
    }
    cur
}
