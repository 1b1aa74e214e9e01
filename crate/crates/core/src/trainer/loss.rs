use crate::metrics::{ssim_with_grad, SSIM_WINDOW};
use crate::projector::Projection;
use crate::volume::VoxelVolume;
use crate::{Error, Result};

/// Dynamic range assumed by the SSIM stabilizing constants.
pub const SSIM_PEAK: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct ReconLoss {
    pub total: f64,
    pub l1: f64,
    pub l_res: f64,
    pub dssim: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `L1(y, x) + L1(y_hat, x_hat) + lambda1 (1 - SSIM(y, x)) / 2` and its
/// gradient with respect to `x_hat`, taking `dx / dx_hat = 1`.
pub fn loss_recon(
    y: &Projection,
    x: &Projection,
    y_hat: &Projection,
    x_hat: &Projection,
    lambda1: f64,
) -> Result<(ReconLoss, Projection)> {
    let dims = y.dims();
    for p in [x, y_hat, x_hat] {
        if p.dims() != dims {
            return Err(Error::dims(dims, p.dims()));
        }
    }
    let n = (dims[0] * dims[1]) as f64;
    let mut grad = vec![0.0; dims[0] * dims[1]];
    let mut l1 = 0.0;
    let mut l_res = 0.0;
    for i in 0..grad.len() {
        let d = x.data()[i] - y.data()[i];
        let r = x_hat.data()[i] - y_hat.data()[i];
        l1 += d.abs();
        l_res += r.abs();
        grad[i] = (sign(d) + sign(r)) / n;
    }
    l1 /= n;
    l_res /= n;
    let mut dssim = 0.0;
    if lambda1 != 0.0 {
        let (s, g) = ssim_with_grad(&[dims[0], dims[1]], y.data(), x.data(), SSIM_WINDOW, SSIM_PEAK)?;
        dssim = 0.5 * (1.0 - s);
        for (o, gs) in grad.iter_mut().zip(g) {
            *o -= 0.5 * lambda1 * gs;
        }
    }
    let loss = ReconLoss {
        total: l1 + l_res + lambda1 * dssim,
        l1,
        l_res,
        dssim,
    };
    Ok((loss, Projection::new(dims, grad, x_hat.angle_index)?))
}

/// Anisotropic total variation: the mean over the three axes of the mean
/// absolute forward difference. Returns the value and its gradient.
pub fn loss_tv(vol: &VoxelVolume) -> Result<(f64, Vec<f64>)> {
    let dims = vol.dims();
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::invalid(format!(
            "TV needs at least 2 voxels per axis, got {dims:?}"
        )));
    }
    let data = vol.data();
    let mut grad = vec![0.0; data.len()];
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut tv = 0.0;
    for a in 0..3 {
        let count = (dims[a] - 1) * data.len() / dims[a];
        let w = 1.0 / (3.0 * count as f64);
        let mut acc = 0.0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let c = [x, y, z];
                    if c[a] + 1 == dims[a] {
                        continue;
                    }
                    let i = vol.index(x, y, z);
                    let j = i + strides[a];
                    let d = data[j] - data[i];
                    acc += d.abs();
                    let s = sign(d) * w;
                    grad[j] += s;
                    grad[i] -= s;
                }
            }
        }
        tv += acc * w;
    }
    Ok((tv, grad))
}
