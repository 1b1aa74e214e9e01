use super::VoxelVolume;
use crate::{Error, Result};

/// Separable Gaussian blur with edge replication. `sigma` is in voxels; a
/// zero sigma returns the input unchanged.
pub fn gaussian_blur(vol: &VoxelVolume, sigma: f64) -> Result<VoxelVolume> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut out = vol.clone();
    for axis in 0..3 {
        let dims = out.dims();
        let n = dims[axis];
        out = resample_axis(&out, axis, n, |i| {
            let taps = kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| (clamp_index(i as isize + k as isize - r, n), w))
                .collect();
            taps
        })?;
    }
    Ok(out)
}

/// Blur-then-decimate degradation used to synthesize low-resolution inputs:
/// Gaussian smoothing (std `smooth_sigma` voxels, default `factor / 2`)
/// followed by Lanczos-3 downsampling by `factor`, then clipping to `[0, 1]`.
pub fn degrade(vol: &VoxelVolume, factor: usize, smooth_sigma: Option<f64>) -> Result<VoxelVolume> {
    if factor < 2 {
        return Err(Error::invalid(format!("degradation factor must be >= 2, got {factor}")));
    }
    if let Some(a) = vol.dims().iter().position(|&d| d % factor != 0) {
        return Err(Error::invalid(format!(
            "dim {} of axis {a} is not divisible by factor {factor}",
            vol.dims()[a]
        )));
    }
    let sigma = smooth_sigma.unwrap_or(factor as f64 / 2.0);
    let blurred = gaussian_blur(vol, sigma)?;
    let f = factor as f64;
    let mut out = blurred;
    for axis in 0..3 {
        let n = out.dims()[axis];
        out = resample_axis(&out, axis, n / factor, |j| {
            let c = (j as f64 + 0.5) * f - 0.5;
            let lo = (c - 3.0 * f).ceil() as isize;
            let hi = (c + 3.0 * f).floor() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|k| (clamp_index(k, n), lanczos3((k as f64 - c) / f)))
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let s: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= s;
            }
            taps
        })?;
        let mut sp = out.spacing();
        sp[axis] *= f;
        out = VoxelVolume::new(out.dims(), sp, out.into_data())?;
    }
    Ok(out.clip(0.0, 1.0).with_intensity_range(vol.intensity_range))
}

/// Tricubic (Catmull-Rom) upsampling by an integer factor. Output voxel
/// centres map to input coordinate `(i + 0.5) / factor - 0.5`, clamped to the
/// outermost input centres; neighbour indices are clamped as well.
pub fn resample_cubic(vol: &VoxelVolume, factor: usize) -> Result<VoxelVolume> {
    upsample(vol, factor, |t| {
        let t2 = t * t;
        let t3 = t2 * t;
        vec![
            (-1, 0.5 * (-t3 + 2.0 * t2 - t)),
            (0, 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0)),
            (1, 0.5 * (-3.0 * t3 + 4.0 * t2 + t)),
            (2, 0.5 * (t3 - t2)),
        ]
    })
}

/// Trilinear upsampling by an integer factor; the classical baseline next to
/// [`resample_cubic`].
pub fn resample_trilinear(vol: &VoxelVolume, factor: usize) -> Result<VoxelVolume> {
    upsample(vol, factor, |t| vec![(0, 1.0 - t), (1, t)])
}

fn upsample(vol: &VoxelVolume, factor: usize, weights: impl Fn(f64) -> Vec<(isize, f64)>) -> Result<VoxelVolume> {
    if factor < 1 {
        return Err(Error::invalid("upsampling factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(vol.clone());
    }
    let f = factor as f64;
    let mut out = vol.clone();
    for axis in 0..3 {
        let n = out.dims()[axis];
        out = resample_axis(&out, axis, n * factor, |i| {
            let x = ((i as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
            let base = x.floor();
            let t = x - base;
            weights(t)
                .into_iter()
                .map(|(o, w)| (clamp_index(base as isize + o, n), w))
                .collect()
        })?;
        let mut sp = out.spacing();
        sp[axis] /= f;
        out = VoxelVolume::new(out.dims(), sp, out.into_data())?;
    }
    Ok(out.with_intensity_range(vol.intensity_range))
}

/// Applies a 1D linear map along `axis`: output sample `j` is
/// `sum_k w_k * in[idx_k]` with taps supplied by `taps(j)`.
fn resample_axis(
    vol: &VoxelVolume,
    axis: usize,
    out_len: usize,
    taps: impl Fn(usize) -> Vec<(usize, f64)>,
) -> Result<VoxelVolume> {
    let dims = vol.dims();
    let mut od = dims;
    od[axis] = out_len;
    let table: Vec<Vec<(usize, f64)>> = (0..out_len).map(&taps).collect();
    let src = vol.data();
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let out = VoxelVolume::from_fn(od, vol.spacing(), |x, y, z| {
        let (j, base) = match axis {
            0 => (x, dims[0] * (y + dims[1] * z)),
            1 => (y, x + dims[0] * dims[1] * z),
            _ => (z, x + dims[0] * y),
        };
        table[j]
            .iter()
            .fold(0.0, |acc, &(k, w)| acc + w * src[base + k * stride])
    })?;
    Ok(out.with_intensity_range(vol.intensity_range))
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Normalized Gaussian taps with radius `ceil(4 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = k.iter().sum();
    for w in &mut k {
        *w /= s;
    }
    k
}

pub(crate) fn lanczos3(x: f64) -> f64 {
    if x.abs() >= 3.0 {
        return 0.0;
    }
    sinc(x) * sinc(x / 3.0)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}
