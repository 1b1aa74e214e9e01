//! Denoisers: given `x_t` and `t`, predict the clean image `x_{0|t}`.

use std::io::{BufReader, Read, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use super::NoiseSchedule;
use crate::metrics::filter_separable;
use crate::projector::Projection;
use crate::volume::gaussian_kernel;
use crate::{Error, Result};

/// Affine map `m = scale * v + offset` from physical projection values to
/// the value range the denoiser works in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityMap {
    pub scale: f64,
    pub offset: f64,
}

impl IntensityMap {
    pub const IDENTITY: IntensityMap = IntensityMap {
        scale: 1.0,
        offset: 0.0,
    };

    /// Sends the value range of `p` to `[-1, 1]`. A constant image maps to 0.
    pub fn fit(p: &Projection) -> Self {
        let (lo, hi) = p
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if !(hi > lo) {
            return Self {
                scale: 1.0,
                offset: -lo,
            };
        }
        let scale = 2.0 / (hi - lo);
        Self {
            scale,
            offset: -1.0 - lo * scale,
        }
    }

    pub fn forward(&self, p: &Projection) -> Projection {
        if *self == Self::IDENTITY {
            return p.clone();
        }
        p.map(|v| v * self.scale + self.offset)
    }

    pub fn inverse(&self, p: &Projection) -> Projection {
        if *self == Self::IDENTITY {
            return p.clone();
        }
        p.map(|v| (v - self.offset) / self.scale)
    }
}

/// Predicts the clean image from `x_t`. Images are in the model value range
/// given by `map`; only denoisers that hold physical data need it.
pub trait Denoiser: Sync {
    fn denoise(&self, x_t: &Projection, t: usize, schedule: &NoiseSchedule, map: &IntensityMap) -> Result<Projection>;

    fn describe(&self) -> String;
}

/// Returns the known clean projection for `x_t.angle_index`.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    clean: Vec<Projection>,
}

impl OracleDenoiser {
    pub fn new(clean: Vec<Projection>) -> Self {
        Self { clean }
    }
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, x_t: &Projection, _t: usize, _s: &NoiseSchedule, map: &IntensityMap) -> Result<Projection> {
        let c = self
            .clean
            .get(x_t.angle_index)
            .ok_or_else(|| Error::Denoiser(format!("oracle has no image for angle {}", x_t.angle_index)))?;
        if c.dims() != x_t.dims() {
            return Err(Error::dims(x_t.dims(), c.dims()));
        }
        Ok(map.forward(c))
    }

    fn describe(&self) -> String {
        "oracle".into()
    }
}

/// `x_{0|t} = G_b * x_t / sqrt(alpha_bar_t)`: a Gaussian blur of standard
/// deviation `blur_std` pixels with the signal scale undone.
#[derive(Debug, Clone, Copy)]
pub struct ShrinkageDenoiser {
    pub blur_std: f64,
}

impl Denoiser for ShrinkageDenoiser {
    fn denoise(&self, x_t: &Projection, t: usize, schedule: &NoiseSchedule, _map: &IntensityMap) -> Result<Projection> {
        if !(self.blur_std > 0.0) {
            return Err(Error::invalid("blur std must be > 0"));
        }
        let [nu, nv] = x_t.dims();
        let kernel = gaussian_kernel(self.blur_std);
        // Replicate-pad by the kernel radius so edges are not darkened.
        let r = kernel.len() / 2;
        let (pu, pv) = (nu + 2 * r, nv + 2 * r);
        let mut padded = Vec::with_capacity(pu * pv);
        for v in 0..pv {
            let sv = v.saturating_sub(r).min(nv - 1);
            for u in 0..pu {
                padded.push(x_t.get(u.saturating_sub(r).min(nu - 1), sv));
            }
        }
        let blurred = filter_separable(&[pu, pv], &padded, &kernel);
        let inv = 1.0 / schedule.alpha_bar(t).sqrt();
        let mut out = Vec::with_capacity(nu * nv);
        for v in 0..nv {
            for u in 0..nu {
                out.push(blurred[(u + r) + pu * (v + r)] * inv);
            }
        }
        Projection::new([nu, nv], out, x_t.angle_index)
    }

    fn describe(&self) -> String {
        format!("shrinkage(blur_std={})", self.blur_std)
    }
}

/// Upper bound on a single frame body, to keep malformed length prefixes
/// from allocating unbounded memory.
pub const MAX_FRAME_BYTES: usize = 1 << 28;

fn frame_err(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "denoiser frame",
        reason: reason.into(),
    }
}

fn frame(body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend(body);
    out
}

/// Request frame: length prefix, then `t`, rows, cols as i32 and the image
/// as row-major f32 (rows run along `v`).
pub fn encode_request(x_t: &Projection, t: usize) -> Vec<u8> {
    let [nu, nv] = x_t.dims();
    let mut body = Vec::with_capacity(12 + 4 * nu * nv);
    body.extend_from_slice(&(t as i32).to_le_bytes());
    body.extend_from_slice(&(nv as i32).to_le_bytes());
    body.extend_from_slice(&(nu as i32).to_le_bytes());
    for &v in x_t.data() {
        body.extend_from_slice(&(v as f32).to_le_bytes());
    }
    frame(body)
}

/// Parses a request body (without the length prefix) into `(t, [cols, rows],
/// payload)`.
pub fn decode_request(body: &[u8]) -> Result<(i32, [usize; 2], Vec<f32>)> {
    if body.len() < 12 {
        return Err(frame_err(format!(
            "request body of {} bytes lacks a header",
            body.len()
        )));
    }
    let int = |k: usize| i32::from_le_bytes([body[k], body[k + 1], body[k + 2], body[k + 3]]);
    let (t, rows, cols) = (int(0), int(4), int(8));
    if rows <= 0 || cols <= 0 {
        return Err(frame_err(format!("non-positive dims {rows}x{cols}")));
    }
    let n = (rows as usize)
        .checked_mul(cols as usize)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| frame_err("dims overflow"))?;
    if body.len() - 12 != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: body.len() - 12,
        });
    }
    Ok((t, [cols as usize, rows as usize], decode_f32s(&body[12..])))
}

fn decode_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn encode_response(values: &[f32]) -> Vec<u8> {
    frame(values.iter().flat_map(|v| v.to_le_bytes()).collect())
}

/// Parses a response body holding exactly `expected` samples.
pub fn decode_response(body: &[u8], expected: usize) -> Result<Vec<f32>> {
    if body.len() != expected.saturating_mul(4) {
        return Err(Error::LengthMismatch {
            expected: expected.saturating_mul(4),
            actual: body.len(),
        });
    }
    Ok(decode_f32s(body))
}

/// Reads one length-prefixed frame body. `Ok(None)` on a clean end of
/// stream before the prefix.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(frame_err("stream ended inside a length prefix")),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Denoiser(format!("read failed: {e}"))),
        }
    }
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_FRAME_BYTES {
        return Err(frame_err(format!("frame of {n} bytes exceeds the limit")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)
        .map_err(|e| Error::Denoiser(format!("truncated frame: {e}")))?;
    Ok(Some(body))
}

struct Pipe {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// A child process speaking the frame protocol on stdin/stdout. Requests
/// are serialized through a lock, so one process serves all callers.
pub struct ExternalDenoiser {
    program: PathBuf,
    pipe: Mutex<Pipe>,
}

impl ExternalDenoiser {
    pub fn spawn(program: impl Into<PathBuf>, args: &[String]) -> Result<Self> {
        let program = program.into();
        let mut child = Command::new(&program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Denoiser(format!("cannot start {}: {e}", program.display())))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout piped"));
        Ok(Self {
            program,
            pipe: Mutex::new(Pipe {
                child,
                stdin: Some(stdin),
                stdout,
            }),
        })
    }
}

impl Denoiser for ExternalDenoiser {
    fn denoise(&self, x_t: &Projection, t: usize, _s: &NoiseSchedule, _map: &IntensityMap) -> Result<Projection> {
        let mut pipe = self
            .pipe
            .lock()
            .map_err(|_| Error::Denoiser("denoiser lock poisoned".into()))?;
        let stdin = pipe.stdin.as_mut().expect("stdin open while alive");
        stdin
            .write_all(&encode_request(x_t, t))
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Denoiser(format!("write to {} failed: {e}", self.program.display())))?;
        let body = read_frame(&mut pipe.stdout)?
            .ok_or_else(|| Error::Denoiser(format!("{} closed its output", self.program.display())))?;
        let [nu, nv] = x_t.dims();
        let values = decode_response(&body, nu * nv)?;
        Projection::new([nu, nv], values.into_iter().map(f64::from).collect(), x_t.angle_index)
            .map_err(|e| Error::Denoiser(format!("bad response: {e}")))
    }

    fn describe(&self) -> String {
        format!("external({})", self.program.display())
    }
}

impl Drop for ExternalDenoiser {
    fn drop(&mut self) {
        if let Ok(pipe) = self.pipe.get_mut() {
            // Closing stdin asks the child to exit.
            drop(pipe.stdin.take());
            let _ = pipe.child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn request_round_trip_and_layout() {
        let x = Projection::new([3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 7).unwrap();
        let bytes = encode_request(&x, 250);
        assert_eq!(
            u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize,
            bytes.len() - 4
        );
        let body = read_frame(&mut &bytes[..]).unwrap().unwrap();
        let (t, dims, data) = decode_request(&body).unwrap();
        assert_eq!((t, dims), (250, [3, 2]));
        assert_eq!(data, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        // rows (v) precede cols (u) in the header.
        assert_eq!(i32::from_le_bytes(body[4..8].try_into().unwrap()), 2);
    }

    #[test]
    fn malformed_frames_are_rejected() {
        assert!(decode_request(&[0; 11]).is_err());
        let mut body = vec![0u8; 12];
        body[4] = 2;
        body[8] = 2;
        assert!(matches!(decode_request(&body), Err(Error::LengthMismatch { .. })));
        body[4..8].copy_from_slice(&(-1i32).to_le_bytes());
        assert!(decode_request(&body).is_err());
        assert!(read_frame(&mut &[1u8, 0][..]).is_err());
        assert!(read_frame(&mut &[8u8, 0, 0, 0, 1][..]).is_err());
        assert!(read_frame(&mut &[][..]).unwrap().is_none());
        assert!(read_frame(&mut &u32::MAX.to_le_bytes()[..]).is_err());
        assert!(decode_response(&[0; 7], 2).is_err());
        let resp = encode_response(&[1.5, -2.0]);
        let body = read_frame(&mut &resp[..]).unwrap().unwrap();
        assert_eq!(decode_response(&body, 2).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn shrinkage_undoes_signal_scale_on_constants() {
        let s = NoiseSchedule::default();
        let ab = s.alpha_bar(300);
        let x = Projection::new([10, 12], vec![0.7 * ab.sqrt(); 120], 0).unwrap();
        let out = ShrinkageDenoiser { blur_std: 1.5 }
            .denoise(&x, 300, &s, &IntensityMap::IDENTITY)
            .unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn shrinkage_reduces_noise() {
        let s = NoiseSchedule::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Projection::new([32, 32], (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect(), 0).unwrap();
        let out = ShrinkageDenoiser { blur_std: 2.0 }
            .denoise(&x, 1, &s, &IntensityMap::IDENTITY)
            .unwrap();
        let var = |p: &Projection| p.data().iter().map(|v| v * v).sum::<f64>() / 1024.0;
        assert!(var(&out) < 0.1 * var(&x));
    }

    #[test]
    fn oracle_returns_clean_image_by_angle() {
        let clean = vec![
            Projection::zeros([4, 4], 0),
            Projection::new([4, 4], vec![1.0; 16], 1).unwrap(),
        ];
        let o = OracleDenoiser::new(clean);
        let x = Projection::zeros([4, 4], 1);
        assert_eq!(
            o.denoise(&x, 10, &NoiseSchedule::default(), &IntensityMap::IDENTITY)
                .unwrap()
                .data(),
            &[1.0; 16]
        );
        assert!(o
            .denoise(
                &Projection::zeros([4, 4], 2),
                10,
                &NoiseSchedule::default(),
                &IntensityMap::IDENTITY
            )
            .is_err());
    }

    #[test]
    fn intensity_map_sends_range_to_unit_interval() {
        let p = Projection::new([2, 2], vec![0.25, 0.5, 1.25, 0.75], 0).unwrap();
        let m = IntensityMap::fit(&p);
        assert_eq!(m.forward(&p).data(), &[-1.0, -0.5, 1.0, 0.0]);
        assert_eq!(m.inverse(&m.forward(&p)), p);
        let flat = Projection::new([2, 1], vec![0.3, 0.3], 0).unwrap();
        assert_eq!(IntensityMap::fit(&flat).forward(&flat).data(), &[0.0, 0.0]);
        let o = OracleDenoiser::new(vec![p.clone()]);
        let out = o
            .denoise(&Projection::zeros([2, 2], 0), 5, &NoiseSchedule::default(), &m)
            .unwrap();
        assert_eq!(out, m.forward(&p));
    }
}
