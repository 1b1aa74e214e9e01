//! Differentiable splatting of a Gaussian field onto the detector.
//!
//! Each Gaussian becomes a 2D splat whose peak `rho * mu` is the line
//! integral of the 3D Gaussian through its centre. Splats are composited
//! front to back with the over operator; negative opacities are admitted, so
//! transmittance can exceed one.

use rayon::prelude::*;

use crate::field::{Activation, Gaussian3D, GaussianField, GaussianGrad};
use crate::geometry::ScannerGeometry;
use crate::math::{mat_t_vec, mat_vec, norm, quat_mat_backward, scale, sub, Mat3, Vec3};
use crate::projector::Projection;
use crate::{Error, Result};

pub const TILE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendMode {
    /// `C = sum T_i a_i`, `T_i = prod_{j<i} (1 - a_j)`.
    Over,
    /// `C = sum a_i`.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub blend: BlendMode,
    /// Contributions with `|alpha|` below this are skipped.
    pub alpha_skip: f64,
    /// Upper clamp on positive alpha. Negative alpha is never clamped.
    pub alpha_max: f64,
    /// Added to the projected covariance diagonal, pixel^2.
    pub low_pass: f64,
    /// Mahalanobis cutoff in standard deviations.
    pub cutoff: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            blend: BlendMode::Over,
            alpha_skip: 1.0 / 255.0,
            alpha_max: 0.999,
            low_pass: 0.3,
            cutoff: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    /// Storage index of the source Gaussian.
    pub index: usize,
    /// Continuous pixel coordinates `(u, v)`.
    pub center: [f64; 2],
    /// Projected covariance including the low-pass term, pixel^2.
    pub cov2d: [[f64; 2]; 2],
    /// Inverse of `cov2d` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub mu: f64,
    pub depth: f64,
    pub rho: f64,
    /// Inclusive pixel box `[u0, u1, v0, v1]` clipped to the detector.
    pub bbox: [usize; 4],
}

impl Splat2D {
    #[inline]
    fn mahalanobis(&self, pu: f64, pv: f64) -> (f64, f64, f64) {
        let dx = pu - self.center[0];
        let dy = pv - self.center[1];
        let [a, b, c] = self.conic;
        (dx, dy, a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
    }

    /// Unclamped `rho * mu * exp(-m / 2)` at a pixel, ignoring the cutoff.
    pub fn alpha_at(&self, pu: f64, pv: f64) -> f64 {
        let (_, _, m) = self.mahalanobis(pu, pv);
        self.rho * self.mu * (-0.5 * m).exp()
    }
}

/// Camera-space quantities of one Gaussian at one angle.
struct Projected {
    cam: Vec3,
    /// `J W`, 2x3.
    t: [[f64; 3]; 2],
    cov3: Mat3,
    cov2: [[f64; 2]; 2],
    dir: Vec3,
    dist: f64,
    /// `r^T Sigma^-1 r` along the unit source direction.
    kappa: f64,
    local_dir: Vec3,
}

fn project_internals(
    g: &Gaussian3D,
    geom: &ScannerGeometry,
    angle_index: usize,
    low_pass: f64,
) -> Result<Option<Projected>> {
    let f = geom.frame(angle_index)?;
    let cfg = geom.config();
    let w = &f.world_to_camera;
    let d = sub(g.position, f.source);
    let cam = mat_vec(w, d);
    if cam[0] <= 1e-6 * cfg.dso {
        return Ok(None);
    }
    let (dsd, su, sv) = (cfg.dsd, cfg.detector_spacing[0], cfg.detector_spacing[1]);
    let [cf, cu, cv] = cam;
    let jac = [
        [-dsd * cu / (cf * cf * su), dsd / (cf * su), 0.0],
        [-dsd * cv / (cf * cf * sv), 0.0, dsd / (cf * sv)],
    ];
    let mut t = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            t[i][j] = (0..3).map(|k| jac[i][k] * w[k][j]).sum();
        }
    }
    let cov3 = g.covariance();
    let mut cov2 = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for k in 0..3 {
                for l in 0..3 {
                    acc += t[i][k] * cov3[k][l] * t[j][l];
                }
            }
            cov2[i][j] = acc;
        }
    }
    cov2[0][0] += low_pass;
    cov2[1][1] += low_pass;
    let dist = norm(d);
    let dir = scale(d, 1.0 / dist);
    let local_dir = mat_t_vec(&g.rotation_matrix(), dir);
    let s = g.scales();
    let kappa = (0..3).map(|k| local_dir[k] * local_dir[k] / (s[k] * s[k])).sum();
    Ok(Some(Projected {
        cam,
        t,
        cov3,
        cov2,
        dir,
        dist,
        kappa,
        local_dir,
    }))
}

/// Projects Gaussian `index` of a field to a splat; `None` when it is behind
/// the source, degenerate, or entirely off the detector.
pub fn project_gaussian(
    g: &Gaussian3D,
    index: usize,
    activation: Activation,
    geom: &ScannerGeometry,
    angle_index: usize,
    opts: &RenderOptions,
) -> Result<Option<Splat2D>> {
    let Some(p) = project_internals(g, geom, angle_index, opts.low_pass)? else {
        return Ok(None);
    };
    let cfg = geom.config();
    let [[a, b], [_, c]] = p.cov2;
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return Ok(None);
    }
    let center = [
        cfg.dsd * p.cam[1] / p.cam[0] / cfg.detector_spacing[0] + 0.5 * cfg.detector_dims[0] as f64 - 0.5,
        cfg.dsd * p.cam[2] / p.cam[0] / cfg.detector_spacing[1] + 0.5 * cfg.detector_dims[1] as f64 - 0.5,
    ];
    let mut bbox = [0usize; 4];
    for (axis, var) in [a, c].into_iter().enumerate() {
        let half = opts.cutoff * var.sqrt() * (1.0 + 1e-9) + 1e-9;
        let lo = (center[axis] - half).ceil().max(0.0);
        let hi = (center[axis] + half).floor().min(cfg.detector_dims[axis] as f64 - 1.0);
        if !(lo <= hi) {
            return Ok(None);
        }
        bbox[2 * axis] = lo as usize;
        bbox[2 * axis + 1] = hi as usize;
    }
    Ok(Some(Splat2D {
        index,
        center,
        cov2d: p.cov2,
        conic: [c / det, -b / det, a / det],
        mu: (2.0 * std::f64::consts::PI).sqrt() / p.kappa.sqrt(),
        depth: p.dist,
        rho: activation.activate(g.raw_density),
        bbox,
    }))
}

/// Projects every Gaussian and sorts front to back, ties by storage index.
pub fn project_field(
    field: &GaussianField,
    geom: &ScannerGeometry,
    angle_index: usize,
    opts: &RenderOptions,
) -> Result<Vec<Splat2D>> {
    project_sorted(field, geom, angle_index, opts)
}

fn project_sorted(
    field: &GaussianField,
    geom: &ScannerGeometry,
    angle_index: usize,
    opts: &RenderOptions,
) -> Result<Vec<Splat2D>> {
    geom.frame(angle_index)?;
    let act = field.activation();
    let mut splats: Vec<Splat2D> = field
        .gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, i, act, geom, angle_index, opts).transpose())
        .collect::<Result<_>>()?;
    splats.par_sort_unstable_by(splat_order);
    Ok(splats)
}

fn splat_order(a: &Splat2D, b: &Splat2D) -> std::cmp::Ordering {
    a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index))
}

fn sort_splats(splats: &mut [Splat2D]) {
    splats.sort_by(splat_order);
}

/// One contribution at a pixel after cutoff, skip and clamp.
#[derive(Clone, Copy)]
struct Hit {
    slot: usize,
    alpha: f64,
    clamped: bool,
    e: f64,
    dx: f64,
    dy: f64,
}

/// Evaluates splat `s` at a pixel. `Ok(None)` when outside the cutoff or
/// below the skip threshold.
#[inline]
fn evaluate(s: &Splat2D, slot: usize, pu: f64, pv: f64, c2: f64, opts: &RenderOptions) -> Result<Option<Hit>> {
    let (dx, dy, m) = s.mahalanobis(pu, pv);
    if !(m <= c2) {
        if m.is_nan() {
            return Err(Error::invalid(format!("splat {} has a NaN footprint", s.index)));
        }
        return Ok(None);
    }
    let e = (-0.5 * m).exp();
    let raw = s.rho * s.mu * e;
    if !raw.is_finite() {
        return Err(Error::invalid(format!(
            "non-finite alpha {raw} from Gaussian {} (rho {}, mu {}) at pixel ({pu}, {pv})",
            s.index, s.rho, s.mu
        )));
    }
    if raw.abs() < opts.alpha_skip {
        return Ok(None);
    }
    let clamped = raw > opts.alpha_max;
    Ok(Some(Hit {
        slot,
        alpha: if clamped { opts.alpha_max } else { raw },
        clamped,
        e,
        dx,
        dy,
    }))
}

fn pixel_hits(
    pu: f64,
    pv: f64,
    splats: &[Splat2D],
    list: impl Iterator<Item = usize>,
    opts: &RenderOptions,
    out: &mut Vec<Hit>,
) -> Result<()> {
    out.clear();
    let c2 = opts.cutoff * opts.cutoff;
    for slot in list {
        if let Some(h) = evaluate(&splats[slot], slot, pu, pv, c2, opts)? {
            out.push(h);
        }
    }
    Ok(())
}

fn composite(hits: &[Hit], blend: BlendMode) -> f64 {
    match blend {
        BlendMode::Over => {
            let mut c = 0.0;
            let mut t = 1.0;
            for h in hits {
                c += t * h.alpha;
                t *= 1.0 - h.alpha;
            }
            c
        }
        BlendMode::Additive => hits.iter().fold(0.0, |c, h| c + h.alpha),
    }
}

struct Tiling {
    tiles_u: usize,
    lists: Vec<Vec<u32>>,
}

fn bin_tiles(splats: &[Splat2D], dims: [usize; 2]) -> Tiling {
    let tiles_u = dims[0].div_ceil(TILE);
    let tiles_v = dims[1].div_ceil(TILE);
    let mut lists = vec![Vec::new(); tiles_u * tiles_v];
    for (slot, s) in splats.iter().enumerate() {
        let [u0, u1, v0, v1] = s.bbox;
        for tv in v0 / TILE..=v1 / TILE {
            for tu in u0 / TILE..=u1 / TILE {
                lists[tu + tiles_u * tv].push(slot as u32);
            }
        }
    }
    Tiling { tiles_u, lists }
}

/// Pixel rectangle `[u0, u1) x [v0, v1)` of a tile.
fn tile_rect(tile: usize, tiles_u: usize, dims: [usize; 2]) -> [usize; 4] {
    let (tu, tv) = (tile % tiles_u, tile / tiles_u);
    let (u0, v0) = (tu * TILE, tv * TILE);
    [u0, (u0 + TILE).min(dims[0]), v0, (v0 + TILE).min(dims[1])]
}

/// Walks a tile's depth-sorted splat list, visiting only the pixels inside
/// each splat's box. Per pixel this performs the same sequence of operations
/// as gathering that pixel's hits in order. `visit` receives the list
/// position, the tile-local pixel index and the hit.
fn scatter_tile(
    splats: &[Splat2D],
    list: &[u32],
    rect: [usize; 4],
    opts: &RenderOptions,
    mut visit: impl FnMut(usize, usize, &Hit),
) -> Result<()> {
    let [ru0, ru1, rv0, rv1] = rect;
    let w = ru1 - ru0;
    let c2 = opts.cutoff * opts.cutoff;
    for (pos, &slot) in list.iter().enumerate() {
        let s = &splats[slot as usize];
        let [u0, u1, v0, v1] = s.bbox;
        let (u0, u1) = (u0.max(ru0), (u1 + 1).min(ru1));
        let (v0, v1) = (v0.max(rv0), (v1 + 1).min(rv1));
        for v in v0..v1 {
            for u in u0..u1 {
                if let Some(h) = evaluate(s, slot as usize, u as f64, v as f64, c2, opts)? {
                    visit(pos, (u - ru0) + w * (v - rv0), &h);
                }
            }
        }
    }
    Ok(())
}

/// Sorted splats of one field at one angle, binned into tiles. Rendering
/// and backpropagation can share one frame.
pub struct Frame {
    splats: Vec<Splat2D>,
    tiling: Tiling,
    dims: [usize; 2],
    angle_index: usize,
}

impl Frame {
    pub fn new(
        field: &GaussianField,
        geom: &ScannerGeometry,
        angle_index: usize,
        opts: &RenderOptions,
    ) -> Result<Frame> {
        let splats = project_sorted(field, geom, angle_index, opts)?;
        let dims = geom.detector_dims();
        let tiling = bin_tiles(&splats, dims);
        Ok(Frame {
            splats,
            tiling,
            dims,
            angle_index,
        })
    }

    pub fn splats(&self) -> &[Splat2D] {
        &self.splats
    }

    pub fn render(&self, opts: &RenderOptions) -> Result<Projection> {
        composite_tiles(&self.splats, &self.tiling, self.dims, self.angle_index, opts)
    }

    /// Analytic gradients of `sum(dl_dc * render(...))`. `field` and `geom`
    /// must be the ones the frame was built from.
    pub fn backward(
        &self,
        field: &GaussianField,
        geom: &ScannerGeometry,
        opts: &RenderOptions,
        dl_dc: &Projection,
    ) -> Result<RenderGrads> {
        let dims = self.dims;
        if dl_dc.dims() != dims {
            return Err(Error::dims(dims, dl_dc.dims()));
        }
        if dl_dc.angle_index != self.angle_index {
            return Err(Error::invalid(format!(
                "upstream gradient is for angle {}, not {}",
                dl_dc.angle_index, self.angle_index
            )));
        }
        let splats = &self.splats;
        let upstream = dl_dc.data();
        let per_tile: Vec<Vec<SplatAcc>> = self
            .tiling
            .lists
            .par_iter()
            .enumerate()
            .map(|(tile, list)| {
                backward_tile(
                    splats,
                    list,
                    tile_rect(tile, self.tiling.tiles_u, dims),
                    dims,
                    upstream,
                    opts,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut accs = vec![SplatAcc::default(); splats.len()];
        for (list, local) in self.tiling.lists.iter().zip(&per_tile) {
            for (&slot, a) in list.iter().zip(local) {
                accs[slot as usize].add(a);
            }
        }
        let act = field.activation();
        let iso = field.config.isotropic;
        let chained: Vec<(usize, GaussianGrad, [f64; 2])> = splats
            .par_iter()
            .zip(accs.par_iter())
            .map(|(s, acc)| {
                let g = &field.gaussians[s.index];
                let p = project_internals(g, geom, self.angle_index, opts.low_pass)?
                    .ok_or_else(|| Error::invalid(format!("Gaussian {} no longer projects; field changed", s.index)))?;
                let mut grad = splat_backward(g, act, geom, self.angle_index, s, &p, acc)?;
                if iso {
                    grad.make_isotropic();
                }
                Ok((s.index, grad, acc.center))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = field.len();
        let mut out = RenderGrads {
            gaussians: vec![GaussianGrad::default(); n],
            screen: vec![[0.0; 2]; n],
            visible: vec![false; n],
        };
        for (i, g, c) in chained {
            out.gaussians[i] = g;
            out.screen[i] = c;
            out.visible[i] = true;
        }
        Ok(out)
    }
}

fn composite_tiles(
    splats: &[Splat2D],
    tiling: &Tiling,
    dims: [usize; 2],
    angle_index: usize,
    opts: &RenderOptions,
) -> Result<Projection> {
    let tiles: Vec<Vec<f64>> = tiling
        .lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let rect = tile_rect(tile, tiling.tiles_u, dims);
            let n = (rect[1] - rect[0]) * (rect[3] - rect[2]);
            let mut c = vec![0.0; n];
            let mut t = vec![1.0; n];
            scatter_tile(splats, list, rect, opts, |_, px, h| match opts.blend {
                BlendMode::Over => {
                    c[px] += t[px] * h.alpha;
                    t[px] *= 1.0 - h.alpha;
                }
                BlendMode::Additive => c[px] += h.alpha,
            })?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = vec![0.0; dims[0] * dims[1]];
    for (tile, c) in tiles.into_iter().enumerate() {
        let [u0, u1, v0, v1] = tile_rect(tile, tiling.tiles_u, dims);
        let w = u1 - u0;
        for v in v0..v1 {
            data[u0 + dims[0] * v..u1 + dims[0] * v].copy_from_slice(&c[w * (v - v0)..w * (v - v0 + 1)]);
        }
    }
    Projection::new(dims, data, angle_index)
}

/// A recorded contribution for the backward pass.
struct TileHit {
    pos: u32,
    px: u32,
    hit: Hit,
    trans: f64,
}

fn backward_tile(
    splats: &[Splat2D],
    list: &[u32],
    rect: [usize; 4],
    dims: [usize; 2],
    upstream: &[f64],
    opts: &RenderOptions,
) -> Result<Vec<SplatAcc>> {
    let [u0, u1, v0, v1] = rect;
    let w = u1 - u0;
    let up: Vec<f64> = (v0..v1)
        .flat_map(|v| (u0..u1).map(move |u| upstream[u + dims[0] * v]))
        .collect();
    let mut local = vec![SplatAcc::default(); list.len()];
    if up.iter().all(|&g| g == 0.0) {
        return Ok(local);
    }
    let mut t = vec![1.0; up.len()];
    let mut hits = Vec::new();
    scatter_tile(splats, list, rect, opts, |pos, px, h| {
        let trans = t[px];
        t[px] *= 1.0 - h.alpha;
        if up[px] != 0.0 {
            hits.push(TileHit {
                pos: pos as u32,
                px: px as u32,
                hit: *h,
                trans,
            });
        }
    })?;
    debug_assert_eq!(w * (v1 - v0), up.len());
    // Back to front: `behind` is the composite of everything after a hit.
    let mut behind = vec![0.0; up.len()];
    for th in hits.iter().rev() {
        let h = &th.hit;
        let px = th.px as usize;
        let d_alpha = match opts.blend {
            BlendMode::Over => th.trans * (1.0 - behind[px]),
            BlendMode::Additive => 1.0,
        };
        behind[px] = h.alpha + (1.0 - h.alpha) * behind[px];
        if h.clamped {
            continue;
        }
        let g = up[px] * d_alpha;
        let s = &splats[h.slot];
        let acc = &mut local[th.pos as usize];
        acc.rho += g * s.mu * h.e;
        acc.mu += g * s.rho * h.e;
        let gm = -0.5 * h.alpha * g;
        let [a, b, c] = s.conic;
        acc.center[0] += -2.0 * gm * (a * h.dx + b * h.dy);
        acc.center[1] += -2.0 * gm * (b * h.dx + c * h.dy);
        acc.conic[0] += gm * h.dx * h.dx;
        acc.conic[1] += gm * 2.0 * h.dx * h.dy;
        acc.conic[2] += gm * h.dy * h.dy;
    }
    Ok(local)
}

/// Composites splats onto a `dims` detector with tile binning.
pub fn render_splats(
    mut splats: Vec<Splat2D>,
    dims: [usize; 2],
    angle_index: usize,
    opts: &RenderOptions,
) -> Result<Projection> {
    sort_splats(&mut splats);
    let tiling = bin_tiles(&splats, dims);
    composite_tiles(&splats, &tiling, dims, angle_index, opts)
}

/// Reference renderer: every splat tested at every pixel, no tiles.
pub fn render_splats_brute_force(
    mut splats: Vec<Splat2D>,
    dims: [usize; 2],
    angle_index: usize,
    opts: &RenderOptions,
) -> Result<Projection> {
    sort_splats(&mut splats);
    let mut data = vec![0.0; dims[0] * dims[1]];
    let mut hits = Vec::new();
    for v in 0..dims[1] {
        for u in 0..dims[0] {
            pixel_hits(u as f64, v as f64, &splats, 0..splats.len(), opts, &mut hits)?;
            data[u + dims[0] * v] = composite(&hits, opts.blend);
        }
    }
    Projection::new(dims, data, angle_index)
}

pub fn render(
    field: &GaussianField,
    geom: &ScannerGeometry,
    angle_index: usize,
    opts: &RenderOptions,
) -> Result<Projection> {
    Frame::new(field, geom, angle_index, opts)?.render(opts)
}

/// Per-splat sums of the loss gradient with respect to 2D quantities.
#[derive(Debug, Clone, Copy, Default)]
struct SplatAcc {
    rho: f64,
    mu: f64,
    center: [f64; 2],
    conic: [f64; 3],
}

impl SplatAcc {
    fn add(&mut self, o: &SplatAcc) {
        self.rho += o.rho;
        self.mu += o.mu;
        self.center[0] += o.center[0];
        self.center[1] += o.center[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderGrads {
    /// One entry per Gaussian in storage order; zero for culled Gaussians.
    pub gaussians: Vec<GaussianGrad>,
    /// `dL / d center` in pixel units.
    pub screen: Vec<[f64; 2]>,
    /// Whether the Gaussian produced a splat.
    pub visible: Vec<bool>,
}

/// Analytic gradients of `sum(dl_dc * render(...))` with respect to every
/// Gaussian parameter.
pub fn render_backward(
    field: &GaussianField,
    geom: &ScannerGeometry,
    angle_index: usize,
    opts: &RenderOptions,
    dl_dc: &Projection,
) -> Result<RenderGrads> {
    Frame::new(field, geom, angle_index, opts)?.backward(field, geom, opts, dl_dc)
}

fn splat_backward(
    g: &Gaussian3D,
    act: Activation,
    geom: &ScannerGeometry,
    angle_index: usize,
    splat: &Splat2D,
    p: &Projected,
    acc: &SplatAcc,
) -> Result<GaussianGrad> {
    let cfg = geom.config();
    let w = &geom.frame(angle_index)?.world_to_camera;
    let (dsd, su, sv) = (cfg.dsd, cfg.detector_spacing[0], cfg.detector_spacing[1]);
    let [cf, cu, cv] = p.cam;

    // Conic -> projected covariance: dL/dS = -K G K.
    let [a, b, c] = splat.conic;
    let k = [[a, b], [b, c]];
    let gk = [[acc.conic[0], 0.5 * acc.conic[1]], [0.5 * acc.conic[1], acc.conic[2]]];
    let mut kg = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            kg[i][j] = k[i][0] * gk[0][j] + k[i][1] * gk[1][j];
        }
    }
    let mut gs = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            gs[i][j] = -(kg[i][0] * k[0][j] + kg[i][1] * k[1][j]);
        }
    }

    // Covariance path: S = T Sigma T^T.
    let t = &p.t;
    let mut g_sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for x in 0..2 {
                for y in 0..2 {
                    s += t[x][i] * gs[x][y] * t[y][j];
                }
            }
            g_sigma[i][j] = s;
        }
    }
    let mut g_t = [[0.0; 3]; 2];
    for x in 0..2 {
        for j in 0..3 {
            let mut s = 0.0;
            for y in 0..2 {
                for l in 0..3 {
                    s += gs[x][y] * t[y][l] * p.cov3[l][j];
                }
            }
            g_t[x][j] = 2.0 * s;
        }
    }
    let mut g_j = [[0.0; 3]; 2];
    for x in 0..2 {
        for kk in 0..3 {
            g_j[x][kk] = (0..3).map(|j| g_t[x][j] * w[kk][j]).sum();
        }
    }
    let inv_su = 1.0 / su;
    let inv_sv = 1.0 / sv;
    let mut g_cam = [0.0; 3];
    g_cam[0] += g_j[0][0] * 2.0 * dsd * cu / (cf * cf * cf) * inv_su - g_j[0][1] * dsd / (cf * cf) * inv_su
        + g_j[1][0] * 2.0 * dsd * cv / (cf * cf * cf) * inv_sv
        - g_j[1][2] * dsd / (cf * cf) * inv_sv;
    g_cam[1] += -g_j[0][0] * dsd / (cf * cf) * inv_su;
    g_cam[2] += -g_j[1][0] * dsd / (cf * cf) * inv_sv;
    // Centre.
    g_cam[0] += -acc.center[0] * dsd * cu / (cf * cf) * inv_su - acc.center[1] * dsd * cv / (cf * cf) * inv_sv;
    g_cam[1] += acc.center[0] * dsd / cf * inv_su;
    g_cam[2] += acc.center[1] * dsd / cf * inv_sv;
    let mut g_pos = mat_t_vec(w, g_cam);

    // mu = sqrt(2 pi) kappa^(-1/2), kappa = sum_k (R_k . r)^2 / s_k^2.
    let s = g.scales();
    let rot = g.rotation_matrix();
    let g_kappa = acc.mu * (-0.5 * splat.mu / p.kappa);
    let wl = p.local_dir;
    let inv_s2 = s.map(|v| 1.0 / (v * v));
    let g_r = mat_vec(&rot, [0, 1, 2].map(|k| 2.0 * g_kappa * wl[k] * inv_s2[k]));
    let rdotg = p.dir[0] * g_r[0] + p.dir[1] * g_r[1] + p.dir[2] * g_r[2];
    for i in 0..3 {
        g_pos[i] += (g_r[i] - p.dir[i] * rdotg) / p.dist;
    }
    let mut g_log_scale = [0, 1, 2].map(|k| -2.0 * g_kappa * wl[k] * wl[k] * inv_s2[k]);
    let mut g_rot = [[0.0; 3]; 3];
    for j in 0..3 {
        for kk in 0..3 {
            g_rot[j][kk] = 2.0 * g_kappa * p.dir[j] * wl[kk] * inv_s2[kk];
        }
    }

    // Sigma = M M^T with M = R diag(s).
    for j in 0..3 {
        for kk in 0..3 {
            let g_m: f64 = 2.0 * (0..3).map(|l| g_sigma[j][l] * rot[l][kk] * s[kk]).sum::<f64>();
            g_rot[j][kk] += g_m * s[kk];
            g_log_scale[kk] += g_m * rot[j][kk] * s[kk];
        }
    }

    Ok(GaussianGrad {
        position: g_pos,
        log_scale: g_log_scale,
        rotation: quat_mat_backward(g.rotation, &g_rot),
        raw_density: acc.rho * act.slope(g.raw_density),
    })
}
