//! Discrete linear forward projection P, its exact adjoint, the ramp filter
//! and analytic reconstructions (fan-beam FBP / cone-beam FDK).
//!
//! The projector is ray driven: each ray is sampled at uniform steps of the
//! minimum voxel spacing, with bilinear (2D) / trilinear (3D) interpolation
//! at every sample. The backprojector scatters the identical interpolation
//! stencil, so `back_project` is the exact matrix transpose of
//! `forward_project` up to floating-point summation order.

use crate::error::{arg_err, Result};
use crate::grid::{ConeBeamGeometry, FanBeamGeometry, Geometry, VoxelGrid};

/// A voxelized image or volume, one value per grid voxel, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVec {
    pub grid: VoxelGrid,
    pub values: Vec<f64>,
}

impl ImageVec {
    pub fn zeros(grid: &VoxelGrid) -> Self {
        Self { grid: grid.clone(), values: vec![0.0; grid.num_voxels()] }
    }
}

/// Measurement/prediction vector over all rays, detector channel fastest,
/// then detector row (3D), then view.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub geometry: Geometry,
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(geometry: &Geometry) -> Self {
        Self { geometry: geometry.clone(), values: vec![0.0; geometry.num_rays()] }
    }
}

/// Entry/exit parameters of the segment `p0 + t*dir`, `t` in [0,1], inside
/// the grid bounding box. Returns None if the ray misses the box.
fn clip_to_box(p0: &[f64], dir: &[f64], lo: &[f64], hi: &[f64]) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for ax in 0..p0.len() {
        if dir[ax].abs() < 1e-300 {
            if p0[ax] < lo[ax] || p0[ax] > hi[ax] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[ax];
        let mut a = (lo[ax] - p0[ax]) * inv;
        let mut b = (hi[ax] - p0[ax]) * inv;
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    if t1 > t0 {
        Some((t0, t1))
    } else {
        None
    }
}

struct GridBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
    step: f64,
}

impl GridBox {
    fn new(grid: &VoxelGrid) -> Self {
        let lo: Vec<f64> = grid
            .origin
            .iter()
            .zip(&grid.spacing)
            .map(|(&o, &s)| o - 0.5 * s)
            .collect();
        let hi: Vec<f64> = lo
            .iter()
            .zip(&grid.dims)
            .zip(&grid.spacing)
            .map(|((&l, &d), &s)| l + d as f64 * s)
            .collect();
        let step = grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        Self { lo, hi, step }
    }
}

/// Gather (forward) or scatter (adjoint) along one 2D ray.
/// `accum` is called with (linear voxel index, interpolation weight * step).
fn trace_ray_2d(
    grid: &VoxelGrid,
    gbox: &GridBox,
    src: [f64; 2],
    det: [f64; 2],
    mut accum: impl FnMut(usize, f64),
) {
    let dir = [det[0] - src[0], det[1] - src[1]];
    let Some((t0, t1)) = clip_to_box(&src, &dir, &gbox.lo, &gbox.hi) else {
        return;
    };
    let ray_len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
    let seg_len = (t1 - t0) * ray_len;
    let nsteps = (seg_len / gbox.step).ceil().max(1.0) as usize;
    let h = seg_len / nsteps as f64;
    let dt = (t1 - t0) / nsteps as f64;
    let (nx, ny) = (grid.dims[0], grid.dims[1]);
    let (ox, oy) = (grid.origin[0], grid.origin[1]);
    let (sx, sy) = (grid.spacing[0], grid.spacing[1]);
    for i in 0..nsteps {
        let t = t0 + (i as f64 + 0.5) * dt;
        let ux = (src[0] + t * dir[0] - ox) / sx;
        let uy = (src[1] + t * dir[1] - oy) / sy;
        let ix = ux.floor();
        let iy = uy.floor();
        let fx = ux - ix;
        let fy = uy - iy;
        let ix = ix as isize;
        let iy = iy as isize;
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let x = ix + dx;
            if x < 0 || x >= nx as isize {
                continue;
            }
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                let y = iy + dy;
                if y < 0 || y >= ny as isize {
                    continue;
                }
                let w = wx * wy;
                if w != 0.0 {
                    accum(x as usize + nx * y as usize, w * h);
                }
            }
        }
    }
}

/// 3D analogue of `trace_ray_2d` with trilinear interpolation.
fn trace_ray_3d(
    grid: &VoxelGrid,
    gbox: &GridBox,
    src: [f64; 3],
    det: [f64; 3],
    mut accum: impl FnMut(usize, f64),
) {
    let dir = [det[0] - src[0], det[1] - src[1], det[2] - src[2]];
    let Some((t0, t1)) = clip_to_box(&src, &dir, &gbox.lo, &gbox.hi) else {
        return;
    };
    let ray_len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let seg_len = (t1 - t0) * ray_len;
    let nsteps = (seg_len / gbox.step).ceil().max(1.0) as usize;
    let h = seg_len / nsteps as f64;
    let dt = (t1 - t0) / nsteps as f64;
    let (nx, ny, nz) = (grid.dims[0], grid.dims[1], grid.dims[2]);
    for i in 0..nsteps {
        let t = t0 + (i as f64 + 0.5) * dt;
        let ux = (src[0] + t * dir[0] - grid.origin[0]) / grid.spacing[0];
        let uy = (src[1] + t * dir[1] - grid.origin[1]) / grid.spacing[1];
        let uz = (src[2] + t * dir[2] - grid.origin[2]) / grid.spacing[2];
        let (bx, by, bz) = (ux.floor(), uy.floor(), uz.floor());
        let (fx, fy, fz) = (ux - bx, uy - by, uz - bz);
        let (ix, iy, iz) = (bx as isize, by as isize, bz as isize);
        // fast path: whole stencil interior
        if ix >= 0
            && iy >= 0
            && iz >= 0
            && (ix as usize) + 1 < nx
            && (iy as usize) + 1 < ny
            && (iz as usize) + 1 < nz
        {
            let base = ix as usize + nx * (iy as usize + ny * iz as usize);
            let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
            accum(base, gx * gy * gz * h);
            accum(base + 1, fx * gy * gz * h);
            accum(base + nx, gx * fy * gz * h);
            accum(base + nx + 1, fx * fy * gz * h);
            let basez = base + nx * ny;
            accum(basez, gx * gy * fz * h);
            accum(basez + 1, fx * gy * fz * h);
            accum(basez + nx, gx * fy * fz * h);
            accum(basez + nx + 1, fx * fy * fz * h);
            continue;
        }
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let x = ix + dx;
            if x < 0 || x >= nx as isize {
                continue;
            }
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                let y = iy + dy;
                if y < 0 || y >= ny as isize {
                    continue;
                }
                for (dz, wz) in [(0isize, 1.0 - fz), (1, fz)] {
                    let z = iz + dz;
                    if z < 0 || z >= nz as isize {
                        continue;
                    }
                    let w = wx * wy * wz;
                    if w != 0.0 {
                        accum(x as usize + nx * (y as usize + ny * z as usize), w * h);
                    }
                }
            }
        }
    }
}

fn check_dims(grid: &VoxelGrid, geom: &Geometry) -> Result<()> {
    if grid.ndim() != geom.ndim() {
        return arg_err(format!(
            "geometry is {}D but grid is {}D",
            geom.ndim(),
            grid.ndim()
        ));
    }
    Ok(())
}

/// Line-integral forward projection z = P x over all rays of the geometry.
pub fn forward_project(image: &ImageVec, geom: &Geometry) -> Result<Sinogram> {
    check_dims(&image.grid, geom)?;
    let mut sino = Sinogram::zeros(geom);
    forward_project_into(image, geom, None, &mut sino.values);
    Ok(sino)
}

/// Forward projection restricted to `views` (all views when None). Rays of
/// unselected views stay zero.
pub(crate) fn forward_project_into(
    image: &ImageVec,
    geom: &Geometry,
    views: Option<&[usize]>,
    out: &mut [f64],
) {
    let gbox = GridBox::new(&image.grid);
    let vals = &image.values;
    match geom {
        Geometry::Fan(fan) => {
            for_each_view(fan.num_views(), views, |v| {
                let src = fan.source_pos(v);
                for j in 0..fan.num_det {
                    let det = fan.det_pos(v, j);
                    let mut acc = 0.0;
                    trace_ray_2d(&image.grid, &gbox, src, det, |idx, w| {
                        acc += w * vals[idx];
                    });
                    out[j + fan.num_det * v] = acc;
                }
            });
        }
        Geometry::Cone(cone) => {
            let fan = &cone.fan;
            for_each_view(fan.num_views(), views, |v| {
                let s2 = fan.source_pos(v);
                let src = [s2[0], s2[1], 0.0];
                for k in 0..cone.num_det_rows {
                    let z = cone.row_coord(k);
                    for j in 0..fan.num_det {
                        let d2 = fan.det_pos(v, j);
                        let det = [d2[0], d2[1], z];
                        let mut acc = 0.0;
                        trace_ray_3d(&image.grid, &gbox, src, det, |idx, w| {
                            acc += w * vals[idx];
                        });
                        out[j + fan.num_det * (k + cone.num_det_rows * v)] = acc;
                    }
                }
            });
        }
    }
}

fn for_each_view(num_views: usize, views: Option<&[usize]>, mut f: impl FnMut(usize)) {
    match views {
        Some(sel) => sel.iter().for_each(|&v| f(v)),
        None => (0..num_views).for_each(f),
    }
}

/// Exact adjoint x = P^T z of `forward_project`.
pub fn back_project(sino: &Sinogram, grid: &VoxelGrid) -> Result<ImageVec> {
    check_dims(grid, &sino.geometry)?;
    let mut image = ImageVec::zeros(grid);
    back_project_into(sino, None, &mut image);
    Ok(image)
}

pub(crate) fn back_project_into(sino: &Sinogram, views: Option<&[usize]>, image: &mut ImageVec) {
    let gbox = GridBox::new(&image.grid);
    let grid = image.grid.clone();
    let vals = &mut image.values;
    match &sino.geometry {
        Geometry::Fan(fan) => {
            for_each_view(fan.num_views(), views, |v| {
                let src = fan.source_pos(v);
                for j in 0..fan.num_det {
                    let ray_val = sino.values[j + fan.num_det * v];
                    if ray_val == 0.0 {
                        continue;
                    }
                    let det = fan.det_pos(v, j);
                    trace_ray_2d(&grid, &gbox, src, det, |idx, w| {
                        vals[idx] += w * ray_val;
                    });
                }
            });
        }
        Geometry::Cone(cone) => {
            let fan = &cone.fan;
            for_each_view(fan.num_views(), views, |v| {
                let s2 = fan.source_pos(v);
                let src = [s2[0], s2[1], 0.0];
                for k in 0..cone.num_det_rows {
                    let z = cone.row_coord(k);
                    for j in 0..fan.num_det {
                        let ray_val = sino.values[j + fan.num_det * (k + cone.num_det_rows * v)];
                        if ray_val == 0.0 {
                            continue;
                        }
                        let d2 = fan.det_pos(v, j);
                        let det = [d2[0], d2[1], z];
                        trace_ray_3d(&grid, &gbox, src, det, |idx, w| {
                            vals[idx] += w * ray_val;
                        });
                    }
                }
            });
        }
    }
}

/// Discrete spatial-domain Ram-Lak kernel. Stored full length (2*half+1),
/// centered; taps are the closed-form values
/// h(0) = 1/(4 d^2), h(k) = 0 for even k != 0, h(k) = -1/(pi k d)^2 for odd k.
#[derive(Debug, Clone, PartialEq)]
pub struct RampFilter {
    pub kernel: Vec<f64>,
    pub det_spacing: f64,
}

impl RampFilter {
    /// Kernel supporting `num_det` channels (half-width num_det - 1).
    pub fn new(num_det: usize, det_spacing: f64) -> Result<Self> {
        if num_det == 0 || !(det_spacing > 0.0) {
            return arg_err("ramp filter needs num_det > 0 and det_spacing > 0");
        }
        let half = num_det - 1;
        let mut kernel = vec![0.0; 2 * half + 1];
        let d2 = det_spacing * det_spacing;
        for k in -(half as isize)..=(half as isize) {
            let v = if k == 0 {
                0.25 / d2
            } else if k % 2 == 0 {
                0.0
            } else {
                let pkd = std::f64::consts::PI * k as f64 * det_spacing;
                -1.0 / (pkd * pkd)
            };
            kernel[(k + half as isize) as usize] = v;
        }
        Ok(Self { kernel, det_spacing })
    }

    fn half(&self) -> usize {
        (self.kernel.len() - 1) / 2
    }

    /// In-place filtering of one detector row: out_j = d * sum_k h(j-k) row_k.
    /// Symmetric as a matrix because the kernel is even.
    pub fn filter_row(&self, row: &[f64], out: &mut [f64]) {
        let half = self.half() as isize;
        let n = row.len() as isize;
        for j in 0..n {
            let mut acc = 0.0;
            let k0 = (j - half).max(0);
            let k1 = (j + half).min(n - 1);
            for k in k0..=k1 {
                acc += self.kernel[(j - k + half) as usize] * row[k as usize];
            }
            out[j as usize] = acc * self.det_spacing;
        }
    }
}

/// Per-view (and per-row in 3D) ramp filtering along the detector channel
/// axis, scaled by the detector spacing.
pub fn apply_ramp(sino: &Sinogram, filter: &RampFilter) -> Result<Sinogram> {
    let num_det = match &sino.geometry {
        Geometry::Fan(g) => g.num_det,
        Geometry::Cone(g) => g.fan.num_det,
    };
    if filter.half() + 1 != num_det {
        return arg_err(format!(
            "ramp kernel built for {} channels, sinogram has {}",
            filter.half() + 1,
            num_det
        ));
    }
    let mut out = sino.clone();
    for (row, orow) in sino
        .values
        .chunks_exact(num_det)
        .zip(out.values.chunks_exact_mut(num_det))
    {
        filter.filter_row(row, orow);
    }
    Ok(out)
}

/// Fan-beam FBP (2D) or FDK (3D): cosine pre-weighting, ramp filtering on
/// the virtual detector at the isocenter, distance-weighted backprojection
/// scaled by the angular step.
pub fn fbp_reconstruct(sino: &Sinogram, grid: &VoxelGrid) -> Result<ImageVec> {
    check_dims(grid, &sino.geometry)?;
    if sino.geometry.num_views() < 2 {
        return arg_err("FBP needs at least 2 views");
    }
    match &sino.geometry {
        Geometry::Fan(fan) => fbp_fan(sino, fan, grid),
        Geometry::Cone(cone) => fdk_cone(sino, cone, grid),
    }
}

fn angular_step(angles: &[f64]) -> f64 {
    // equi-spaced full-circle assumption; fall back to mean spacing
    if angles.len() < 2 {
        return 2.0 * std::f64::consts::PI;
    }
    2.0 * std::f64::consts::PI / angles.len() as f64
}

fn fbp_fan(sino: &Sinogram, fan: &FanBeamGeometry, grid: &VoxelGrid) -> Result<ImageVec> {
    let dso = fan.source_to_iso;
    let mag = dso / fan.source_to_detector;
    // detector rebinned to the virtual detector through the isocenter
    let vspace = fan.det_spacing * mag;
    let filt = RampFilter::new(fan.num_det, vspace)?;
    let nv = fan.num_views();
    let nd = fan.num_det;
    let mut q = vec![0.0; nv * nd];
    let mut wrow = vec![0.0; nd];
    for v in 0..nv {
        for j in 0..nd {
            let s = fan.det_coord(j) * mag;
            let w = dso / (dso * dso + s * s).sqrt();
            wrow[j] = sino.values[j + nd * v] * w;
        }
        filt.filter_row(&wrow, &mut q[nd * v..nd * (v + 1)]);
    }
    // backprojection with inverse-square distance weighting; the factor 1/2
    // accounts for the duplicated coverage of a full 360-degree scan
    let dbeta = angular_step(&fan.angles);
    let scale = 0.5 * dbeta;
    let mut image = ImageVec::zeros(grid);
    let (nx, ny) = (grid.dims[0], grid.dims[1]);
    let smin = -0.5 * (nd as f64 - 1.0);
    for v in 0..nv {
        let b = fan.angles[v];
        let (sb, cb) = (b.sin(), b.cos());
        let qv = &q[nd * v..nd * (v + 1)];
        for y in 0..ny {
            let py = grid.origin[1] + y as f64 * grid.spacing[1];
            for x in 0..nx {
                let px = grid.origin[0] + x as f64 * grid.spacing[0];
                // a = unit vector iso->source, u = detector axis
                let xa = px * cb + py * sb;
                let xu = -px * sb + py * cb;
                let l = dso - xa;
                if l <= 0.0 {
                    continue;
                }
                let s = dso * xu / l;
                // linear interpolation on the virtual detector
                let fj = s / vspace - smin;
                let j0 = fj.floor();
                let f = fj - j0;
                let j0 = j0 as isize;
                let mut val = 0.0;
                if j0 >= 0 && (j0 as usize) < nd {
                    val += (1.0 - f) * qv[j0 as usize];
                }
                if j0 + 1 >= 0 && ((j0 + 1) as usize) < nd {
                    val += f * qv[(j0 + 1) as usize];
                }
                image.values[x + nx * y] += scale * (dso * dso) / (l * l) * val;
            }
        }
    }
    Ok(image)
}

fn fdk_cone(sino: &Sinogram, cone: &ConeBeamGeometry, grid: &VoxelGrid) -> Result<ImageVec> {
    let fan = &cone.fan;
    let dso = fan.source_to_iso;
    let mag = dso / fan.source_to_detector;
    let vspace = fan.det_spacing * mag;
    let vrow = cone.det_row_spacing * mag;
    let filt = RampFilter::new(fan.num_det, vspace)?;
    let nv = fan.num_views();
    let nd = fan.num_det;
    let nr = cone.num_det_rows;
    let mut q = vec![0.0; nv * nr * nd];
    let mut wrow = vec![0.0; nd];
    for v in 0..nv {
        for k in 0..nr {
            let t = cone.row_coord(k) * mag;
            for j in 0..nd {
                let s = fan.det_coord(j) * mag;
                let w = dso / (dso * dso + s * s + t * t).sqrt();
                wrow[j] = sino.values[j + nd * (k + nr * v)] * w;
            }
            let off = nd * (k + nr * v);
            filt.filter_row(&wrow, &mut q[off..off + nd]);
        }
    }
    let dbeta = angular_step(&fan.angles);
    let scale = 0.5 * dbeta;
    let mut image = ImageVec::zeros(grid);
    let (nx, ny, nz) = (grid.dims[0], grid.dims[1], grid.dims[2]);
    let smin = -0.5 * (nd as f64 - 1.0);
    let tmin = -0.5 * (nr as f64 - 1.0);
    for v in 0..nv {
        let b = fan.angles[v];
        let (sb, cb) = (b.sin(), b.cos());
        let qv = &q[nd * nr * v..nd * nr * (v + 1)];
        for z in 0..nz {
            let pz = grid.origin[2] + z as f64 * grid.spacing[2];
            for y in 0..ny {
                let py = grid.origin[1] + y as f64 * grid.spacing[1];
                for x in 0..nx {
                    let px = grid.origin[0] + x as f64 * grid.spacing[0];
                    let xa = px * cb + py * sb;
                    let xu = -px * sb + py * cb;
                    let l = dso - xa;
                    if l <= 0.0 {
                        continue;
                    }
                    let s = dso * xu / l;
                    let t = dso * pz / l;
                    let fj = s / vspace - smin;
                    let fk = t / vrow - tmin;
                    let j0 = fj.floor();
                    let k0 = fk.floor();
                    let fx = fj - j0;
                    let fyv = fk - k0;
                    let j0 = j0 as isize;
                    let k0 = k0 as isize;
                    let mut val = 0.0;
                    for (dk, wk) in [(0isize, 1.0 - fyv), (1, fyv)] {
                        let k = k0 + dk;
                        if k < 0 || k >= nr as isize {
                            continue;
                        }
                        for (dj, wj) in [(0isize, 1.0 - fx), (1, fx)] {
                            let j = j0 + dj;
                            if j < 0 || j >= nd as isize {
                                continue;
                            }
                            val += wk * wj * qv[j as usize + nd * k as usize];
                        }
                    }
                    image.values[x + nx * (y + ny * z)] +=
                        scale * (dso * dso) / (l * l) * val;
                }
            }
        }
    }
    Ok(image)
}
