//! Analytic ellipse/ellipsoid phantoms, rasterization and inverse-crime
//! avoiding measurement simulation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, Result};
use crate::grid::{Geometry, VoxelGrid};
use crate::projector::{forward_project, ImageVec, Sinogram};

/// One additive component: an ellipse (2D) or ellipsoid (3D) rotated about
/// the z axis.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipseComponent {
    /// Center in mm, 2 or 3 entries.
    pub center: Vec<f64>,
    /// Semi-axes in mm, same length as center.
    pub semi_axes: Vec<f64>,
    /// In-plane rotation in radians.
    pub rotation: f64,
    /// Additive attenuation value in mm^-1 (may be negative for inserts).
    pub value: f64,
}

/// Sum-of-ellipses phantom. All components share a dimensionality.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EllipsePhantom {
    pub components: Vec<EllipseComponent>,
}

impl EllipsePhantom {
    pub fn ndim(&self) -> Option<usize> {
        self.components.first().map(|c| c.center.len())
    }

    /// Additive value at a point in mm.
    pub fn eval(&self, p: &[f64]) -> f64 {
        let mut acc = 0.0;
        for c in &self.components {
            let dx = p[0] - c.center[0];
            let dy = p[1] - c.center[1];
            let (s, co) = c.rotation.sin_cos();
            let rx = co * dx + s * dy;
            let ry = -s * dx + co * dy;
            let mut q = (rx / c.semi_axes[0]).powi(2) + (ry / c.semi_axes[1]).powi(2);
            if c.center.len() == 3 {
                let dz = p[2] - c.center[2];
                q += (dz / c.semi_axes[2]).powi(2);
            }
            if q <= 1.0 {
                acc += c.value;
            }
        }
        acc
    }
}

/// Mean of `supersample^d` point evaluations per voxel.
pub fn rasterize(phantom: &EllipsePhantom, grid: &VoxelGrid, supersample: usize) -> Result<ImageVec> {
    if supersample < 1 {
        return arg_err("supersample must be >= 1");
    }
    let d = grid.ndim();
    if let Some(pd) = phantom.ndim() {
        if pd != d {
            return arg_err("phantom/grid dimensionality mismatch");
        }
    }
    let mut img = ImageVec::zeros(grid);
    let s = supersample;
    let inv = 1.0 / s as f64;
    // sub-voxel offsets in mm per axis
    let offsets: Vec<Vec<f64>> = (0..d)
        .map(|ax| {
            (0..s)
                .map(|k| ((k as f64 + 0.5) * inv - 0.5) * grid.spacing[ax])
                .collect()
        })
        .collect();
    let nx = grid.dims[0];
    let ny = grid.dims[1];
    let nz = if d == 3 { grid.dims[2] } else { 1 };
    let norm = inv.powi(d as i32);
    let mut p = vec![0.0; d];
    let mut lin = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let c = if d == 3 {
                    grid.voxel_center(&[x, y, z])
                } else {
                    grid.voxel_center(&[x, y])
                };
                let mut acc = 0.0;
                for oz in 0..if d == 3 { s } else { 1 } {
                    for oy in 0..s {
                        for ox in 0..s {
                            p[0] = c[0] + offsets[0][ox];
                            p[1] = c[1] + offsets[1][oy];
                            if d == 3 {
                                p[2] = c[2] + offsets[2][oz];
                            }
                            acc += phantom.eval(&p);
                        }
                    }
                }
                img.values[lin] = acc * norm;
                lin += 1;
            }
        }
    }
    Ok(img)
}

/// Forward-projects the phantom rasterized on a strictly finer simulation
/// grid than the reconstruction grid, then adds i.i.d. Gaussian noise.
/// The grid guard keeps simulated data off the reconstruction
/// discretization (inverse crime).
pub fn simulate_measurements<R: Rng>(
    phantom: &EllipsePhantom,
    geom: &Geometry,
    sim_grid: &VoxelGrid,
    recon_grid: &VoxelGrid,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Sinogram> {
    if sim_grid.ndim() != recon_grid.ndim() {
        return arg_err("sim/recon grid dimensionality mismatch");
    }
    for ax in 0..sim_grid.ndim() {
        if sim_grid.dims[ax] < 2 * recon_grid.dims[ax] {
            return arg_err(format!(
                "inverse-crime guard: sim grid must be >= 2x finer per axis \
                 (axis {}: {} vs {})",
                ax, sim_grid.dims[ax], recon_grid.dims[ax]
            ));
        }
    }
    if !(noise_sigma >= 0.0) {
        return arg_err("noise_sigma must be >= 0");
    }
    let fine = rasterize(phantom, sim_grid, 1)?;
    let mut sino = forward_project(&fine, geom)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).unwrap();
        for v in sino.values.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(sino)
}

/// The standard 10-ellipse Shepp-Logan head phantom, scaled to a 100 mm
/// field radius with attenuation values in [0, 0.022] mm^-1.
pub fn shepp_logan_2d() -> EllipsePhantom {
    // (value, a, b, x0, y0, phi_degrees) in the canonical unit disk
    const DEFS: [(f64, f64, f64, f64, f64, f64); 10] = [
        (2.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        (-0.98, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
        (-0.02, 0.1100, 0.3100, 0.22, 0.0, -18.0),
        (-0.02, 0.1600, 0.4100, -0.22, 0.0, 18.0),
        (0.01, 0.2100, 0.2500, 0.0, 0.35, 0.0),
        (0.01, 0.0460, 0.0460, 0.0, 0.1, 0.0),
        (0.01, 0.0460, 0.0460, 0.0, -0.1, 0.0),
        (0.01, 0.0460, 0.0230, -0.08, -0.605, 0.0),
        (0.01, 0.0230, 0.0230, 0.0, -0.606, 0.0),
        (0.01, 0.0230, 0.0460, 0.06, -0.605, 0.0),
    ];
    const FIELD_MM: f64 = 100.0;
    // the skull ring peaks at cumulative value 2.0
    const VALUE_SCALE: f64 = 0.022 / 2.0;
    EllipsePhantom {
        components: DEFS
            .iter()
            .map(|&(v, a, b, x0, y0, deg)| EllipseComponent {
                center: vec![x0 * FIELD_MM, y0 * FIELD_MM],
                semi_axes: vec![a * FIELD_MM, b * FIELD_MM],
                rotation: deg.to_radians(),
                value: v * VALUE_SCALE,
            })
            .collect(),
    }
}

/// Fixed nested-ellipsoid phantom for 3D smoke tests, values in
/// [0, 0.022] mm^-1, 100 mm field radius.
pub fn ellipsoid_phantom_3d() -> EllipsePhantom {
    let c = |center: [f64; 3], axes: [f64; 3], rot: f64, value: f64| EllipseComponent {
        center: center.to_vec(),
        semi_axes: axes.to_vec(),
        rotation: rot,
        value,
    };
    EllipsePhantom {
        components: vec![
            c([0.0, 0.0, 0.0], [72.0, 88.0, 80.0], 0.0, 0.020),
            c([0.0, -2.0, 0.0], [64.0, 80.0, 72.0], 0.0, -0.010),
            c([22.0, 0.0, 10.0], [12.0, 28.0, 20.0], -0.3, 0.006),
            c([-22.0, 0.0, -10.0], [16.0, 36.0, 24.0], 0.3, 0.006),
            c([0.0, 30.0, 0.0], [18.0, 20.0, 16.0], 0.0, -0.004),
            c([0.0, -55.0, 12.0], [6.0, 6.0, 6.0], 0.0, 0.008),
        ],
    }
}
