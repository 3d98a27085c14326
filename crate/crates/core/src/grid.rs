//! Image/volume grids, acquisition geometries, the field-of-view mask and
//! coordinate subset sampling.

use rand::Rng;

use crate::error::{arg_err, Result};

/// Axis-aligned regular grid of voxel centers. 2D or 3D depending on the
/// number of axes. The physical center of the grid is the rotation isocenter.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    /// Voxels per axis, `[nx, ny]` or `[nx, ny, nz]`.
    pub dims: Vec<usize>,
    /// Voxel pitch in mm per axis.
    pub spacing: Vec<f64>,
    /// mm coordinates of the center of voxel (0, .., 0).
    pub origin: Vec<f64>,
}

impl VoxelGrid {
    /// Grid centered on the isocenter.
    pub fn centered(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if dims.len() != 2 && dims.len() != 3 {
            return arg_err("grid must have 2 or 3 axes");
        }
        if dims.len() != spacing.len() {
            return arg_err("dims/spacing length mismatch");
        }
        if dims.iter().any(|&d| d < 1) {
            return arg_err("dims must be >= 1 per axis");
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return arg_err("spacing must be > 0 per axis");
        }
        let origin = dims
            .iter()
            .zip(spacing)
            .map(|(&d, &s)| -0.5 * (d as f64 - 1.0) * s)
            .collect();
        Ok(Self { dims: dims.to_vec(), spacing: spacing.to_vec(), origin })
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Physical center of the grid (the isocenter for `centered` grids).
    pub fn center(&self) -> Vec<f64> {
        self.origin
            .iter()
            .zip(&self.dims)
            .zip(&self.spacing)
            .map(|((&o, &d), &s)| o + 0.5 * (d as f64 - 1.0) * s)
            .collect()
    }

    /// Half of the physical extent per axis (edge to edge).
    pub fn half_extent(&self) -> Vec<f64> {
        self.dims
            .iter()
            .zip(&self.spacing)
            .map(|(&d, &s)| 0.5 * d as f64 * s)
            .collect()
    }

    /// mm position of a voxel center given per-axis indices.
    pub fn voxel_center(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .zip(&self.origin)
            .zip(&self.spacing)
            .map(|((&i, &o), &s)| o + i as f64 * s)
            .collect()
    }

    /// Linear index with x fastest: `i = x + nx*(y + ny*z)`.
    pub fn linear_index(&self, idx: &[usize]) -> usize {
        let mut lin = 0;
        for ax in (0..self.dims.len()).rev() {
            lin = lin * self.dims[ax] + idx[ax];
        }
        lin
    }
}

/// Fan-beam geometry with a flat, centered detector. Angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct FanBeamGeometry {
    pub angles: Vec<f64>,
    pub source_to_iso: f64,
    pub source_to_detector: f64,
    pub num_det: usize,
    pub det_spacing: f64,
}

impl FanBeamGeometry {
    /// Equi-spaced views along a full 360 degree arc.
    pub fn circular(
        num_views: usize,
        source_to_iso: f64,
        source_to_detector: f64,
        num_det: usize,
        det_spacing: f64,
    ) -> Result<Self> {
        let angles = (0..num_views)
            .map(|i| 2.0 * std::f64::consts::PI * i as f64 / num_views as f64)
            .collect();
        Self::new(angles, source_to_iso, source_to_detector, num_det, det_spacing)
    }

    pub fn new(
        angles: Vec<f64>,
        source_to_iso: f64,
        source_to_detector: f64,
        num_det: usize,
        det_spacing: f64,
    ) -> Result<Self> {
        if !(source_to_detector > source_to_iso && source_to_iso > 0.0) {
            return arg_err("require source_to_detector > source_to_iso > 0");
        }
        if angles.is_empty() || num_det == 0 {
            return arg_err("require num_views, num_det > 0");
        }
        if !(det_spacing > 0.0) {
            return arg_err("det_spacing must be > 0");
        }
        Ok(Self { angles, source_to_iso, source_to_detector, num_det, det_spacing })
    }

    pub fn num_views(&self) -> usize {
        self.angles.len()
    }

    /// Total ray count m.
    pub fn num_rays(&self) -> usize {
        self.angles.len() * self.num_det
    }

    /// Source position for view `v` (in the z=0 plane for 3D).
    pub fn source_pos(&self, v: usize) -> [f64; 2] {
        let b = self.angles[v];
        [self.source_to_iso * b.cos(), self.source_to_iso * b.sin()]
    }

    /// Detector cell center for view `v`, channel `j`.
    pub fn det_pos(&self, v: usize, j: usize) -> [f64; 2] {
        let b = self.angles[v];
        let (sb, cb) = (b.sin(), b.cos());
        // detector plane on the far side of the isocenter, axis perpendicular
        // to the central ray
        let ddi = self.source_to_detector - self.source_to_iso;
        let s = (j as f64 - 0.5 * (self.num_det as f64 - 1.0)) * self.det_spacing;
        [-ddi * cb - s * sb, -ddi * sb + s * cb]
    }

    /// Signed detector coordinate of channel `j` (mm, centered).
    pub fn det_coord(&self, j: usize) -> f64 {
        (j as f64 - 0.5 * (self.num_det as f64 - 1.0)) * self.det_spacing
    }
}

/// Cone-beam geometry: circular source trajectory in the central plane,
/// flat detector with rows stacked along z.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeBeamGeometry {
    pub fan: FanBeamGeometry,
    pub num_det_rows: usize,
    pub det_row_spacing: f64,
}

impl ConeBeamGeometry {
    pub fn new(fan: FanBeamGeometry, num_det_rows: usize, det_row_spacing: f64) -> Result<Self> {
        if num_det_rows == 0 || !(det_row_spacing > 0.0) {
            return arg_err("require num_det_rows > 0 and det_row_spacing > 0");
        }
        Ok(Self { fan, num_det_rows, det_row_spacing })
    }

    pub fn num_views(&self) -> usize {
        self.fan.num_views()
    }

    pub fn num_rays(&self) -> usize {
        self.fan.num_rays() * self.num_det_rows
    }

    /// Signed row coordinate of row `k` (mm, centered).
    pub fn row_coord(&self, k: usize) -> f64 {
        (k as f64 - 0.5 * (self.num_det_rows as f64 - 1.0)) * self.det_row_spacing
    }
}

/// Either acquisition geometry; projection operators accept both.
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Fan(FanBeamGeometry),
    Cone(ConeBeamGeometry),
}

impl Geometry {
    pub fn num_rays(&self) -> usize {
        match self {
            Geometry::Fan(g) => g.num_rays(),
            Geometry::Cone(g) => g.num_rays(),
        }
    }

    pub fn num_views(&self) -> usize {
        match self {
            Geometry::Fan(g) => g.num_views(),
            Geometry::Cone(g) => g.num_views(),
        }
    }

    pub fn ndim(&self) -> usize {
        match self {
            Geometry::Fan(_) => 2,
            Geometry::Cone(_) => 3,
        }
    }

    /// Rays per view (detector cells).
    pub fn rays_per_view(&self) -> usize {
        match self {
            Geometry::Fan(g) => g.num_det,
            Geometry::Cone(g) => g.fan.num_det * g.num_det_rows,
        }
    }
}

/// Affine map between mm coordinates and the INR input cube [-1,1]^d.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordNorm {
    pub center: Vec<f64>,
    pub half_extent: Vec<f64>,
}

impl CoordNorm {
    pub fn normalize(&self, mm: &[f64], out: &mut [f64]) {
        for i in 0..mm.len() {
            out[i] = (mm[i] - self.center[i]) / self.half_extent[i];
        }
    }

    pub fn denormalize(&self, cube: &[f64], out: &mut [f64]) {
        for i in 0..cube.len() {
            out[i] = self.center[i] + cube[i] * self.half_extent[i];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskShape {
    /// Largest inscribed circle (2D) / cylinder (3D).
    Inscribed,
    /// All voxels.
    Full,
}

/// Field-of-view mask: the subset of voxels fed to the INR. Owns n and the
/// mm -> [-1,1]^d normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FovMask {
    pub grid: VoxelGrid,
    pub inside: Vec<bool>,
    pub n: usize,
    pub coord_norm: CoordNorm,
}

/// Distinct INR evaluation indices I within [0, n).
#[derive(Debug, Clone, PartialEq)]
pub struct IndexBatch {
    pub indices: Vec<usize>,
    pub n_total: usize,
}

pub fn make_fov_mask(grid: &VoxelGrid, shape: MaskShape) -> FovMask {
    let center = grid.center();
    let coord_norm = CoordNorm { center: center.clone(), half_extent: grid.half_extent() };
    let total = grid.num_voxels();
    let mut inside = vec![true; total];
    let mut n = total;
    if shape == MaskShape::Inscribed {
        // circle in the x-y plane; z (if present) unconstrained
        let r = grid.half_extent()[..2].iter().cloned().fold(f64::INFINITY, f64::min);
        let r2 = r * r;
        n = 0;
        let nx = grid.dims[0];
        let ny = grid.dims[1];
        let nz = if grid.ndim() == 3 { grid.dims[2] } else { 1 };
        let mut lin = 0;
        for _z in 0..nz {
            for y in 0..ny {
                let dy = grid.origin[1] + y as f64 * grid.spacing[1] - center[1];
                for x in 0..nx {
                    let dx = grid.origin[0] + x as f64 * grid.spacing[0] - center[0];
                    let inc = dx * dx + dy * dy <= r2;
                    inside[lin] = inc;
                    n += inc as usize;
                    lin += 1;
                }
            }
        }
    }
    FovMask { grid: grid.clone(), inside, n, coord_norm }
}

/// Normalized coordinates of inside voxels, x fastest, in [-1,1]^d.
/// Returned flat: coordinate i occupies `[i*d, (i+1)*d)`.
pub fn mask_coordinates(mask: &FovMask) -> Vec<f64> {
    let d = mask.grid.ndim();
    let mut out = Vec::with_capacity(mask.n * d);
    let nx = mask.grid.dims[0];
    let ny = mask.grid.dims[1];
    let nz = if d == 3 { mask.grid.dims[2] } else { 1 };
    let mut mm = vec![0.0; d];
    let mut cube = vec![0.0; d];
    let mut lin = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.inside[lin] {
                    mm[0] = mask.grid.origin[0] + x as f64 * mask.grid.spacing[0];
                    mm[1] = mask.grid.origin[1] + y as f64 * mask.grid.spacing[1];
                    if d == 3 {
                        mm[2] = mask.grid.origin[2] + z as f64 * mask.grid.spacing[2];
                    }
                    mask.coord_norm.normalize(&mm, &mut cube);
                    out.extend_from_slice(&cube);
                }
                lin += 1;
            }
        }
    }
    out
}

/// Linear grid indices of inside voxels, in the same order as
/// `mask_coordinates`.
pub fn mask_linear_indices(mask: &FovMask) -> Vec<usize> {
    (0..mask.grid.num_voxels()).filter(|&i| mask.inside[i]).collect()
}

/// Uniform sample of `batch_size` distinct indices from [0, mask.n).
pub fn sample_index_batch<R: Rng>(
    mask: &FovMask,
    batch_size: usize,
    rng: &mut R,
) -> Result<IndexBatch> {
    if batch_size < 1 || batch_size > mask.n {
        return arg_err(format!(
            "batch_size {} out of range [1, {}]",
            batch_size, mask.n
        ));
    }
    let indices = rand::seq::index::sample(rng, mask.n, batch_size).into_vec();
    Ok(IndexBatch { indices, n_total: mask.n })
}
