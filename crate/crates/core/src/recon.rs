//! Training loop (Adam over theta), the CGLS pixel-space baseline, image
//! metrics and the experiment configuration.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Error, Result};
use crate::gradient::{
    exact_gradient_ctx, memory_proxy, stochastic_gradient_ctx, GradContext,
};
use crate::grid::{
    make_fov_mask, ConeBeamGeometry, FanBeamGeometry, FovMask, Geometry, MaskShape, VoxelGrid,
};
use crate::inr::{flatten_params, init_model, unflatten_params, Arch, InrConfig, InrModel};
use crate::objective::LossKind;
use crate::phantom::{
    ellipsoid_phantom_3d, rasterize, shepp_logan_2d, simulate_measurements, EllipsePhantom,
};
use crate::projector::{back_project, forward_project, ImageVec, RampFilter, Sinogram};

/// Bias-corrected Adam state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One standard Adam update, in place.
pub fn adam_step(state: &mut AdamState, theta: &mut [f64], grad: &[f64]) -> Result<()> {
    if theta.len() != state.m.len() || grad.len() != state.m.len() {
        return arg_err("adam: parameter/gradient length mismatch");
    }
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        theta[i] -= state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// CGLS on min_x ||P x - y||^2 from a zero start. Stops early if the
/// residual norm stalls (round-off floor).
pub fn cgls(geom: &Geometry, grid: &VoxelGrid, y: &Sinogram, iterations: usize) -> Result<ImageVec> {
    Ok(cgls_with_history(geom, grid, y, iterations)?.0)
}

/// CGLS returning the per-iteration residual norms ||P x_k - y|| (index 0 is
/// the initial residual).
pub fn cgls_with_history(
    geom: &Geometry,
    grid: &VoxelGrid,
    y: &Sinogram,
    iterations: usize,
) -> Result<(ImageVec, Vec<f64>)> {
    if iterations < 1 {
        return arg_err("cgls needs iterations >= 1");
    }
    let mut x = ImageVec::zeros(grid);
    let mut r = y.clone(); // r = y - P x, starts at y
    let mut s = back_project(&r, grid)?; // s = P^T r
    let mut p = s.clone();
    let mut gamma: f64 = s.values.iter().map(|v| v * v).sum();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut history = vec![norm(&r.values)];
    if gamma == 0.0 {
        return Ok((x, history));
    }
    for _ in 0..iterations {
        let q = forward_project(&p, geom)?;
        let qq: f64 = q.values.iter().map(|v| v * v).sum();
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        for i in 0..x.values.len() {
            x.values[i] += alpha * p.values[i];
        }
        for i in 0..r.values.len() {
            r.values[i] -= alpha * q.values[i];
        }
        let rn = norm(&r.values);
        // nonincreasing up to round-off; a stall means we hit the floor
        if rn > history.last().unwrap() * (1.0 + 1e-10) {
            break;
        }
        history.push(rn);
        s = back_project(&r, grid)?;
        let gamma_new: f64 = s.values.iter().map(|v| v * v).sum();
        if gamma_new == 0.0 {
            break;
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        for i in 0..p.values.len() {
            p.values[i] = s.values[i] + beta * p.values[i];
        }
    }
    Ok((x, history))
}

/// Mean squared error over inside-mask voxels.
pub fn image_mse(recon: &ImageVec, truth: &ImageVec, mask: &FovMask) -> Result<f64> {
    if recon.grid != truth.grid || recon.grid != mask.grid {
        return arg_err("image_mse: grid mismatch");
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..recon.values.len() {
        if mask.inside[i] {
            let e = recon.values[i] - truth.values[i];
            acc += e * e;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Stochastic,
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhantomSpec {
    SheppLogan,
    Ellipsoid3d,
    File(std::path::PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTag {
    Ls,
    Fls,
}

/// Full experiment description; normally parsed from the line-oriented
/// `key = value` config file (see the `config` module).
#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub grid_dims: Vec<usize>,
    /// Physical edge length of the grid per axis, mm.
    pub extent: Vec<f64>,
    pub num_views: usize,
    pub source_to_iso: f64,
    pub source_to_detector: f64,
    pub num_det: usize,
    pub det_spacing: f64,
    /// 3D only.
    pub num_det_rows: usize,
    pub det_row_spacing: f64,
    pub phantom: PhantomSpec,
    /// Simulation grid refinement per axis (inverse-crime avoidance).
    pub sim_factor: usize,
    pub noise_sigma: f64,
    pub mask_shape: MaskShape,
    pub arch: Arch,
    pub inr: InrConfig,
    pub loss: LossTag,
    pub estimator: Estimator,
    pub batch_fraction: f64,
    pub iterations: usize,
    /// None = per-architecture default (1e-3 for FFN/hash, 1e-4 for SIREN).
    pub learning_rate: Option<f64>,
    pub seed: u64,
    pub metrics_every: usize,
    /// 0 = off; otherwise the number of round-robin view subsets.
    pub ordered_subsets: usize,
    pub out_dir: Option<std::path::PathBuf>,
}

impl ReconConfig {
    /// Desk-scale 2D defaults; experiments override fields as needed.
    pub fn default_2d() -> Self {
        Self {
            grid_dims: vec![128, 128],
            extent: vec![220.0, 220.0],
            num_views: 60,
            source_to_iso: 400.0,
            source_to_detector: 800.0,
            num_det: 192,
            det_spacing: 2.8,
            num_det_rows: 0,
            det_row_spacing: 0.0,
            phantom: PhantomSpec::SheppLogan,
            sim_factor: 4,
            noise_sigma: 0.0,
            mask_shape: MaskShape::Inscribed,
            arch: Arch::Ffn,
            inr: InrConfig {
                hidden_width: 64,
                hidden_layers: 2,
                fourier_features: 64,
                fourier_sigma: 5.0,
                ..InrConfig::default()
            },
            loss: LossTag::Fls,
            estimator: Estimator::Stochastic,
            batch_fraction: 1.0 / 16.0,
            iterations: 2000,
            learning_rate: None,
            seed: 0,
            metrics_every: 10,
            ordered_subsets: 0,
            out_dir: None,
        }
    }

    pub fn ndim(&self) -> usize {
        self.grid_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ndim() != 2 && self.ndim() != 3 {
            return Err(Error::Config("grid must be 2D or 3D".into()));
        }
        if self.ndim() != self.extent.len() {
            return Err(Error::Config("grid/extent length mismatch".into()));
        }
        if self.ndim() == 3 && self.num_det_rows == 0 {
            return Err(Error::Config("3D runs need det_rows > 0".into()));
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            return Err(Error::Config("batch_fraction must be in (0, 1]".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.metrics_every < 1 {
            return Err(Error::Config("metrics_every must be >= 1".into()));
        }
        if self.sim_factor < 2 {
            return Err(Error::Config("sim_factor must be >= 2 (inverse crime)".into()));
        }
        Ok(())
    }

    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.arch {
            Arch::Siren => 1e-4,
            Arch::Ffn | Arch::HashEnc => 1e-3,
        })
    }

    pub fn grid(&self) -> Result<VoxelGrid> {
        let spacing: Vec<f64> = self
            .extent
            .iter()
            .zip(&self.grid_dims)
            .map(|(&e, &d)| e / d as f64)
            .collect();
        VoxelGrid::centered(&self.grid_dims, &spacing)
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let fan = FanBeamGeometry::circular(
            self.num_views,
            self.source_to_iso,
            self.source_to_detector,
            self.num_det,
            self.det_spacing,
        )?;
        if self.ndim() == 2 {
            Ok(Geometry::Fan(fan))
        } else {
            Ok(Geometry::Cone(ConeBeamGeometry::new(
                fan,
                self.num_det_rows,
                self.det_row_spacing,
            )?))
        }
    }

    pub fn loss_kind(&self) -> Result<LossKind> {
        match self.loss {
            LossTag::Ls => Ok(LossKind::Ls),
            LossTag::Fls => Ok(LossKind::Fls(RampFilter::new(self.num_det, self.det_spacing)?)),
        }
    }

    pub fn load_phantom(&self) -> Result<EllipsePhantom> {
        match &self.phantom {
            PhantomSpec::SheppLogan => Ok(shepp_logan_2d()),
            PhantomSpec::Ellipsoid3d => Ok(ellipsoid_phantom_3d()),
            PhantomSpec::File(path) => crate::io::read_phantom_file(path),
        }
    }
}

/// The simulated measurement problem a run reconstructs.
pub struct Problem {
    pub grid: VoxelGrid,
    pub geom: Geometry,
    pub mask: FovMask,
    pub y: Sinogram,
    /// Fine-grid rasterization block-averaged to the recon grid.
    pub truth: ImageVec,
}

/// Simulates measurements on the refined grid and produces the matching
/// ground truth on the reconstruction grid.
pub fn build_problem(cfg: &ReconConfig) -> Result<Problem> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let geom = cfg.geometry()?;
    let mask = make_fov_mask(&grid, cfg.mask_shape);
    let phantom = cfg.load_phantom()?;
    let sim_dims: Vec<usize> = grid.dims.iter().map(|&d| d * cfg.sim_factor).collect();
    let sim_spacing: Vec<f64> = grid
        .spacing
        .iter()
        .map(|&s| s / cfg.sim_factor as f64)
        .collect();
    let sim_grid = VoxelGrid::centered(&sim_dims, &sim_spacing)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let y = simulate_measurements(&phantom, &geom, &sim_grid, &grid, cfg.noise_sigma, &mut noise_rng)?;
    let fine = rasterize(&phantom, &sim_grid, 1)?;
    let truth = block_average(&fine, &grid, cfg.sim_factor);
    Ok(Problem { grid, geom, mask, y, truth })
}

/// Averages factor^d blocks of the fine image down to the coarse grid.
pub fn block_average(fine: &ImageVec, coarse_grid: &VoxelGrid, factor: usize) -> ImageVec {
    let d = coarse_grid.ndim();
    let mut out = ImageVec::zeros(coarse_grid);
    let (nx, ny) = (coarse_grid.dims[0], coarse_grid.dims[1]);
    let nz = if d == 3 { coarse_grid.dims[2] } else { 1 };
    let (fx, fy) = (fine.grid.dims[0], fine.grid.dims[1]);
    let inv = 1.0 / (factor.pow(d as u32)) as f64;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for bz in 0..if d == 3 { factor } else { 1 } {
                    let zf = z * factor + bz;
                    for by in 0..factor {
                        let yf = y * factor + by;
                        for bx in 0..factor {
                            let xf = x * factor + bx;
                            acc += fine.values[xf + fx * (yf + fy * zf)];
                        }
                    }
                }
                out.values[x + nx * (y + ny * z)] = acc * inv;
            }
        }
    }
    out
}

/// One logged row of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss: f64,
    pub image_mse: f64,
    pub wall_time_s: f64,
    pub memory_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,image_mse,wall_time_s,memory_ratio\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.6},{}\n",
                r.iteration, r.loss, r.image_mse, r.wall_time_s, r.memory_ratio
            ));
        }
        out
    }
}

pub struct TrainOutput {
    pub model: InrModel,
    pub metrics: MetricsLog,
    pub image: ImageVec,
    pub problem: Problem,
}

/// Fits the configured INR to the simulated measurements with Adam, logging
/// metrics at the configured cadence.
pub fn train_inr(cfg: &ReconConfig) -> Result<TrainOutput> {
    let problem = build_problem(cfg)?;
    train_inr_on(cfg, problem)
}

/// Attenuation values in mm^-1 are tiny relative to an O(1)-initialized
/// network, which stalls Adam near the origin. Training therefore fits the
/// measurements divided by this scale (max |y| over the mean grid extent,
/// putting the effective image values at O(1)) and the scale is folded back
/// into the linear output layer afterwards, which is exact.
fn measurement_scale(y: &Sinogram, grid: &VoxelGrid) -> f64 {
    let ymax = y.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if ymax == 0.0 {
        return 1.0;
    }
    let mean_extent: f64 = grid
        .dims
        .iter()
        .zip(&grid.spacing)
        .map(|(&d, &s)| d as f64 * s)
        .sum::<f64>()
        / grid.ndim() as f64;
    ymax / mean_extent
}

/// Training loop against an already-built problem (lets experiment arms
/// share identical measurements).
pub fn train_inr_on(cfg: &ReconConfig, problem: Problem) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(cfg.arch, problem.grid.ndim(), &cfg.inr, &mut init_rng)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(2);
    let kind = cfg.loss_kind()?;
    let ctx = GradContext::new(&problem.mask);
    let scale = measurement_scale(&problem.y, &problem.grid);
    let mut y_scaled = problem.y.clone();
    for v in y_scaled.values.iter_mut() {
        *v /= scale;
    }
    let n = problem.mask.n;
    let batch_size = ((cfg.batch_fraction * n as f64).round() as usize).clamp(1, n);
    let memory_ratio = memory_proxy(&model, &problem.mask, batch_size)?.ratio;
    let mut theta = flatten_params(&model);
    let lr0 = cfg.effective_learning_rate();
    let mut adam = AdamState::new(theta.len(), lr0);
    let mut metrics = MetricsLog::default();
    let start = Instant::now();
    let subsets = view_subsets(cfg.ordered_subsets, problem.geom.num_views());
    for iter in 1..=cfg.iterations {
        let views = subsets
            .as_ref()
            .map(|sets| sets[(iter - 1) % sets.len()].as_slice());
        let (grad, loss) = match cfg.estimator {
            Estimator::Exact => {
                exact_gradient_ctx(&ctx, &model, &problem.geom, &y_scaled, &kind, views)?
            }
            Estimator::Stochastic => {
                let (est, loss) = stochastic_gradient_ctx(
                    &ctx,
                    &model,
                    &problem.geom,
                    &y_scaled,
                    &kind,
                    batch_size,
                    &mut batch_rng,
                    views,
                )?;
                (est.grad, loss)
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss became non-finite at iteration {iter}; \
                 reduce the learning rate"
            )));
        }
        if iter == 1 || iter % cfg.metrics_every == 0 || iter == cfg.iterations {
            let mut recon = ctx.evaluate_image(&model);
            for v in recon.values.iter_mut() {
                *v *= scale;
            }
            let mse = image_mse(&recon, &problem.truth, &problem.mask)?;
            metrics.rows.push(MetricsRow {
                iteration: iter,
                loss,
                image_mse: mse,
                wall_time_s: start.elapsed().as_secs_f64(),
                memory_ratio,
            });
        }
        // Cosine decay to zero; without it the final iterations keep
        // injecting data-mismatch noise into the image and the MSE drifts
        // back up after its dip.
        let t = (iter - 1) as f64 / cfg.iterations.max(2) as f64;
        adam.learning_rate = lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        adam_step(&mut adam, &mut theta, &grad)?;
        unflatten_params(&mut model, &theta)?;
    }
    // fold the scale into the linear output layer: f_true = scale * f_fit
    let last = model.mlp.num_layers() - 1;
    for w in model.mlp.weights[last].iter_mut() {
        *w *= scale;
    }
    for b in model.mlp.biases[last].iter_mut() {
        *b *= scale;
    }
    let image = ctx.evaluate_image(&model);
    Ok(TrainOutput { model, metrics, image, problem })
}

/// Round-robin partition of views into k subsets (None when k = 0).
fn view_subsets(k: usize, num_views: usize) -> Option<Vec<Vec<usize>>> {
    if k == 0 {
        return None;
    }
    let k = k.min(num_views);
    let mut sets = vec![Vec::new(); k];
    for v in 0..num_views {
        sets[v % k].push(v);
    }
    Some(sets)
}
