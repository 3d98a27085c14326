//! Parameter-gradient computation: the subsampled stochastic estimator, the
//! analytically exact full gradient it approximates, and the tracked-values
//! memory proxy.
//!
//! Both routes share the same decomposition: predict z = P E{f_theta}, form
//! the residual gradient dL/dz, backproject to per-coordinate weights
//! v = P^T dL/dz, then reduce weighted per-coordinate network gradients.
//! The projector passes are plain numeric code with no differentiation
//! hooks; gradient machinery only ever touches the INR on the chosen
//! coordinate batch.

use rand::Rng;

use crate::error::{arg_err, Result};
use crate::grid::{mask_coordinates, mask_linear_indices, sample_index_batch, FovMask, Geometry, IndexBatch};
use crate::inr::{self, GradAccumulator, InrModel};
use crate::objective::{loss_value, residual_grad, LossKind};
use crate::projector::{back_project_into, forward_project_into, ImageVec, Sinogram};

/// Output of the stochastic estimator: the flat gradient, the index batch
/// it was computed from and the importance scale n/|I|.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub grad: Vec<f64>,
    pub batch: IndexBatch,
    pub scale: f64,
}

/// Tracked-value counts standing in for peak differentiation memory:
/// end-to-end reverse mode retains every INR intermediate for all n masked
/// coordinates, the estimator only for the minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryProxyReport {
    pub tracked_values_exact: usize,
    pub tracked_values_stochastic: usize,
    pub ratio: f64,
}

/// Caches the mask coordinate list and voxel indices across gradient calls.
pub struct GradContext {
    pub mask: FovMask,
    /// Flat normalized coordinates, n * d.
    pub coords: Vec<f64>,
    /// Linear grid index of each masked coordinate.
    pub lin_idx: Vec<usize>,
}

impl GradContext {
    pub fn new(mask: &FovMask) -> Self {
        Self {
            mask: mask.clone(),
            coords: mask_coordinates(mask),
            lin_idx: mask_linear_indices(mask),
        }
    }

    fn check_geom(&self, geom: &Geometry) -> Result<()> {
        if geom.ndim() != self.mask.grid.ndim() {
            return arg_err("geometry/grid dimensionality mismatch");
        }
        Ok(())
    }

    /// E{f_theta} embedded into the full grid (zeros outside the mask).
    pub fn evaluate_image(&self, model: &InrModel) -> ImageVec {
        let mut img = ImageVec::zeros(&self.mask.grid);
        let mut ws = model.workspace();
        for (x, &lin) in self.coords.chunks_exact(model.d).zip(&self.lin_idx) {
            img.values[lin] = model.eval_one(x, &mut ws);
        }
        img
    }

    /// z = P E{f_theta}, restricted to `views` when given.
    pub fn predict(
        &self,
        model: &InrModel,
        geom: &Geometry,
        views: Option<&[usize]>,
    ) -> Result<Sinogram> {
        self.check_geom(geom)?;
        let img = self.evaluate_image(model);
        let mut sino = Sinogram::zeros(geom);
        forward_project_into(&img, geom, views, &mut sino.values);
        Ok(sino)
    }

    /// v = P^T dL/dz at the masked coordinates, plus the loss value.
    /// The residual is restricted to the selected views.
    pub fn backprojected_weights(
        &self,
        z: &Sinogram,
        y: &Sinogram,
        kind: &LossKind,
        views: Option<&[usize]>,
    ) -> Result<(Vec<f64>, f64)> {
        let (z_sel, y_sel) = match views {
            None => (z.clone(), y.clone()),
            Some(sel) => {
                // zero out unselected rays of both so the restricted loss
                // only sees the chosen views
                let rpv = z.geometry.rays_per_view();
                let mut zs = Sinogram::zeros(&z.geometry);
                let mut ys = Sinogram::zeros(&y.geometry);
                for &v in sel {
                    let r = v * rpv..(v + 1) * rpv;
                    zs.values[r.clone()].copy_from_slice(&z.values[r.clone()]);
                    ys.values[r.clone()].copy_from_slice(&y.values[r]);
                }
                (zs, ys)
            }
        };
        let loss = loss_value(&z_sel, &y_sel, kind)?;
        let r = residual_grad(&z_sel, &y_sel, kind)?;
        let mut img = ImageVec::zeros(&self.mask.grid);
        back_project_into(&r, views, &mut img);
        let v = self.lin_idx.iter().map(|&i| img.values[i]).collect();
        Ok((v, loss))
    }

    /// Weighted INR gradient over a subset of masked coordinates, scaled.
    pub fn weighted_grad_subset(
        &self,
        model: &InrModel,
        weights: &[f64],
        indices: &[usize],
        scale: f64,
    ) -> Vec<f64> {
        let d = model.d;
        let mut acc = GradAccumulator::new(model);
        let mut ws = model.workspace();
        for &i in indices {
            acc.accumulate(model, &self.coords[i * d..(i + 1) * d], scale * weights[i], &mut ws);
        }
        acc.into_flat(model)
    }
}

/// The true gradient of L(theta) = L(P E{f_theta}, y), computed via the
/// chain-rule decomposition over all n masked coordinates. Exact because P
/// is linear, so it doubles as the end-to-end differentiation reference.
pub fn exact_gradient(
    model: &InrModel,
    mask: &FovMask,
    geom: &Geometry,
    y: &Sinogram,
    kind: &LossKind,
) -> Result<Vec<f64>> {
    let ctx = GradContext::new(mask);
    Ok(exact_gradient_ctx(&ctx, model, geom, y, kind, None)?.0)
}

/// Context-reusing variant; also returns the loss value of the forward pass.
pub fn exact_gradient_ctx(
    ctx: &GradContext,
    model: &InrModel,
    geom: &Geometry,
    y: &Sinogram,
    kind: &LossKind,
    views: Option<&[usize]>,
) -> Result<(Vec<f64>, f64)> {
    let z = ctx.predict(model, geom, views)?;
    let (v, loss) = ctx.backprojected_weights(&z, y, kind, views)?;
    let all: Vec<usize> = (0..ctx.mask.n).collect();
    Ok((ctx.weighted_grad_subset(model, &v, &all, 1.0), loss))
}

/// The subsampled estimator: z and v are computed with plain numeric passes,
/// then a random index set I gives (n/|I|) sum_{i in I} v_i grad f_theta(x_i).
pub fn stochastic_gradient<R: Rng>(
    model: &InrModel,
    mask: &FovMask,
    geom: &Geometry,
    y: &Sinogram,
    kind: &LossKind,
    batch_size: usize,
    rng: &mut R,
) -> Result<GradEstimate> {
    let ctx = GradContext::new(mask);
    Ok(stochastic_gradient_ctx(&ctx, model, geom, y, kind, batch_size, rng, None)?.0)
}

/// As [`stochastic_gradient`] but with the loss restricted to a subset of
/// views (ordered-subsets style).
pub fn stochastic_gradient_subset_views<R: Rng>(
    model: &InrModel,
    mask: &FovMask,
    geom: &Geometry,
    y: &Sinogram,
    kind: &LossKind,
    batch_size: usize,
    rng: &mut R,
    view_subset: &[usize],
) -> Result<GradEstimate> {
    if view_subset.is_empty() {
        return arg_err("view subset must be nonempty");
    }
    if view_subset.iter().any(|&v| v >= geom.num_views()) {
        return arg_err("view subset index out of range");
    }
    let ctx = GradContext::new(mask);
    Ok(stochastic_gradient_ctx(&ctx, model, geom, y, kind, batch_size, rng, Some(view_subset))?.0)
}

/// Context-reusing variant; also returns the loss value of the forward pass.
#[allow(clippy::too_many_arguments)]
pub fn stochastic_gradient_ctx<R: Rng>(
    ctx: &GradContext,
    model: &InrModel,
    geom: &Geometry,
    y: &Sinogram,
    kind: &LossKind,
    batch_size: usize,
    rng: &mut R,
    views: Option<&[usize]>,
) -> Result<(GradEstimate, f64)> {
    // steps 1-2: plain numeric passes, no gradient machinery
    let z = ctx.predict(model, geom, views)?;
    let (v, loss) = ctx.backprojected_weights(&z, y, kind, views)?;
    // step 3: uniform index set without replacement
    let mut batch = sample_index_batch(&ctx.mask, batch_size, rng)?;
    // sorted indices fix the summation order, so |I| = n reproduces the
    // exact gradient bitwise
    batch.indices.sort_unstable();
    let scale = batch.n_total as f64 / batch.indices.len() as f64;
    // steps 4-5: gradient of the virtual loss, tracking theta only
    let grad = ctx.weighted_grad_subset(model, &v, &batch.indices, scale);
    Ok((GradEstimate { grad, batch, scale }, loss))
}

/// Counts the values reverse-mode differentiation must retain: per-eval INR
/// intermediates times n for end-to-end tracking, times |I| for the
/// estimator.
pub fn memory_proxy(model: &InrModel, mask: &FovMask, batch_size: usize) -> Result<MemoryProxyReport> {
    if batch_size < 1 || batch_size > mask.n {
        return arg_err("batch_size out of range");
    }
    let per_eval = model.activation_count_per_eval();
    let exact = per_eval * mask.n;
    let stochastic = per_eval * batch_size;
    Ok(MemoryProxyReport {
        tracked_values_exact: exact,
        tracked_values_stochastic: stochastic,
        ratio: exact as f64 / stochastic as f64,
    })
}

/// End-to-end loss L(P E{f_theta}, y) as a function of a flat theta; the
/// finite-difference oracle in the tests drives this.
pub fn loss_at_theta(
    model: &InrModel,
    theta: &[f64],
    ctx: &GradContext,
    geom: &Geometry,
    y: &Sinogram,
    kind: &LossKind,
    views: Option<&[usize]>,
) -> Result<f64> {
    let mut m = model.clone();
    inr::unflatten_params(&mut m, theta)?;
    let z = ctx.predict(&m, geom, views)?;
    let (_, loss) = ctx.backprojected_weights(&z, y, kind, views)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_fov_mask, FanBeamGeometry, MaskShape, VoxelGrid};
    use crate::inr::{flatten_params, init_model, Arch, InrConfig};
    use crate::projector::RampFilter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn tiny_cfg() -> InrConfig {
        InrConfig {
            hidden_width: 8,
            hidden_layers: 2,
            fourier_features: 4,
            fourier_sigma: 2.0,
            ..InrConfig::default()
        }
    }

    /// 8x8 grid, 4 views, 8 detectors, FFN width 8.
    pub fn tiny_problem() -> (InrModel, FovMask, Geometry, Sinogram) {
        let grid = VoxelGrid::centered(&[8, 8], &[1.0, 1.0]).unwrap();
        let mask = make_fov_mask(&grid, MaskShape::Full);
        let geom = Geometry::Fan(FanBeamGeometry::circular(4, 30.0, 60.0, 8, 1.5).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let model = init_model(Arch::Ffn, 2, &tiny_cfg(), &mut rng).unwrap();
        let mut y = Sinogram::zeros(&geom);
        for v in y.values.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        (model, mask, geom, y)
    }

    #[test]
    fn self_consistent_data_gives_zero_gradient() {
        let (model, mask, geom, _) = tiny_problem();
        let ctx = GradContext::new(&mask);
        let y = ctx.predict(&model, &geom, None).unwrap();
        let g = exact_gradient(&model, &mask, &geom, &y, &LossKind::Ls).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_gradient_matches_end_to_end_finite_differences() {
        let (model, mask, geom, y) = tiny_problem();
        let ctx = GradContext::new(&mask);
        let fls = LossKind::Fls(RampFilter::new(8, 1.5).unwrap());
        for kind in [LossKind::Ls, fls] {
            let grad = exact_gradient(&model, &mask, &geom, &y, &kind).unwrap();
            let theta = flatten_params(&model);
            let mut probe = theta.clone();
            let step = 1e-5;
            let mut checked = 0;
            for i in (0..theta.len()).step_by(7) {
                probe[i] = theta[i] + step;
                let up = loss_at_theta(&model, &probe, &ctx, &geom, &y, &kind, None).unwrap();
                probe[i] = theta[i] - step;
                let dn = loss_at_theta(&model, &probe, &ctx, &geom, &y, &kind, None).unwrap();
                probe[i] = theta[i];
                let fd = (up - dn) / (2.0 * step);
                if grad[i].abs() > 1e-8 {
                    let rel = (fd - grad[i]).abs() / grad[i].abs();
                    assert!(rel <= 1e-5, "{} component {i}: {fd} vs {}", kind.name(), grad[i]);
                    checked += 1;
                }
            }
            assert!(checked > 0);
        }
    }

    #[test]
    fn doubling_residual_doubles_ls_gradient() {
        let (model, mask, geom, y) = tiny_problem();
        let ctx = GradContext::new(&mask);
        let z = ctx.predict(&model, &geom, None).unwrap();
        // y -> 2y - z doubles the residual z - y
        let mut y2 = y.clone();
        for i in 0..y2.values.len() {
            y2.values[i] = 2.0 * y.values[i] - z.values[i];
        }
        let g1 = exact_gradient(&model, &mask, &geom, &y, &LossKind::Ls).unwrap();
        let g2 = exact_gradient(&model, &mask, &geom, &y2, &LossKind::Ls).unwrap();
        let scale = g2.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..g1.len() {
            assert!((g2[i] - 2.0 * g1[i]).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn full_batch_equals_exact_bitwise() {
        let (model, mask, geom, y) = tiny_problem();
        let exact = exact_gradient(&model, &mask, &geom, &y, &LossKind::Ls).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est =
            stochastic_gradient(&model, &mask, &geom, &y, &LossKind::Ls, mask.n, &mut rng).unwrap();
        assert_eq!(est.scale, 1.0);
        assert_eq!(est.grad, exact);
    }

    #[test]
    fn zero_residual_gives_zero_estimate() {
        let (model, mask, geom, _) = tiny_problem();
        let ctx = GradContext::new(&mask);
        let y = ctx.predict(&model, &geom, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est =
            stochastic_gradient(&model, &mask, &geom, &y, &LossKind::Ls, 5, &mut rng).unwrap();
        assert!(est.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn estimator_is_unbiased_monte_carlo() {
        let (model, mask, geom, y) = tiny_problem();
        let kind = LossKind::Ls;
        let exact = exact_gradient(&model, &mask, &geom, &y, &kind).unwrap();
        let ctx = GradContext::new(&mask);
        let p = exact.len();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 20_000usize;
        let mut mean = vec![0.0; p];
        let mut m2 = vec![0.0; p];
        for k in 0..draws {
            let est =
                stochastic_gradient_ctx(&ctx, &model, &geom, &y, &kind, mask.n / 4, &mut rng, None)
                    .unwrap().0;
            // Welford update
            for i in 0..p {
                let delta = est.grad[i] - mean[i];
                mean[i] += delta / (k + 1) as f64;
                m2[i] += delta * (est.grad[i] - mean[i]);
            }
        }
        let mut worst: f64 = 0.0;
        for i in 0..p {
            let se = (m2[i] / (draws as f64 - 1.0) / draws as f64).sqrt();
            if se > 0.0 {
                worst = worst.max((mean[i] - exact[i]).abs() / se);
            } else {
                assert!((mean[i] - exact[i]).abs() < 1e-14);
            }
        }
        assert!(worst <= 4.0, "worst deviation {worst} standard errors");
    }

    #[test]
    fn variance_grows_as_batch_shrinks() {
        let (model, mask, geom, y) = tiny_problem();
        let ctx = GradContext::new(&mask);
        let kind = LossKind::Ls;
        let draws = 3000;
        let mut total_vars = Vec::new();
        for div in [2usize, 4, 8] {
            let bs = mask.n / div;
            let mut rng = ChaCha8Rng::seed_from_u64(31 + div as u64);
            let p = flatten_params(&model).len();
            let mut mean = vec![0.0; p];
            let mut m2 = vec![0.0; p];
            for k in 0..draws {
                let est =
                    stochastic_gradient_ctx(&ctx, &model, &geom, &y, &kind, bs, &mut rng, None)
                        .unwrap().0;
                for i in 0..p {
                    let delta = est.grad[i] - mean[i];
                    mean[i] += delta / (k + 1) as f64;
                    m2[i] += delta * (est.grad[i] - mean[i]);
                }
            }
            total_vars.push(m2.iter().sum::<f64>() / (draws as f64 - 1.0));
        }
        assert!(
            total_vars[0] < total_vars[1] && total_vars[1] < total_vars[2],
            "{total_vars:?}"
        );
    }

    #[test]
    fn all_views_subset_equals_plain_estimator() {
        let (model, mask, geom, y) = tiny_problem();
        let kind = LossKind::Ls;
        let all: Vec<usize> = (0..geom.num_views()).collect();
        let a = stochastic_gradient(
            &model, &mask, &geom, &y, &kind, 16, &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = stochastic_gradient_subset_views(
            &model, &mask, &geom, &y, &kind, 16, &mut ChaCha8Rng::seed_from_u64(5), &all,
        )
        .unwrap();
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn disjoint_view_subsets_add_for_ls() {
        let (model, mask, geom, y) = tiny_problem();
        let ctx = GradContext::new(&mask);
        let kind = LossKind::Ls;
        let ga = exact_gradient_ctx(&ctx, &model, &geom, &y, &kind, Some(&[0, 1])).unwrap().0;
        let gb = exact_gradient_ctx(&ctx, &model, &geom, &y, &kind, Some(&[2, 3])).unwrap().0;
        let gall = exact_gradient_ctx(&ctx, &model, &geom, &y, &kind, None).unwrap().0;
        let scale = gall.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..gall.len() {
            assert!((gall[i] - ga[i] - gb[i]).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn single_view_gradient_matches_fd_of_restricted_loss() {
        let (model, mask, geom, y) = tiny_problem();
        let ctx = GradContext::new(&mask);
        let kind = LossKind::Ls;
        let views = [2usize];
        let grad = exact_gradient_ctx(&ctx, &model, &geom, &y, &kind, Some(&views)).unwrap().0;
        let theta = flatten_params(&model);
        let mut probe = theta.clone();
        let step = 1e-5;
        for i in (0..theta.len()).step_by(11) {
            probe[i] = theta[i] + step;
            let up = loss_at_theta(&model, &probe, &ctx, &geom, &y, &kind, Some(&views)).unwrap();
            probe[i] = theta[i] - step;
            let dn = loss_at_theta(&model, &probe, &ctx, &geom, &y, &kind, Some(&views)).unwrap();
            probe[i] = theta[i];
            let fd = (up - dn) / (2.0 * step);
            if grad[i].abs() > 1e-8 {
                assert!((fd - grad[i]).abs() / grad[i].abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn empty_view_subset_rejected() {
        let (model, mask, geom, y) = tiny_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(stochastic_gradient_subset_views(
            &model, &mask, &geom, &y, &LossKind::Ls, 4, &mut rng, &[]
        )
        .is_err());
    }

    #[test]
    fn memory_proxy_ratios() {
        let (model, mask, _, _) = tiny_problem();
        let full = memory_proxy(&model, &mask, mask.n).unwrap();
        assert_eq!(full.ratio, 1.0);
        let sixteenth = memory_proxy(&model, &mask, mask.n / 16).unwrap();
        assert_eq!(sixteenth.ratio, 16.0);
        assert_eq!(
            sixteenth.tracked_values_exact,
            model.activation_count_per_eval() * mask.n
        );
        assert!(memory_proxy(&model, &mask, 0).is_err());
    }

    #[test]
    fn batch_size_out_of_range_rejected() {
        let (model, mask, geom, y) = tiny_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(stochastic_gradient(
            &model, &mask, &geom, &y, &LossKind::Ls, mask.n + 1, &mut rng
        )
        .is_err());
    }
}
