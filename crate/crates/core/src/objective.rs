//! LS and FLS data-fidelity losses and their residual gradients dL/dz.

use crate::error::{arg_err, Result};
use crate::projector::{apply_ramp, RampFilter, Sinogram};

/// Loss selector. FLS preconditions the residual with the FBP ramp filter;
/// its gradient F(z-y) only matches the loss because the filter matrix is
/// symmetric.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    Ls,
    Fls(RampFilter),
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ls => "ls",
            LossKind::Fls(_) => "fls",
        }
    }
}

fn check_match(z: &Sinogram, y: &Sinogram) -> Result<()> {
    if z.geometry != y.geometry {
        return arg_err("prediction/measurement geometry mismatch");
    }
    Ok(())
}

/// LS: 0.5 ||z-y||^2. FLS: 0.5 (z-y)^T F (z-y).
pub fn loss_value(z: &Sinogram, y: &Sinogram, kind: &LossKind) -> Result<f64> {
    check_match(z, y)?;
    let mut r = z.clone();
    for (ri, yi) in r.values.iter_mut().zip(&y.values) {
        *ri -= yi;
    }
    match kind {
        LossKind::Ls => Ok(0.5 * r.values.iter().map(|v| v * v).sum::<f64>()),
        LossKind::Fls(filter) => {
            let fr = apply_ramp(&r, filter)?;
            Ok(0.5 * r.values.iter().zip(&fr.values).map(|(a, b)| a * b).sum::<f64>())
        }
    }
}

/// dL/dz: z-y for LS, F(z-y) for FLS.
pub fn residual_grad(z: &Sinogram, y: &Sinogram, kind: &LossKind) -> Result<Sinogram> {
    check_match(z, y)?;
    let mut r = z.clone();
    for (ri, yi) in r.values.iter_mut().zip(&y.values) {
        *ri -= yi;
    }
    match kind {
        LossKind::Ls => Ok(r),
        LossKind::Fls(filter) => apply_ramp(&r, filter),
    }
}
