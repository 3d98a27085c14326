//! Coordinate-network architectures (FFN, SIREN, hash encoding), forward
//! evaluation and reverse-mode parameter gradients.
//!
//! The reverse pass is hand-written per architecture: networks are small and
//! fixed-topology, and only gradients with respect to theta are ever needed.

pub mod encoding;
pub mod mlp;

use rand::Rng;

use crate::error::{arg_err, Result};
pub use encoding::{FourierEncoding, HashEncoding};
pub use mlp::{Activation, MlpCore, MlpWorkspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Ffn,
    Siren,
    HashEnc,
}

impl std::str::FromStr for Arch {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ffn" => Ok(Arch::Ffn),
            "siren" => Ok(Arch::Siren),
            "hash" => Ok(Arch::HashEnc),
            other => arg_err(format!("unknown architecture '{other}' (ffn|siren|hash)")),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Ffn => "ffn",
            Arch::Siren => "siren",
            Arch::HashEnc => "hash",
        })
    }
}

/// Architecture hyperparameters. The defaults follow common practice for
/// each encoding; everything is overridable from the experiment config.
#[derive(Debug, Clone, PartialEq)]
pub struct InrConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub fourier_features: usize,
    pub fourier_sigma: f64,
    pub omega0: f64,
    pub hash_levels: usize,
    pub hash_table_size: usize,
    pub hash_features: usize,
    pub hash_base_res: usize,
    pub hash_max_res: usize,
    pub head_width: usize,
    pub head_layers: usize,
}

impl Default for InrConfig {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            hidden_layers: 3,
            fourier_features: 256,
            fourier_sigma: 10.0,
            omega0: 30.0,
            hash_levels: 8,
            hash_table_size: 1 << 14,
            hash_features: 2,
            hash_base_res: 16,
            hash_max_res: 512,
            head_width: 64,
            head_layers: 2,
        }
    }
}

/// An INR f_theta: [-1,1]^d -> R. Trainable parameters are the MLP weights
/// and, for the hash variant, the feature tables.
#[derive(Debug, Clone, PartialEq)]
pub struct InrModel {
    pub arch: Arch,
    pub d: usize,
    pub fourier: Option<FourierEncoding>,
    pub hash: Option<HashEncoding>,
    pub mlp: MlpCore,
}

/// Reusable evaluation scratch.
#[derive(Debug, Clone)]
pub struct InrWorkspace {
    encoded: Vec<f64>,
    d_encoded: Vec<f64>,
    mlp: MlpWorkspace,
}

impl InrModel {
    pub fn workspace(&self) -> InrWorkspace {
        let enc_dim = self.mlp.input_dim();
        InrWorkspace {
            encoded: vec![0.0; enc_dim],
            d_encoded: vec![0.0; enc_dim],
            mlp: self.mlp.make_workspace(),
        }
    }

    /// Total trainable parameter count p.
    pub fn param_count(&self) -> usize {
        self.hash.as_ref().map_or(0, |h| h.table_param_count()) + self.mlp.param_count()
    }

    /// Tracked intermediate values per single INR evaluation, as end-to-end
    /// reverse-mode differentiation would retain them.
    pub fn activation_count_per_eval(&self) -> usize {
        self.mlp.input_dim() + self.mlp.activation_count()
    }

    fn encode_into(&self, x: &[f64], ws: &mut InrWorkspace) {
        match (&self.fourier, &self.hash) {
            (Some(f), None) => f.encode(x, &mut ws.encoded),
            (None, Some(h)) => h.encode(x, &mut ws.encoded),
            (None, None) => ws.encoded.copy_from_slice(x),
            _ => unreachable!("model carries at most one encoding"),
        }
    }

    pub fn eval_one(&self, x: &[f64], ws: &mut InrWorkspace) -> f64 {
        self.encode_into(x, ws);
        // split borrow of the workspace fields
        let InrWorkspace { encoded, mlp, .. } = ws;
        self.mlp.forward(encoded, mlp)
    }
}

/// Builds and initializes one of the three architectures.
pub fn init_model(arch: Arch, d: usize, cfg: &InrConfig, rng: &mut impl Rng) -> Result<InrModel> {
    if d != 2 && d != 3 {
        return arg_err("input dimension must be 2 or 3");
    }
    match arch {
        Arch::Ffn => {
            let fourier = FourierEncoding::new(cfg.fourier_features, d, cfg.fourier_sigma, rng)?;
            let mut widths = vec![fourier.output_dim()];
            widths.extend(std::iter::repeat(cfg.hidden_width).take(cfg.hidden_layers));
            widths.push(1);
            let mut acts = vec![Activation::Relu; cfg.hidden_layers];
            acts.push(Activation::None);
            let mut mlp = MlpCore::zeros(widths, acts)?;
            mlp::he_uniform_init(&mut mlp, rng);
            Ok(InrModel { arch, d, fourier: Some(fourier), hash: None, mlp })
        }
        Arch::Siren => {
            let mut widths = vec![d];
            widths.extend(std::iter::repeat(cfg.hidden_width).take(cfg.hidden_layers));
            widths.push(1);
            let mut acts = vec![Activation::Sine(cfg.omega0); cfg.hidden_layers];
            acts.push(Activation::None);
            let mut mlp = MlpCore::zeros(widths, acts)?;
            mlp::siren_init(&mut mlp, cfg.omega0, rng);
            Ok(InrModel { arch, d, fourier: None, hash: None, mlp })
        }
        Arch::HashEnc => {
            let hash = HashEncoding::new(
                cfg.hash_levels,
                cfg.hash_table_size,
                cfg.hash_features,
                cfg.hash_base_res,
                cfg.hash_max_res,
                d,
                rng,
            )?;
            let mut widths = vec![hash.output_dim()];
            widths.extend(std::iter::repeat(cfg.head_width).take(cfg.head_layers));
            widths.push(1);
            let mut acts = vec![Activation::Relu; cfg.head_layers];
            acts.push(Activation::None);
            let mut mlp = MlpCore::zeros(widths, acts)?;
            mlp::he_uniform_init(&mut mlp, rng);
            Ok(InrModel { arch, d, fourier: None, hash: Some(hash), mlp })
        }
    }
}

/// Evaluates the model on a flat batch of d-dim points (length k*d).
pub fn eval(model: &InrModel, coords: &[f64]) -> Result<Vec<f64>> {
    if coords.len() % model.d != 0 {
        return arg_err("coords length is not a multiple of the input dimension");
    }
    let mut ws = model.workspace();
    let out = coords
        .chunks_exact(model.d)
        .map(|x| model.eval_one(x, &mut ws))
        .collect();
    Ok(out)
}

/// Evaluates into a preallocated output buffer using a caller-owned
/// workspace. Hot-path variant of [`eval`].
pub fn eval_into(model: &InrModel, coords: &[f64], ws: &mut InrWorkspace, out: &mut [f64]) {
    for (x, o) in coords.chunks_exact(model.d).zip(out.iter_mut()) {
        *o = model.eval_one(x, ws);
    }
}

/// grad_theta sum_i weights[i] * f_theta(coords[i]), one reverse-mode sweep
/// over the batch. Returns a flat theta-shaped vector (see
/// [`flatten_params`] for the layout).
pub fn weighted_param_grad(model: &InrModel, coords: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if coords.len() != weights.len() * model.d {
        return arg_err("coords/weights length mismatch");
    }
    let mut acc = GradAccumulator::new(model);
    let mut ws = model.workspace();
    for (x, &w) in coords.chunks_exact(model.d).zip(weights) {
        acc.accumulate(model, x, w, &mut ws);
    }
    Ok(acc.into_flat(model))
}

/// Theta-shaped gradient buffer that mirrors the model's parameter layout.
pub struct GradAccumulator {
    grad_tables: Vec<f64>,
    grad_w: Vec<Vec<f64>>,
    grad_b: Vec<Vec<f64>>,
}

impl GradAccumulator {
    pub fn new(model: &InrModel) -> Self {
        Self {
            grad_tables: vec![0.0; model.hash.as_ref().map_or(0, |h| h.table_param_count())],
            grad_w: model.mlp.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            grad_b: model.mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn reset(&mut self) {
        self.grad_tables.fill(0.0);
        for g in self.grad_w.iter_mut().chain(self.grad_b.iter_mut()) {
            g.fill(0.0);
        }
    }

    /// Adds weight * grad_theta f_theta(x).
    pub fn accumulate(&mut self, model: &InrModel, x: &[f64], weight: f64, ws: &mut InrWorkspace) {
        if weight == 0.0 {
            return;
        }
        model.encode_into(x, ws);
        let InrWorkspace { encoded, d_encoded, mlp } = ws;
        model.mlp.forward(encoded, mlp);
        let want_input_grad = model.hash.is_some();
        model.mlp.backward(
            weight,
            mlp,
            &mut self.grad_w,
            &mut self.grad_b,
            want_input_grad.then_some(d_encoded.as_mut_slice()),
        );
        if let Some(h) = &model.hash {
            h.backward_tables(x, d_encoded, &mut self.grad_tables);
        }
    }

    /// Flattens in the canonical theta order.
    pub fn into_flat(self, model: &InrModel) -> Vec<f64> {
        let mut flat = Vec::with_capacity(model.param_count());
        flat.extend_from_slice(&self.grad_tables);
        for l in 0..model.mlp.num_layers() {
            flat.extend_from_slice(&self.grad_w[l]);
            flat.extend_from_slice(&self.grad_b[l]);
        }
        flat
    }

    pub fn write_flat(&self, model: &InrModel, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.grad_tables);
        for l in 0..model.mlp.num_layers() {
            out.extend_from_slice(&self.grad_w[l]);
            out.extend_from_slice(&self.grad_b[l]);
        }
    }
}

/// Flattens theta: hash tables first (level-major), then per layer the
/// weight matrix (row-major) followed by the bias vector.
pub fn flatten_params(model: &InrModel) -> Vec<f64> {
    let mut flat = Vec::with_capacity(model.param_count());
    if let Some(h) = &model.hash {
        flat.extend_from_slice(&h.tables);
    }
    for l in 0..model.mlp.num_layers() {
        flat.extend_from_slice(&model.mlp.weights[l]);
        flat.extend_from_slice(&model.mlp.biases[l]);
    }
    flat
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(model: &mut InrModel, flat: &[f64]) -> Result<()> {
    if flat.len() != model.param_count() {
        return arg_err(format!(
            "parameter vector has length {}, model expects {}",
            flat.len(),
            model.param_count()
        ));
    }
    let mut off = 0;
    if let Some(h) = &mut model.hash {
        let n = h.tables.len();
        h.tables.copy_from_slice(&flat[..n]);
        off = n;
    }
    for l in 0..model.mlp.num_layers() {
        let nw = model.mlp.weights[l].len();
        model.mlp.weights[l].copy_from_slice(&flat[off..off + nw]);
        off += nw;
        let nb = model.mlp.biases[l].len();
        model.mlp.biases[l].copy_from_slice(&flat[off..off + nb]);
        off += nb;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> InrConfig {
        InrConfig {
            hidden_width: 16,
            hidden_layers: 2,
            fourier_features: 8,
            fourier_sigma: 3.0,
            omega0: 30.0,
            hash_levels: 3,
            hash_table_size: 1 << 7,
            hash_features: 2,
            hash_base_res: 4,
            hash_max_res: 16,
            head_width: 12,
            head_layers: 2,
            ..InrConfig::default()
        }
    }

    #[test]
    fn ffn_param_count_closed_form() {
        let cfg = InrConfig {
            hidden_width: 256,
            hidden_layers: 3,
            fourier_features: 256,
            ..InrConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = init_model(Arch::Ffn, 2, &cfg, &mut rng).unwrap();
        let expect = 512 * 256 + 256 + 256 * 256 + 256 + 256 * 256 + 256 + 256 + 1;
        assert_eq!(model.param_count(), expect);
        assert_eq!(flatten_params(&model).len(), expect);
    }

    #[test]
    fn hash_param_count_closed_form() {
        let cfg = InrConfig {
            hash_levels: 8,
            hash_table_size: 1 << 14,
            hash_features: 2,
            hash_base_res: 16,
            hash_max_res: 256,
            head_width: 64,
            head_layers: 2,
            ..InrConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = init_model(Arch::HashEnc, 2, &cfg, &mut rng).unwrap();
        let tables = 8 * (1 << 14) * 2;
        let head = 16 * 64 + 64 + 64 * 64 + 64 + 64 + 1;
        assert_eq!(model.param_count(), tables + head);
    }

    #[test]
    fn siren_init_deterministic_under_seed() {
        let cfg = small_cfg();
        let a = init_model(Arch::Siren, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = init_model(Arch::Siren, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(flatten_params(&a), flatten_params(&b));
    }

    #[test]
    fn empty_batch_gives_empty_output() {
        let model =
            init_model(Arch::Ffn, 2, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(eval(&model, &[]).unwrap().is_empty());
    }

    #[test]
    fn eval_is_pure() {
        let model =
            init_model(Arch::Siren, 2, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let coords = [0.2, -0.4, 0.9, 0.1];
        let a = eval(&model, &coords).unwrap();
        let b = eval(&model, &coords).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_final_layer_gives_constant_bias() {
        let mut model =
            init_model(Arch::Ffn, 2, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let last = model.mlp.num_layers() - 1;
        model.mlp.weights[last].fill(0.0);
        model.mlp.biases[last][0] = 0.7;
        let out = eval(&model, &[0.1, 0.2, -0.8, 0.9, 0.0, 0.0]).unwrap();
        for v in out {
            assert_eq!(v, 0.7);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model =
            init_model(Arch::Ffn, 2, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(eval(&model, &[0.1, 0.2, 0.3]).is_err());
        assert!(weighted_param_grad(&model, &[0.1, 0.2], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let model =
            init_model(Arch::HashEnc, 2, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let g = weighted_param_grad(&model, &[0.3, 0.3, -0.2, 0.8], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_linear_in_weights() {
        let model =
            init_model(Arch::Ffn, 2, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let coords = [0.3, 0.3, -0.2, 0.8, 0.5, -0.5];
        let w = [0.7, -1.3, 0.4];
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let g1 = weighted_param_grad(&model, &coords, &w).unwrap();
        let g2 = weighted_param_grad(&model, &coords, &w2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn batch_additivity() {
        let model =
            init_model(Arch::Siren, 2, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let a = ([0.1, 0.4, -0.6, 0.2], [1.0, -0.5]);
        let b = ([0.9, -0.9, 0.3, 0.3], [0.25, 2.0]);
        let ga = weighted_param_grad(&model, &a.0, &a.1).unwrap();
        let gb = weighted_param_grad(&model, &b.0, &b.1).unwrap();
        let mut coords = a.0.to_vec();
        coords.extend_from_slice(&b.0);
        let mut w = a.1.to_vec();
        w.extend_from_slice(&b.1);
        let gab = weighted_param_grad(&model, &coords, &w).unwrap();
        let scale = gab.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
        for i in 0..gab.len() {
            assert!((gab[i] - ga[i] - gb[i]).abs() <= 1e-12 * scale);
        }
    }

    /// Central finite differences of sum_i w_i f_theta(x_i) over every
    /// component of theta.
    fn fd_check(arch: Arch, seed: u64, step: f64, tol: f64) {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = init_model(arch, 2, &cfg, &mut rng).unwrap();
        if let Some(h) = &mut model.hash {
            // the 1e-4 init scale sits right at the FD step size, which puts
            // ReLU pre-activations on their kinks; test at O(1) tables
            for t in h.tables.iter_mut() {
                *t = rng.gen_range(-0.5..0.5);
            }
        }
        let k = 8;
        let coords: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(-0.95..0.95)).collect();
        let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = weighted_param_grad(&model, &coords, &weights).unwrap();
        let theta = flatten_params(&model);
        let mut scratch = model.clone();
        let mut probe = theta.clone();
        let mut checked = 0;
        for i in 0..theta.len() {
            probe[i] = theta[i] + step;
            unflatten_params(&mut scratch, &probe).unwrap();
            let up: f64 = eval(&scratch, &coords)
                .unwrap()
                .iter()
                .zip(&weights)
                .map(|(f, w)| f * w)
                .sum();
            probe[i] = theta[i] - step;
            unflatten_params(&mut scratch, &probe).unwrap();
            let dn: f64 = eval(&scratch, &coords)
                .unwrap()
                .iter()
                .zip(&weights)
                .map(|(f, w)| f * w)
                .sum();
            probe[i] = theta[i];
            let fd = (up - dn) / (2.0 * step);
            if grad[i].abs() > 1e-8 {
                let rel = (fd - grad[i]).abs() / grad[i].abs();
                assert!(rel <= tol, "{arch:?} component {i}: fd {fd} vs {}", grad[i]);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn ffn_gradient_matches_finite_differences() {
        fd_check(Arch::Ffn, 11, 1e-5, 1e-5);
    }

    #[test]
    fn siren_gradient_matches_finite_differences() {
        fd_check(Arch::Siren, 12, 1e-6, 1e-5);
    }

    #[test]
    fn hash_gradient_matches_finite_differences() {
        fd_check(Arch::HashEnc, 13, 1e-5, 1e-5);
    }

    #[test]
    fn single_coordinate_gradient_matches_fd() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = init_model(Arch::Ffn, 2, &cfg, &mut rng).unwrap();
        let x = [0.33, -0.71];
        let grad = weighted_param_grad(&model, &x, &[1.0]).unwrap();
        let theta = flatten_params(&model);
        let mut scratch = model.clone();
        let mut probe = theta.clone();
        let step = 1e-5;
        for i in (0..theta.len()).step_by(17) {
            probe[i] = theta[i] + step;
            unflatten_params(&mut scratch, &probe).unwrap();
            let up = eval(&scratch, &x).unwrap()[0];
            probe[i] = theta[i] - step;
            unflatten_params(&mut scratch, &probe).unwrap();
            let dn = eval(&scratch, &x).unwrap()[0];
            probe[i] = theta[i];
            let fd = (up - dn) / (2.0 * step);
            if grad[i].abs() > 1e-8 {
                assert!((fd - grad[i]).abs() / grad[i].abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn flatten_round_trip_bitwise() {
        for arch in [Arch::Ffn, Arch::Siren, Arch::HashEnc] {
            let mut model =
                init_model(arch, 3, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
            let theta = flatten_params(&model);
            unflatten_params(&mut model, &theta).unwrap();
            assert_eq!(flatten_params(&model), theta);
            assert!(unflatten_params(&mut model, &theta[1..]).is_err());
        }
    }

    #[test]
    fn flat_index_maps_to_single_parameter() {
        let mut model =
            init_model(Arch::HashEnc, 2, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let theta = flatten_params(&model);
        for k in [0usize, 100, theta.len() - 1] {
            let mut pert = theta.clone();
            pert[k] += 1.0;
            unflatten_params(&mut model, &pert).unwrap();
            let back = flatten_params(&model);
            let diffs = back.iter().zip(&theta).filter(|(a, b)| a != b).count();
            assert_eq!(diffs, 1);
        }
    }
}
