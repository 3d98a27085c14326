//! Small fixed-topology MLP with an explicit backward pass.

use rand::Rng;

use crate::error::{arg_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// sin(omega * z)
    Sine(f64),
    None,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sine(w) => (w * z).sin(),
            Activation::None => z,
        }
    }

    fn deriv(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sine(w) => w * (w * z).cos(),
            Activation::None => 1.0,
        }
    }
}

/// Dense MLP, scalar output. Weights are row-major `out x in` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCore {
    /// `[d_in, h_1, ..., h_k, 1]`
    pub widths: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Applied after the affine map of each layer; final entry is `None`.
    pub activations: Vec<Activation>,
}

/// Scratch buffers reused across evaluations of one batch.
#[derive(Debug, Default, Clone)]
pub struct MlpWorkspace {
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations per layer; `post[0]` is the input.
    post: Vec<Vec<f64>>,
    /// Backward deltas, one buffer per layer width.
    delta: Vec<Vec<f64>>,
}

impl MlpCore {
    /// Zero-initialized MLP of the given shape; callers fill in weights.
    pub fn zeros(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return arg_err("mlp needs at least input and output widths");
        }
        if *widths.last().unwrap() != 1 {
            return arg_err("mlp output width must be 1");
        }
        if widths.iter().any(|&w| w == 0) {
            return arg_err("mlp widths must be positive");
        }
        if activations.len() != widths.len() - 1 {
            return arg_err("one activation per layer required");
        }
        let weights = (0..widths.len() - 1)
            .map(|l| vec![0.0; widths[l + 1] * widths[l]])
            .collect();
        let biases = (0..widths.len() - 1).map(|l| vec![0.0; widths[l + 1]]).collect();
        Ok(Self { widths, weights, biases, activations })
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers())
            .map(|l| self.widths[l + 1] * (self.widths[l] + 1))
            .sum()
    }

    /// Tracked intermediate values per forward evaluation (pre + post
    /// activations of every layer).
    pub fn activation_count(&self) -> usize {
        2 * self.widths[1..].iter().sum::<usize>()
    }

    pub fn make_workspace(&self) -> MlpWorkspace {
        MlpWorkspace {
            pre: self.widths[1..].iter().map(|&w| vec![0.0; w]).collect(),
            post: self.widths.iter().map(|&w| vec![0.0; w]).collect(),
            delta: self.widths[1..].iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    /// Forward pass, caching activations in `ws` for a later backward pass.
    pub fn forward(&self, input: &[f64], ws: &mut MlpWorkspace) -> f64 {
        debug_assert_eq!(input.len(), self.widths[0]);
        ws.post[0].copy_from_slice(input);
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.weights[l];
            let b = &self.biases[l];
            let act = self.activations[l];
            // split borrow: input is post[l], outputs are pre[l] / post[l+1]
            let (head, tail) = ws.post.split_at_mut(l + 1);
            let x = &head[l];
            let pre = &mut ws.pre[l];
            let out = &mut tail[0];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = b[o];
                for i in 0..n_in {
                    acc += row[i] * x[i];
                }
                pre[o] = acc;
                out[o] = act.apply(acc);
            }
        }
        ws.post[self.num_layers()][0]
    }

    /// Reverse-mode sweep for a scalar output seeded with `d_out`.
    ///
    /// Accumulates (+=) into `grad_w`/`grad_b`, which mirror the layer
    /// layout, and writes the gradient with respect to the input into
    /// `d_input` when requested. Requires `forward` to have been called
    /// with the same workspace.
    pub fn backward(
        &self,
        d_out: f64,
        ws: &mut MlpWorkspace,
        grad_w: &mut [Vec<f64>],
        grad_b: &mut [Vec<f64>],
        mut d_input: Option<&mut [f64]>,
    ) {
        let last = self.num_layers() - 1;
        ws.delta[last][0] = d_out * self.activations[last].deriv(ws.pre[last][0]);
        for l in (0..=last).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.weights[l];
            for o in 0..n_out {
                let dl = ws.delta[l][o];
                if dl == 0.0 {
                    continue;
                }
                let x = &ws.post[l];
                let gw = &mut grad_w[l][o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    gw[i] += dl * x[i];
                }
                grad_b[l][o] += dl;
            }
            if l > 0 {
                // delta[l-1] = act'(pre[l-1]) * W_l^T delta[l]
                let (dprev, dcur) = {
                    let (a, b) = ws.delta.split_at_mut(l);
                    (&mut a[l - 1], &b[0])
                };
                for i in 0..n_in {
                    let mut acc = 0.0;
                    for o in 0..n_out {
                        acc += w[o * n_in + i] * dcur[o];
                    }
                    dprev[i] = acc * self.activations[l - 1].deriv(ws.pre[l - 1][i]);
                }
            } else if let Some(di) = d_input.as_deref_mut() {
                for i in 0..n_in {
                    let mut acc = 0.0;
                    for o in 0..n_out {
                        acc += w[o * n_in + i] * ws.delta[0][o];
                    }
                    di[i] = acc;
                }
            }
        }
    }
}

/// He-uniform fill: weights U(+-sqrt(6/fan_in)), biases U(+-1/sqrt(fan_in))
/// per layer. Nonzero biases keep pre-activations off exact ReLU kinks for
/// coordinates whose previous layer is entirely inactive.
pub fn he_uniform_init(mlp: &mut MlpCore, rng: &mut impl Rng) {
    for l in 0..mlp.num_layers() {
        let fan_in = mlp.widths[l] as f64;
        let bound = (6.0 / fan_in).sqrt();
        for w in mlp.weights[l].iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        let b_bound = 1.0 / fan_in.sqrt();
        for b in mlp.biases[l].iter_mut() {
            *b = rng.gen_range(-b_bound..b_bound);
        }
    }
}

/// SIREN scheme: first layer U(+-1/fan_in), deeper layers
/// U(+-sqrt(6/fan_in)/omega0).
pub fn siren_init(mlp: &mut MlpCore, omega0: f64, rng: &mut impl Rng) {
    for l in 0..mlp.num_layers() {
        let fan_in = mlp.widths[l] as f64;
        let bound = if l == 0 {
            1.0 / fan_in
        } else {
            (6.0 / fan_in).sqrt() / omega0
        };
        for w in mlp.weights[l].iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
    }
}
