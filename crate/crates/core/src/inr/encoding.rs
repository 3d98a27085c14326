//! Input encodings: random Fourier features and the multiresolution hash
//! grid.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, Result};

/// Frozen random Fourier features: x -> [sin(2 pi B x), cos(2 pi B x)].
/// B is not part of theta.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierEncoding {
    /// num_features x d, row-major.
    pub b: Vec<f64>,
    pub num_features: usize,
    pub d: usize,
    pub sigma: f64,
}

impl FourierEncoding {
    pub fn new(num_features: usize, d: usize, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        if num_features == 0 {
            return arg_err("fourier encoding needs at least one feature");
        }
        let normal = Normal::new(0.0, sigma).map_err(|_| {
            crate::error::Error::InvalidArgument("fourier sigma must be finite".into())
        })?;
        let b = (0..num_features * d).map(|_| normal.sample(rng)).collect();
        Ok(Self { b, num_features, d, sigma })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.num_features
    }

    /// Writes [sin.., cos..] into `out` (length `output_dim`).
    pub fn encode(&self, x: &[f64], out: &mut [f64]) {
        let tau = 2.0 * std::f64::consts::PI;
        for f in 0..self.num_features {
            let row = &self.b[f * self.d..(f + 1) * self.d];
            let mut phase = 0.0;
            for i in 0..self.d {
                phase += row[i] * x[i];
            }
            let (s, c) = (tau * phase).sin_cos();
            out[f] = s;
            out[self.num_features + f] = c;
        }
    }
}

const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

/// Multiresolution hash-grid encoding. Feature tables are trainable and
/// flattened into theta; resolutions grow geometrically.
#[derive(Debug, Clone, PartialEq)]
pub struct HashEncoding {
    pub levels: usize,
    /// Entries per level table, power of two.
    pub table_size: usize,
    /// Features per entry.
    pub features: usize,
    /// Grid resolution (cells per axis) per level, strictly increasing.
    pub resolutions: Vec<usize>,
    /// levels * table_size * features, level-major.
    pub tables: Vec<f64>,
    pub d: usize,
}

impl HashEncoding {
    pub fn new(
        levels: usize,
        table_size: usize,
        features: usize,
        base_res: usize,
        max_res: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if levels == 0 || features == 0 || base_res < 1 {
            return arg_err("hash encoding needs levels, features, base_res >= 1");
        }
        if !table_size.is_power_of_two() {
            return arg_err("hash table size must be a power of two");
        }
        if max_res < base_res {
            return arg_err("max_res must be >= base_res");
        }
        let growth = if levels > 1 {
            ((max_res as f64).ln() - (base_res as f64).ln()) / (levels as f64 - 1.0)
        } else {
            0.0
        };
        let mut resolutions: Vec<usize> = (0..levels)
            .map(|l| ((base_res as f64) * (growth * l as f64).exp()).round() as usize)
            .collect();
        // enforce strict growth after rounding
        for l in 1..levels {
            if resolutions[l] <= resolutions[l - 1] {
                resolutions[l] = resolutions[l - 1] + 1;
            }
        }
        let tables = (0..levels * table_size * features)
            .map(|_| rng.gen_range(-1e-4..1e-4))
            .collect();
        Ok(Self { levels, table_size, features, resolutions, tables, d })
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    pub fn table_param_count(&self) -> usize {
        self.tables.len()
    }

    fn hash_corner(&self, corner: &[u64]) -> usize {
        let mut h = 0u64;
        for (i, &c) in corner.iter().enumerate() {
            h ^= c.wrapping_mul(HASH_PRIMES[i]);
        }
        (h & (self.table_size as u64 - 1)) as usize
    }

    /// Walks the 2^d interpolation stencil at each level, calling `visit`
    /// with (level, table entry index, interpolation weight). Shared between
    /// the forward encode and the table-gradient scatter so the two always
    /// use the identical stencil.
    pub fn for_each_stencil_entry(&self, x: &[f64], mut visit: impl FnMut(usize, usize, f64)) {
        let d = self.d;
        let mut corner = [0u64; 3];
        for level in 0..self.levels {
            let res = self.resolutions[level] as f64;
            let mut base = [0i64; 3];
            let mut frac = [0.0f64; 3];
            for ax in 0..d {
                // [-1,1] -> [0, res]
                let u = (x[ax] + 1.0) * 0.5 * res;
                let b = u.floor();
                base[ax] = b as i64;
                frac[ax] = u - b;
            }
            for s in 0..(1usize << d) {
                let mut w = 1.0;
                for ax in 0..d {
                    if s >> ax & 1 == 1 {
                        corner[ax] = (base[ax] + 1) as u64;
                        w *= frac[ax];
                    } else {
                        corner[ax] = base[ax] as u64;
                        w *= 1.0 - frac[ax];
                    }
                }
                if w != 0.0 {
                    let entry = self.hash_corner(&corner[..d]);
                    visit(level, entry, w);
                }
            }
        }
    }

    /// Writes the interpolated features (level-major) into `out`.
    pub fn encode(&self, x: &[f64], out: &mut [f64]) {
        out[..self.output_dim()].fill(0.0);
        let f = self.features;
        let per_level = self.table_size * f;
        self.for_each_stencil_entry(x, |level, entry, w| {
            let src = &self.tables[level * per_level + entry * f..][..f];
            let dst = &mut out[level * f..(level + 1) * f];
            for k in 0..f {
                dst[k] += w * src[k];
            }
        });
    }

    /// Scatters `d_encoded` (gradient wrt the encoding output) into the
    /// table gradient buffer, which mirrors `tables`.
    pub fn backward_tables(&self, x: &[f64], d_encoded: &[f64], grad_tables: &mut [f64]) {
        let f = self.features;
        let per_level = self.table_size * f;
        self.for_each_stencil_entry(x, |level, entry, w| {
            let src = &d_encoded[level * f..(level + 1) * f];
            let dst = &mut grad_tables[level * per_level + entry * f..][..f];
            for k in 0..f {
                dst[k] += w * src[k];
            }
        });
    }
}
