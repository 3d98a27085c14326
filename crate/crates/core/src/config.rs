//! Line-oriented `key = value` experiment configuration: parsing and
//! round-trip rendering. Blank lines and `#` comments are ignored.

use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::MaskShape;
use crate::inr::Arch;
use crate::recon::{Estimator, LossTag, PhantomSpec, ReconConfig};

/// Splits config text into (key, value) pairs. Keys repeat in file order;
/// later assignments override earlier ones when applied.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("{key}: cannot parse {value:?}")))
}

fn num_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| num(key, t))
        .collect()
}

/// Parses a full experiment config, starting from the 2D defaults. Unknown
/// keys are errors so typos fail loudly.
pub fn parse_recon_config(text: &str) -> Result<ReconConfig> {
    let mut cfg = ReconConfig::default_2d();
    for (key, value) in parse_kv(text)? {
        apply_key(&mut cfg, &key, &value)?;
    }
    // extent may predate a grid override or vice versa; repair length
    // mismatches that come from switching 2D <-> 3D with partial keys
    if cfg.extent.len() == 1 && cfg.grid_dims.len() > 1 {
        cfg.extent = vec![cfg.extent[0]; cfg.grid_dims.len()];
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Applies one `key = value` setting; shared by the config parser and CLI
/// flag overrides.
pub fn apply_key(cfg: &mut ReconConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "grid" => cfg.grid_dims = num_list(key, value)?,
        "extent" => cfg.extent = num_list(key, value)?,
        "views" => cfg.num_views = num(key, value)?,
        "source_to_iso" => cfg.source_to_iso = num(key, value)?,
        "source_to_detector" => cfg.source_to_detector = num(key, value)?,
        "num_det" => cfg.num_det = num(key, value)?,
        "det_spacing" => cfg.det_spacing = num(key, value)?,
        "det_rows" => cfg.num_det_rows = num(key, value)?,
        "det_row_spacing" => cfg.det_row_spacing = num(key, value)?,
        "phantom" => {
            cfg.phantom = match value {
                "shepp-logan" => PhantomSpec::SheppLogan,
                "ellipsoid" => PhantomSpec::Ellipsoid3d,
                path => PhantomSpec::File(PathBuf::from(path)),
            }
        }
        "sim_factor" => cfg.sim_factor = num(key, value)?,
        "noise_sigma" => cfg.noise_sigma = num(key, value)?,
        "mask" => {
            cfg.mask_shape = match value {
                "inscribed" => MaskShape::Inscribed,
                "full" => MaskShape::Full,
                other => return Err(Error::Parse(format!("mask: unknown shape {other:?}"))),
            }
        }
        "arch" => cfg.arch = value.parse()?,
        "loss" => {
            cfg.loss = match value {
                "ls" => LossTag::Ls,
                "fls" => LossTag::Fls,
                other => return Err(Error::Parse(format!("loss: unknown kind {other:?}"))),
            }
        }
        "estimator" => {
            cfg.estimator = match value {
                "stochastic" => Estimator::Stochastic,
                "exact" => Estimator::Exact,
                other => return Err(Error::Parse(format!("estimator: unknown {other:?}"))),
            }
        }
        "batch_fraction" => cfg.batch_fraction = parse_fraction(value)?,
        "iterations" => cfg.iterations = num(key, value)?,
        "learning_rate" => cfg.learning_rate = Some(num(key, value)?),
        "seed" => cfg.seed = num(key, value)?,
        "metrics_every" => cfg.metrics_every = num(key, value)?,
        "ordered_subsets" => cfg.ordered_subsets = num(key, value)?,
        "out_dir" => cfg.out_dir = Some(PathBuf::from(value)),
        "hidden_width" => cfg.inr.hidden_width = num(key, value)?,
        "hidden_layers" => cfg.inr.hidden_layers = num(key, value)?,
        "fourier_features" => cfg.inr.fourier_features = num(key, value)?,
        "fourier_sigma" => cfg.inr.fourier_sigma = num(key, value)?,
        "omega0" => cfg.inr.omega0 = num(key, value)?,
        "hash_levels" => cfg.inr.hash_levels = num(key, value)?,
        "hash_table_size" => cfg.inr.hash_table_size = num(key, value)?,
        "hash_features" => cfg.inr.hash_features = num(key, value)?,
        "hash_base_res" => cfg.inr.hash_base_res = num(key, value)?,
        "hash_max_res" => cfg.inr.hash_max_res = num(key, value)?,
        "head_width" => cfg.inr.head_width = num(key, value)?,
        "head_layers" => cfg.inr.head_layers = num(key, value)?,
        other => return Err(Error::Parse(format!("unknown config key {other:?}"))),
    }
    Ok(())
}

/// Accepts `0.0625` or the more readable `1/16`.
fn parse_fraction(value: &str) -> Result<f64> {
    if let Some((a, b)) = value.split_once('/') {
        let a: f64 = num("batch_fraction", a.trim())?;
        let b: f64 = num("batch_fraction", b.trim())?;
        if b == 0.0 {
            return Err(Error::Parse("batch_fraction: zero denominator".into()));
        }
        Ok(a / b)
    } else {
        num("batch_fraction", value)
    }
}

/// Renders the fully resolved config (defaults included) so every run's
/// settings are recorded alongside its outputs.
pub fn render_recon_config(cfg: &ReconConfig) -> String {
    let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let dims = cfg
        .grid_dims
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    let mut out = String::new();
    let mut push = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    push("grid", dims);
    push("extent", list(&cfg.extent));
    push("views", cfg.num_views.to_string());
    push("source_to_iso", cfg.source_to_iso.to_string());
    push("source_to_detector", cfg.source_to_detector.to_string());
    push("num_det", cfg.num_det.to_string());
    push("det_spacing", cfg.det_spacing.to_string());
    if cfg.ndim() == 3 {
        push("det_rows", cfg.num_det_rows.to_string());
        push("det_row_spacing", cfg.det_row_spacing.to_string());
    }
    push(
        "phantom",
        match &cfg.phantom {
            PhantomSpec::SheppLogan => "shepp-logan".to_string(),
            PhantomSpec::Ellipsoid3d => "ellipsoid".to_string(),
            PhantomSpec::File(p) => p.display().to_string(),
        },
    );
    push("sim_factor", cfg.sim_factor.to_string());
    push("noise_sigma", cfg.noise_sigma.to_string());
    push(
        "mask",
        match cfg.mask_shape {
            MaskShape::Inscribed => "inscribed",
            MaskShape::Full => "full",
        }
        .to_string(),
    );
    push(
        "arch",
        match cfg.arch {
            Arch::Ffn => "ffn",
            Arch::Siren => "siren",
            Arch::HashEnc => "hash",
        }
        .to_string(),
    );
    push(
        "loss",
        match cfg.loss {
            LossTag::Ls => "ls",
            LossTag::Fls => "fls",
        }
        .to_string(),
    );
    push(
        "estimator",
        match cfg.estimator {
            Estimator::Stochastic => "stochastic",
            Estimator::Exact => "exact",
        }
        .to_string(),
    );
    push("batch_fraction", cfg.batch_fraction.to_string());
    push("iterations", cfg.iterations.to_string());
    push("learning_rate", cfg.effective_learning_rate().to_string());
    push("seed", cfg.seed.to_string());
    push("metrics_every", cfg.metrics_every.to_string());
    push("ordered_subsets", cfg.ordered_subsets.to_string());
    if let Some(dir) = &cfg.out_dir {
        push("out_dir", dir.display().to_string());
    }
    push("hidden_width", cfg.inr.hidden_width.to_string());
    push("hidden_layers", cfg.inr.hidden_layers.to_string());
    push("fourier_features", cfg.inr.fourier_features.to_string());
    push("fourier_sigma", cfg.inr.fourier_sigma.to_string());
    push("omega0", cfg.inr.omega0.to_string());
    push("hash_levels", cfg.inr.hash_levels.to_string());
    push("hash_table_size", cfg.inr.hash_table_size.to_string());
    push("hash_features", cfg.inr.hash_features.to_string());
    push("hash_base_res", cfg.inr.hash_base_res.to_string());
    push("hash_max_res", cfg.inr.hash_max_res.to_string());
    push("head_width", cfg.inr.head_width.to_string());
    push("head_layers", cfg.inr.head_layers.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_kv_skips_comments_and_blanks() {
        let pairs = parse_kv("# header\n\n a = 1 # trailing\nb=two words\n").unwrap();
        assert_eq!(
            pairs,
            vec![("a".into(), "1".into()), ("b".into(), "two words".into())]
        );
    }

    #[test]
    fn parse_kv_rejects_bare_line() {
        assert!(parse_kv("just some text\n").is_err());
    }

    #[test]
    fn parse_full_config() {
        let text = "grid = 64 64\nextent = 100 100\nviews = 30\narch = siren\n\
                    loss = ls\nbatch_fraction = 1/16\niterations = 50\nseed = 7\n";
        let cfg = parse_recon_config(text).unwrap();
        assert_eq!(cfg.grid_dims, vec![64, 64]);
        assert_eq!(cfg.num_views, 30);
        assert_eq!(cfg.arch, Arch::Siren);
        assert_eq!(cfg.loss, LossTag::Ls);
        assert!((cfg.batch_fraction - 0.0625).abs() < 1e-15);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(parse_recon_config("gri = 64 64\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse_recon_config("views = many\n").is_err());
        assert!(parse_recon_config("batch_fraction = 2.0\n").is_err());
        assert!(parse_recon_config("iterations = 0\n").is_err());
        assert!(parse_recon_config("mask = round\n").is_err());
    }

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = ReconConfig::default_2d();
        cfg.arch = Arch::HashEnc;
        cfg.batch_fraction = 0.03125;
        cfg.seed = 99;
        cfg.learning_rate = Some(cfg.effective_learning_rate());
        let parsed = parse_recon_config(&render_recon_config(&cfg)).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn later_keys_override_earlier() {
        let cfg = parse_recon_config("seed = 1\nseed = 2\n").unwrap();
        assert_eq!(cfg.seed, 2);
    }
}
