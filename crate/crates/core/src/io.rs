//! On-disk formats: raw little-endian float arrays with sidecar text
//! headers (`<path>.hdr`), model checkpoints, and the phantom file format.
//!
//! Images and sinograms store 32-bit floats, fastest axis first (x for
//! images, detector column for sinograms). Checkpoints store 64-bit floats
//! so a saved model reloads bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::grid::{ConeBeamGeometry, FanBeamGeometry, Geometry, VoxelGrid};
use crate::inr::{flatten_params, init_model, unflatten_params, Arch, InrConfig, InrModel};
use crate::phantom::{EllipseComponent, EllipsePhantom};
use crate::projector::{ImageVec, Sinogram};

fn header_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".hdr");
    PathBuf::from(os)
}

fn write_f32_le(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(fs::write(path, bytes)?)
}

fn read_f32_le(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expect * 4 {
        return Err(Error::Parse(format!(
            "{}: expected {} f32 values ({} bytes), file has {} bytes",
            path.display(),
            expect,
            expect * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_f64_le(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for &v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(fs::write(path, bytes)?)
}

fn read_f64_le(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expect * 8 {
        return Err(Error::Parse(format!(
            "{}: expected {} f64 values, file has {} bytes",
            path.display(),
            expect,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

struct Header {
    pairs: Vec<(String, String)>,
}

impl Header {
    fn load(path: &Path) -> Result<Self> {
        Ok(Self { pairs: parse_kv(&fs::read_to_string(path)?)? })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Parse(format!("header missing key {key:?}")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Parse(format!("header key {key}: bad value")))
    }

    fn num_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)?
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Parse(format!("header key {key}: bad value")))
            })
            .collect()
    }
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes `<path>` (raw f32) and `<path>.hdr`.
pub fn write_image(path: &Path, image: &ImageVec) -> Result<()> {
    let g = &image.grid;
    let hdr = format!(
        "kind = image\ndims = {}\nspacing = {}\norigin = {}\n",
        fmt_list(&g.dims),
        fmt_list(&g.spacing),
        fmt_list(&g.origin)
    );
    fs::write(header_path(path), hdr)?;
    write_f32_le(path, &image.values)
}

pub fn read_image(path: &Path) -> Result<ImageVec> {
    let hdr = Header::load(&header_path(path))?;
    if hdr.get("kind")? != "image" {
        return Err(Error::Parse(format!("{}: not an image", path.display())));
    }
    let grid = VoxelGrid {
        dims: hdr.num_list("dims")?,
        spacing: hdr.num_list("spacing")?,
        origin: hdr.num_list("origin")?,
    };
    let values = read_f32_le(path, grid.num_voxels())?;
    Ok(ImageVec { grid, values })
}

/// Writes `<path>` (raw f32, detector column fastest) and `<path>.hdr`
/// carrying the full acquisition geometry.
pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    let fan = match &sino.geometry {
        Geometry::Fan(f) => f,
        Geometry::Cone(c) => &c.fan,
    };
    let mut hdr = format!(
        "kind = sinogram\nangles = {}\nsource_to_iso = {}\nsource_to_detector = {}\n\
         num_det = {}\ndet_spacing = {}\n",
        fmt_list(&fan.angles),
        fan.source_to_iso,
        fan.source_to_detector,
        fan.num_det,
        fan.det_spacing
    );
    if let Geometry::Cone(c) = &sino.geometry {
        hdr.push_str(&format!(
            "det_rows = {}\ndet_row_spacing = {}\n",
            c.num_det_rows, c.det_row_spacing
        ));
    }
    fs::write(header_path(path), hdr)?;
    write_f32_le(path, &sino.values)
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    let hdr = Header::load(&header_path(path))?;
    if hdr.get("kind")? != "sinogram" {
        return Err(Error::Parse(format!("{}: not a sinogram", path.display())));
    }
    let fan = FanBeamGeometry::new(
        hdr.num_list("angles")?,
        hdr.num("source_to_iso")?,
        hdr.num("source_to_detector")?,
        hdr.num("num_det")?,
        hdr.num("det_spacing")?,
    )?;
    let geometry = if hdr.get("det_rows").is_ok() {
        Geometry::Cone(ConeBeamGeometry::new(
            fan,
            hdr.num("det_rows")?,
            hdr.num("det_row_spacing")?,
        )?)
    } else {
        Geometry::Fan(fan)
    };
    let values = read_f32_le(path, geometry.num_rays())?;
    Ok(Sinogram { geometry, values })
}

/// Saves the model as raw f64: the frozen Fourier matrix (FFN only)
/// followed by the flat trainable parameters. `<path>.hdr` records the
/// architecture so the shape can be rebuilt on load.
pub fn write_checkpoint(path: &Path, model: &InrModel, cfg: &InrConfig) -> Result<()> {
    let arch = match model.arch {
        Arch::Ffn => "ffn",
        Arch::Siren => "siren",
        Arch::HashEnc => "hash",
    };
    let hdr = format!(
        "kind = checkpoint\narch = {arch}\nd = {}\nhidden_width = {}\nhidden_layers = {}\n\
         fourier_features = {}\nfourier_sigma = {}\nomega0 = {}\nhash_levels = {}\n\
         hash_table_size = {}\nhash_features = {}\nhash_base_res = {}\nhash_max_res = {}\n\
         head_width = {}\nhead_layers = {}\n",
        model.d,
        cfg.hidden_width,
        cfg.hidden_layers,
        cfg.fourier_features,
        cfg.fourier_sigma,
        cfg.omega0,
        cfg.hash_levels,
        cfg.hash_table_size,
        cfg.hash_features,
        cfg.hash_base_res,
        cfg.hash_max_res,
        cfg.head_width,
        cfg.head_layers
    );
    fs::write(header_path(path), hdr)?;
    let theta = flatten_params(model);
    let mut data = Vec::new();
    if let Some(f) = &model.fourier {
        data.extend_from_slice(&f.b);
    }
    data.extend_from_slice(&theta);
    write_f64_le(path, &data)
}

pub fn read_checkpoint(path: &Path) -> Result<(InrModel, InrConfig)> {
    let hdr = Header::load(&header_path(path))?;
    if hdr.get("kind")? != "checkpoint" {
        return Err(Error::Parse(format!("{}: not a checkpoint", path.display())));
    }
    let arch: Arch = hdr.get("arch")?.parse()?;
    let d: usize = hdr.num("d")?;
    let cfg = InrConfig {
        hidden_width: hdr.num("hidden_width")?,
        hidden_layers: hdr.num("hidden_layers")?,
        fourier_features: hdr.num("fourier_features")?,
        fourier_sigma: hdr.num("fourier_sigma")?,
        omega0: hdr.num("omega0")?,
        hash_levels: hdr.num("hash_levels")?,
        hash_table_size: hdr.num("hash_table_size")?,
        hash_features: hdr.num("hash_features")?,
        hash_base_res: hdr.num("hash_base_res")?,
        hash_max_res: hdr.num("hash_max_res")?,
        head_width: hdr.num("head_width")?,
        head_layers: hdr.num("head_layers")?,
    };
    // shape-only init; the frozen buffer and parameters come from the file
    let mut model = init_model(arch, d, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let b_len = model.fourier.as_ref().map_or(0, |f| f.b.len());
    let data = read_f64_le(path, b_len + model.param_count())?;
    if let Some(f) = model.fourier.as_mut() {
        f.b.copy_from_slice(&data[..b_len]);
    }
    unflatten_params(&mut model, &data[b_len..])?;
    Ok((model, cfg))
}

/// One ellipse per line: `cx cy [cz] ax ay [az] rotation value`, rotation in
/// radians about z. `#` starts a comment. All lines must share one
/// dimensionality (6 fields = 2D, 8 fields = 3D).
pub fn parse_phantom_text(text: &str) -> Result<EllipsePhantom> {
    let mut phantom = EllipsePhantom::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| {
                    Error::Parse(format!("phantom line {}: bad number {t:?}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        let d = match fields.len() {
            6 => 2,
            8 => 3,
            n => {
                return Err(Error::Parse(format!(
                    "phantom line {}: expected 6 (2D) or 8 (3D) fields, got {n}",
                    lineno + 1
                )))
            }
        };
        if let Some(prev) = phantom.ndim() {
            if prev != d {
                return Err(Error::Parse(format!(
                    "phantom line {}: mixed 2D/3D components",
                    lineno + 1
                )));
            }
        }
        phantom.components.push(EllipseComponent {
            center: fields[..d].to_vec(),
            semi_axes: fields[d..2 * d].to_vec(),
            rotation: fields[2 * d],
            value: fields[2 * d + 1],
        });
    }
    if phantom.components.is_empty() {
        return Err(Error::Parse("phantom file has no components".into()));
    }
    Ok(phantom)
}

pub fn read_phantom_file(path: &Path) -> Result<EllipsePhantom> {
    parse_phantom_text(&fs::read_to_string(path)?)
}

pub fn write_phantom_file(path: &Path, phantom: &EllipsePhantom) -> Result<()> {
    let mut out = String::from("# cx cy [cz] ax ay [az] rotation value\n");
    for c in &phantom.components {
        out.push_str(&format!(
            "{} {} {} {}\n",
            fmt_list(&c.center),
            fmt_list(&c.semi_axes),
            c.rotation,
            c.value
        ));
    }
    Ok(fs::write(path, out)?)
}
