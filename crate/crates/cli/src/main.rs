//! Command-line front end: phantom rasterization, measurement simulation,
//! FBP/CGLS baselines, INR training, and gradient sanity checks.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use inrtomo::config::{apply_key, parse_recon_config, render_recon_config};
use inrtomo::gradient::{
    exact_gradient_ctx, loss_at_theta, stochastic_gradient_ctx, GradContext,
};
use inrtomo::grid::make_fov_mask;
use inrtomo::inr::{flatten_params, init_model};
use inrtomo::io;
use inrtomo::phantom::rasterize;
use inrtomo::projector::{back_project, fbp_reconstruct, forward_project};
use inrtomo::recon::{build_problem, cgls_with_history, image_mse, train_inr_on, ReconConfig};
use inrtomo::Sinogram;

#[derive(Parser)]
#[command(name = "inrtomo", version, about = "INR-based CT reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Experiment configuration shared by every subcommand.
#[derive(Args)]
struct ConfigArgs {
    /// Line-oriented `key = value` config file; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set seed=3`; repeatable, applied in
    /// order after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ReconConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                parse_recon_config(&text)?
            }
            None => ReconConfig::default_2d(),
        };
        for item in &self.set {
            let (key, value) = item
                .split_once('=')
                .with_context(|| format!("--set {item:?}: expected KEY=VALUE"))?;
            apply_key(&mut cfg, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize the configured phantom onto the reconstruction grid.
    Phantom {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output image path (raw f32 + `.hdr` sidecar).
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Simulate measurements on the refined grid and write the sinogram.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output sinogram path.
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the matching ground-truth image here.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Filtered backprojection (FBP in 2D, FDK in 3D).
    Fbp {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input sinogram; simulated from the config when omitted.
        #[arg(short, long)]
        input: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// CGLS iterative least-squares baseline.
    Cgls {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input sinogram; simulated from the config when omitted.
        #[arg(short, long)]
        input: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train the configured INR; writes metrics.csv, the final image, a
    /// checkpoint and the resolved config into the output directory.
    Recon {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run gradient/adjoint sanity checks on the configured problem.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Phantom { cfg, output } => {
            let cfg = cfg.load()?;
            let grid = cfg.grid()?;
            let phantom = cfg.load_phantom()?;
            let image = rasterize(&phantom, &grid, cfg.sim_factor)?;
            io::write_image(&output, &image)?;
            eprintln!("wrote {} ({} voxels)", output.display(), image.values.len());
        }
        Command::Simulate { cfg, output, truth } => {
            let cfg = cfg.load()?;
            let problem = build_problem(&cfg)?;
            io::write_sinogram(&output, &problem.y)?;
            eprintln!("wrote {} ({} rays)", output.display(), problem.y.values.len());
            if let Some(path) = truth {
                io::write_image(&path, &problem.truth)?;
                eprintln!("wrote {}", path.display());
            }
        }
        Command::Fbp { cfg, input, output } => {
            let cfg = cfg.load()?;
            let grid = cfg.grid()?;
            let (sino, truth) = load_or_simulate(&cfg, input)?;
            let image = fbp_reconstruct(&sino, &grid)?;
            io::write_image(&output, &image)?;
            eprintln!("wrote {}", output.display());
            if let Some(truth) = truth {
                let mask = make_fov_mask(&grid, cfg.mask_shape);
                eprintln!("image_mse = {:.6e}", image_mse(&image, &truth, &mask)?);
            }
        }
        Command::Cgls { cfg, input, output } => {
            let cfg = cfg.load()?;
            let grid = cfg.grid()?;
            let (sino, truth) = load_or_simulate(&cfg, input)?;
            let (image, hist) =
                cgls_with_history(&sino.geometry.clone(), &grid, &sino, cfg.iterations)?;
            io::write_image(&output, &image)?;
            eprintln!(
                "wrote {} (residual {:.3e} -> {:.3e} over {} iterations)",
                output.display(),
                hist.first().unwrap(),
                hist.last().unwrap(),
                hist.len() - 1
            );
            if let Some(truth) = truth {
                let mask = make_fov_mask(&grid, cfg.mask_shape);
                eprintln!("image_mse = {:.6e}", image_mse(&image, &truth, &mask)?);
            }
        }
        Command::Recon { cfg, output } => {
            let mut cfg = cfg.load()?;
            if let Some(dir) = output {
                cfg.out_dir = Some(dir);
            }
            let dir = cfg
                .out_dir
                .clone()
                .context("recon needs an output directory (-o or `out_dir` in the config)")?;
            fs::create_dir_all(&dir)?;
            // record the fully resolved settings next to the results
            fs::write(dir.join("config.txt"), render_recon_config(&cfg))?;
            let problem = build_problem(&cfg)?;
            let out = train_inr_on(&cfg, problem)?;
            fs::write(dir.join("metrics.csv"), out.metrics.to_csv())?;
            io::write_image(&dir.join("recon.raw"), &out.image)?;
            io::write_image(&dir.join("truth.raw"), &out.problem.truth)?;
            io::write_checkpoint(&dir.join("model.ckpt"), &out.model, &cfg.inr)?;
            let last = out.metrics.rows.last().unwrap();
            eprintln!(
                "finished {} iterations: loss {:.6e}, image_mse {:.6e}, {:.1}s",
                last.iteration, last.loss, last.image_mse, last.wall_time_s
            );
            eprintln!("outputs in {}", dir.display());
        }
        Command::Gradcheck { cfg } => {
            let cfg = cfg.load()?;
            if !gradcheck(&cfg)? {
                bail!("gradcheck failed");
            }
        }
    }
    Ok(())
}

/// Reads the sinogram from disk, or simulates it (then ground truth is
/// available for an MSE report).
fn load_or_simulate(
    cfg: &ReconConfig,
    input: Option<PathBuf>,
) -> Result<(Sinogram, Option<inrtomo::ImageVec>)> {
    match input {
        Some(path) => Ok((io::read_sinogram(&path)?, None)),
        None => {
            let problem = build_problem(cfg)?;
            Ok((problem.y, Some(problem.truth)))
        }
    }
}

/// Projector adjoint, full-batch exactness, and an end-to-end directional
/// finite-difference check on the configured problem. Prints one line per
/// check; returns whether all passed.
fn gradcheck(cfg: &ReconConfig) -> Result<bool> {
    let problem = build_problem(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6164);
    let mut ok = true;
    let mut report = |name: &str, value: f64, tol: f64| {
        let pass = value <= tol;
        ok &= pass;
        println!(
            "{}: {} ({:.3e}, tolerance {:.0e})",
            name,
            if pass { "pass" } else { "FAIL" },
            value,
            tol
        );
    };

    // <Px, u> == <x, P^T u> over random draws
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mut x = inrtomo::ImageVec::zeros(&problem.grid);
        for v in x.values.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut u = Sinogram::zeros(&problem.geom);
        for v in u.values.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let px = forward_project(&x, &problem.geom)?;
        let ptu = back_project(&u, &problem.grid)?;
        let a: f64 = px.values.iter().zip(&u.values).map(|(p, q)| p * q).sum();
        let b: f64 = ptu.values.iter().zip(&x.values).map(|(p, q)| p * q).sum();
        let denom = a.abs().max(b.abs()).max(1e-300);
        worst = worst.max((a - b).abs() / denom);
    }
    report("projector adjoint (relative)", worst, 1e-10);

    let model = init_model(cfg.arch, problem.grid.ndim(), &cfg.inr, &mut rng)?;
    let ctx = GradContext::new(&problem.mask);
    let kind = cfg.loss_kind()?;

    // stochastic with |I| = n must match the exact gradient
    let (exact, _) = exact_gradient_ctx(&ctx, &model, &problem.geom, &problem.y, &kind, None)?;
    let (est, _) = stochastic_gradient_ctx(
        &ctx,
        &model,
        &problem.geom,
        &problem.y,
        &kind,
        problem.mask.n,
        &mut rng,
        None,
    )?;
    let num: f64 = exact
        .iter()
        .zip(&est.grad)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = exact.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
    report("full-batch exactness (relative)", num / den, 1e-12);

    // per-component central differences on a strided subset; near-zero
    // components are skipped (round-off noise dominates them), as are
    // components sitting on a ReLU kink (detected by step halving)
    let theta = flatten_params(&model);
    let h = 1e-5;
    let stride = (theta.len() / 64).max(1);
    let floor = 1e-3 * exact.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut probe = theta.clone();
    let mut worst_fd = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for i in (0..theta.len()).step_by(stride) {
        if exact[i].abs() < floor {
            continue;
        }
        let mut fd_at = |step: f64| -> Result<f64> {
            probe[i] = theta[i] + step;
            let up = loss_at_theta(&model, &probe, &ctx, &problem.geom, &problem.y, &kind, None)?;
            probe[i] = theta[i] - step;
            let dn = loss_at_theta(&model, &probe, &ctx, &problem.geom, &problem.y, &kind, None)?;
            probe[i] = theta[i];
            Ok((up - dn) / (2.0 * step))
        };
        // a kink between theta-h and theta+h makes the FD estimate step-size
        // dependent; the loss is nondifferentiable there, so skip it
        let fd = fd_at(h)?;
        let fd_half = fd_at(0.5 * h)?;
        if (fd - fd_half).abs() > 1e-7 * exact[i].abs() {
            skipped += 1;
            continue;
        }
        worst_fd = worst_fd.max((fd - exact[i]).abs() / exact[i].abs());
        checked += 1;
    }
    if checked == 0 {
        println!("end-to-end per-component FD: FAIL (no checkable components)");
        ok = false;
    } else {
        report("end-to-end per-component FD (relative)", worst_fd, 1e-5);
        if skipped > 0 {
            println!("  ({checked} components checked, {skipped} on activation kinks skipped)");
        }
    }

    Ok(ok)
}
