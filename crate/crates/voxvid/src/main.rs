use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use voxvid::commands;
use voxvid::config::Overrides;
use voxvid::error::VoxvidError;

#[derive(Parser)]
#[command(
    name = "voxvid",
    version,
    about = "Volumetric video codec on learned voxel radiance fields"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a synthetic multi-view dataset from a scene spec.
    Generate {
        /// Scene spec TOML; see scenes/ for examples.
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        /// Built-in scene: `toy` or `toy-static`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Train and encode a dataset into a bitstream (plus run manifest).
    Encode {
        #[arg(long)]
        dataset: PathBuf,
        /// TOML config file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long = "group-size")]
        group_size: Option<usize>,
        #[arg(long = "iters-i")]
        iters_i: Option<usize>,
        #[arg(long = "iters-p")]
        iters_p: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Coefficient grid dimension N (grid is N^3; basis scales halve).
        #[arg(long = "grid-dims")]
        grid_dims: Option<usize>,
        /// Freeze quantization steps at their initial value.
        #[arg(long = "uniform-q")]
        uniform_q: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Decode a bitstream into per-frame field dumps.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Render images from a bitstream or a decoded directory.
    Render {
        /// A `.vxv` bitstream or a directory of `.vxf` field dumps.
        #[arg(long)]
        input: PathBuf,
        /// Dataset directory or a cameras.txt file.
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        frame: Option<u32>,
        #[arg(long)]
        view: Option<usize>,
        /// Output image (single-view mode).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Render every frame and camera into this directory, mirroring the
        /// dataset layout.
        #[arg(long = "out-dir")]
        out_dir: Option<PathBuf>,
    },
    /// PSNR/SSIM of rendered images against dataset ground truth.
    Metrics {
        #[arg(long)]
        rendered: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Bjontegaard delta rate between two `rate,psnr` CSV curves.
    Bdrate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

fn run(cli: Cli) -> voxvid::Result<()> {
    match cli.cmd {
        Cmd::Generate { spec, preset, out_dir } => {
            match (spec, preset) {
                (Some(path), None) => commands::cmd_generate(&path, &out_dir),
                (None, Some(name)) => {
                    let spec = commands::builtin_scene(&name).ok_or_else(|| {
                        VoxvidError::Usage(format!("unknown preset `{name}`"))
                    })?;
                    voxvid::dataset::generate_dataset(&spec, &out_dir)?;
                    Ok(())
                }
                _ => Err(VoxvidError::Usage("generate needs --spec or --preset".into())),
            }
        }
        Cmd::Encode {
            dataset,
            config,
            lambda,
            alpha,
            group_size,
            iters_i,
            iters_p,
            seed,
            grid_dims,
            uniform_q,
            out,
            quiet,
        } => {
            let overrides = Overrides {
                lambda,
                alpha,
                group_size,
                iters_i,
                iters_p,
                seed,
                grid_dim: grid_dims,
                adaptive_q: if uniform_q { Some(false) } else { None },
            };
            commands::cmd_encode(&dataset, config.as_deref(), &overrides, &out, quiet)?;
            Ok(())
        }
        Cmd::Decode { input, out_dir } => {
            let (info, frames) = commands::cmd_decode(&input, &out_dir)?;
            eprintln!(
                "decoded {} frames ({} grids each) into {}",
                frames.len(),
                info.grid_dims.len(),
                out_dir.display()
            );
            Ok(())
        }
        Cmd::Render { input, cameras, frame, view, out, out_dir } => commands::cmd_render(
            &input,
            &cameras,
            frame,
            view,
            out.as_deref(),
            out_dir.as_deref(),
        ),
        Cmd::Metrics { rendered, dataset, csv } => {
            let rows = commands::cmd_metrics(&rendered, &dataset, csv.as_deref())?;
            println!("frame cam  kind   psnr      ssim");
            let mut sums = [(0.0f64, 0.0f64, 0usize); 2];
            for r in &rows {
                let kind = if r.is_test { "test" } else { "train" };
                let p = if r.psnr.is_infinite() { "inf".into() } else { format!("{:.3}", r.psnr) };
                println!("{:<5} {:<4} {:<6} {:<9} {:.5}", r.frame, r.cam, kind, p, r.ssim);
                let k = usize::from(r.is_test);
                if r.psnr.is_finite() {
                    sums[k].0 += r.psnr;
                }
                sums[k].1 += r.ssim;
                sums[k].2 += 1;
            }
            for (k, name) in [(0usize, "train"), (1, "test")] {
                if sums[k].2 > 0 {
                    println!(
                        "mean {name}: psnr {:.3} ssim {:.5}",
                        sums[k].0 / sums[k].2 as f64,
                        sums[k].1 / sums[k].2 as f64
                    );
                }
            }
            Ok(())
        }
        Cmd::Bdrate { a, b } => {
            let d = commands::cmd_bdrate(&a, &b)?;
            println!("bd-rate: {d:.2}%");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
