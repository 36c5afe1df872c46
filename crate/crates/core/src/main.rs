use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use splatrig::ablation::{ablation_run, ALL_MODES};
use splatrig::dataset::{Dataset, Split};
use splatrig::deform::PriorMode;
use splatrig::error::{Error, Result};
use splatrig::gradcheck::{run_all, GradcheckConfig};
use splatrig::imgbuf::PngEncoding;
use splatrig::metrics::evaluate;
use splatrig::scene::Camera;
use splatrig::synth::{generate, SynthConfig};
use splatrig::train::{checkpoint, reanimate, TrainConfig, TrainState};

#[derive(Parser, Debug)]
#[command(name = "splatrig", version, about = "Rigged Gaussian head avatars on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_size)]
        size: Option<(usize, usize)>,
    },
    /// Train a model and write a checkpoint. Log lines go to stdout.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "learnable")]
        prior: PriorMode,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Resume from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Render one rig state from a checkpoint to a PNG.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `zeros` or a JSON array of expression coefficients.
        #[arg(long, default_value = "zeros")]
        exp: String,
        /// `zeros` or a JSON array [yaw, pitch, roll, jaw].
        #[arg(long, default_value = "zeros")]
        pose: String,
        /// Rescales the camera to WxH.
        #[arg(long, value_parser = parse_size)]
        size: Option<(usize, usize)>,
    },
    /// Render a drive file to numbered PNGs.
    Reanimate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        drive: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split and print the JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "setting1")]
        split: Split,
        /// Print the head-masked aggregate in the summary line.
        #[arg(long)]
        masked: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every prior mode with the same seed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare every differentiable op against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err(format!("size must be positive, got {s:?}"));
    }
    Ok((w, h))
}

fn parse_vector(s: &str, len: usize, what: &str) -> Result<Vec<f64>> {
    if s == "zeros" {
        return Ok(vec![0.0; len]);
    }
    let v: Vec<f64> =
        serde_json::from_str(s).map_err(|e| Error::Argument(format!("{what}: expected `zeros` or a JSON array ({e})")))?;
    if v.len() != len {
        return Err(Error::Argument(format!("{what}: expected {len} values, got {}", v.len())));
    }
    Ok(v)
}

fn write_report<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Argument(e.to_string()))?;
    match out {
        Some(p) => fs::write(p, text + "\n").map_err(|e| Error::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn rescale(camera: &Camera, size: Option<(usize, usize)>) -> Camera {
    let mut c = camera.clone();
    if let Some((w, h)) = size {
        let (sx, sy) = (w as f64 / c.width as f64, h as f64 / c.height as f64);
        c.fx *= sx;
        c.cx *= sx;
        c.fy *= sy;
        c.cy *= sy;
        c.width = w;
        c.height = h;
    }
    c
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { out, seed, size } => {
            let mut cfg = SynthConfig { seed, ..Default::default() };
            if let Some((w, h)) = size {
                cfg.width = w;
                cfg.height = h;
            }
            let summary = generate(&cfg, &out)?;
            eprintln!(
                "wrote {} frames ({} vertices, {} init points) to {}",
                summary.frames,
                summary.vertices,
                summary.init_points,
                out.display()
            );
        }
        Command::Train { data, out, prior, iters, seed, ckpt } => {
            let ds = Dataset::load(&data)?;
            let mut st = match ckpt {
                Some(p) => checkpoint::load(&p)?.into_state(&ds)?,
                None => TrainState::new(&ds, TrainConfig { prior_mode: prior, seed, ..Default::default() })?,
            };
            if let Some(n) = iters {
                st.config.iterations = n;
                st.config.densify_until = st.config.densify_until.min(n);
            }
            st.config.validate()?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            st.run(&ds, Some(&mut lock))?;
            lock.flush().map_err(|e| Error::io("stdout", e))?;
            checkpoint::save(&st, &ds.mesh, &out)?;
        }
        Command::Render { ckpt, out, exp, pose, size } => {
            let ck = checkpoint::load(&ckpt)?;
            let exp = parse_vector(&exp, ck.mesh.expression_count(), "--exp")?;
            let p = parse_vector(&pose, 4, "--pose")?;
            let cam = ck
                .manifest
                .cameras
                .first()
                .ok_or_else(|| Error::Schema("checkpoint has no camera table".into()))?;
            let img = ck.model.render(&ck.mesh, &exp, [p[0], p[1], p[2], p[3]], None, &rescale(cam, size))?;
            img.save_png(&out, PngEncoding::Gamma22)?;
        }
        Command::Reanimate { ckpt, drive, out } => {
            let ck = checkpoint::load(&ckpt)?;
            let entries = reanimate::read_drive(&drive)?;
            let frames = reanimate(&ck.model, &ck.mesh, &entries, &ck.manifest.cameras)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (i, img) in frames.iter().enumerate() {
                img.save_png(&out.join(format!("{i:05}.png")), PngEncoding::Gamma22)?;
            }
            eprintln!("wrote {} frames to {}", frames.len(), out.display());
        }
        Command::Eval { ckpt, data, split, masked, out } => {
            let ck = checkpoint::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            if ds.fingerprint() != ck.manifest.dataset_fingerprint {
                log::warn!("evaluating on a dataset other than the training one");
            }
            let report = evaluate(&ck.model, &ds, split, ck.manifest.iteration)?;
            write_report(&report, out.as_deref())?;
            eprintln!(
                "{split} {} PSNR {:.3} dB",
                if masked { "masked" } else { "full-frame" },
                report.headline_psnr(masked)
            );
        }
        Command::Ablate { data, out, iters, seed } => {
            let ds = Dataset::load(&data)?;
            let mut cfg = TrainConfig { seed, ..Default::default() };
            if let Some(n) = iters {
                cfg.iterations = n;
                cfg.densify_until = cfg.densify_until.min(n);
            }
            let report = ablation_run(&ds, &ALL_MODES, &cfg)?;
            eprint!("{}", report.table());
            write_report(&report, out.as_deref())?;
        }
        Command::Gradcheck { seed, out } => {
            let reports = run_all(&GradcheckConfig { seed, ..Default::default() })?;
            for r in &reports {
                eprintln!(
                    "{:<24} {} max rel error {:.2e} ({} instances)",
                    r.name,
                    if r.passed { "ok  " } else { "FAIL" },
                    r.max_rel_error,
                    r.instances
                );
            }
            if let Some(p) = out {
                write_report(&reports, Some(&p))?;
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Training(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn fail(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message.lines().next().unwrap_or("") });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            fail("usage", &e.to_string().replace("error: ", ""));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            fail(e.kind(), &e.to_string());
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
