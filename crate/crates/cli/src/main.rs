//! `dernn`: simulate, reconstruct and train snapshot spectral imaging models.
//!
//! Exit codes: 0 success, 1 self-test failure, 2 format or I/O error,
//! 3 shape or configuration error, 4 missing dependency, 5 divergence.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use dernn::cassi::{forward_measure, HsiCube, Mask2D, NoiseConfig, SensingOperator};
use dernn::den::DenConfig;
use dernn::hqs::{run_hqs, trace_csv, DenoiserKind, InitMode, ReconConfig};
use dernn::lnlt::LnltConfig;
use dernn::metrics::MetricRow;
use dernn::selftest::{self, Level, Tamper};
use dernn::train::{init_params, loss_curve_csv, toy_recon, train_overfit, TrainConfig};
use dernn::{io, Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "dernn", version, about = "Snapshot spectral imaging reconstruction toolkit")]
struct Cli {
    /// key = value file supplying defaults for any long flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    None,
    Shot,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic cube.
    Phantom {
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        bands: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure a cube through a coded aperture.
    Simulate {
        #[arg(long)]
        truth: PathBuf,
        /// 2D mask cube (one channel); otherwise a random binary mask.
        #[arg(long, conflicts_with = "mask_seed")]
        mask: Option<PathBuf>,
        #[arg(long)]
        mask_seed: Option<u64>,
        #[arg(long)]
        step: Option<usize>,
        #[arg(long, value_enum)]
        noise: Option<NoiseArg>,
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the shifted mask; defaults to `<out stem>.mask.hsic`.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Reconstruct a cube from a measurement.
    Reconstruct {
        #[arg(long)]
        measurement: PathBuf,
        /// Shifted mask `[H, W', B]`, or a one-channel 2D mask with `--bands`.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        bands: Option<usize>,
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        denoiser: Option<String>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        use_den: Option<bool>,
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        mu1: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        tv_iters: Option<usize>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the built-in verification suite.
    Selftest {
        #[arg(long)]
        level: Option<String>,
        /// Corrupt a fixture to confirm the suite catches it.
        #[arg(long, hide = true)]
        tamper_conv_sign: bool,
    },
    /// Overfit the learned model to one cube.
    Train {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        warmup: Option<usize>,
        /// Square crop side; defaults to the full cube.
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        mask_seed: Option<u64>,
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        base_channels: Option<usize>,
        #[arg(long)]
        window_size: Option<usize>,
        #[arg(long)]
        window_count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
    },
}

/// Resolves settings as flag, then config file, then default, and rejects
/// config keys no command read.
struct Settings {
    file: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        Ok(Self {
            file: path.map(io::read_config).transpose()?.unwrap_or_default(),
            used: RefCell::default(),
        })
    }

    fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        Ok(self.opt(key, flag)?.unwrap_or(default))
    }

    fn opt<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        self.used.borrow_mut().insert(key.to_string());
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::InvalidConfig(format!("config `{key}`: cannot parse `{v}`")))
            })
            .transpose()
    }

    fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.file.keys().find(|k| !used.contains(*k)) {
            Some(k) => Err(Error::InvalidConfig(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn read_cube(path: &Path) -> Result<HsiCube> {
    HsiCube::new(io::read_hsic(path)?)
}

fn default_mask_out(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.mask.hsic"))
}

fn plane(t: Tensor) -> Result<Tensor> {
    let (h, w, c) = t.dims3()?;
    if c != 1 {
        return Err(Error::InvalidShape(format!("expected a one-channel plane, got {h}x{w}x{c}")));
    }
    t.reshape(&[h, w])
}

fn phantom_cmd(s: &Settings, height: Option<usize>, width: Option<usize>, bands: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let (h, w, b) = (s.get("height", height, 64)?, s.get("width", width, 64)?, s.get("bands", bands, 8)?);
    let seed = s.get("seed", seed, 0)?;
    s.finish()?;
    io::write_hsic(dernn::phantom::phantom(h, w, b, seed)?.tensor(), out)
}

#[allow(clippy::too_many_arguments)]
fn simulate_cmd(
    s: &Settings,
    truth: &Path,
    mask: Option<&Path>,
    mask_seed: Option<u64>,
    step: Option<usize>,
    noise: Option<NoiseArg>,
    bits: Option<u32>,
    seed: Option<u64>,
    out: &Path,
    mask_out: Option<&Path>,
) -> Result<()> {
    let step = s.get("step", step, 2)?;
    let seed = s.get("seed", seed, 0)?;
    let mask_seed = s.get("mask-seed", mask_seed, seed)?;
    let noise = match s.get("noise", noise.map(|n| matches!(n, NoiseArg::Shot)).map(NoiseFlag), NoiseFlag(false))? {
        NoiseFlag(true) => NoiseConfig::shot(s.get("bits", bits, 11)?, seed),
        NoiseFlag(false) => {
            s.opt::<u32>("bits", bits)?;
            NoiseConfig::none()
        }
    };
    s.finish()?;
    let truth = read_cube(truth)?;
    let (h, w, b) = truth.dims();
    let mask = match mask {
        Some(p) => Mask2D::new(plane(io::read_hsic(p)?)?)?,
        None => Mask2D::random_binary(h, w, mask_seed)?,
    };
    let op = SensingOperator::from_mask(&mask, b, step)?;
    let y = forward_measure(&truth, &op, &noise)?;
    io::write_hsic(&y.as_column(), out)?;
    io::write_hsic(op.shifted_mask(), &mask_out.map_or_else(|| default_mask_out(out), Path::to_path_buf))?;
    println!("measurement {}x{} written to {}", y.height(), y.width(), out.display());
    Ok(())
}

/// `none` or `shot`, for reading the noise kind from a config file.
struct NoiseFlag(bool);

impl FromStr for NoiseFlag {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "none" => Ok(Self(false)),
            "shot" => Ok(Self(true)),
            _ => Err(()),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn reconstruct_cmd(
    s: &Settings,
    measurement: &Path,
    mask: &Path,
    bands: Option<usize>,
    step: Option<usize>,
    stages: Option<usize>,
    denoiser: Option<String>,
    params: Option<PathBuf>,
    use_den: Option<bool>,
    init: Option<String>,
    sched: [Option<f64>; 3],
    tv_iters: Option<usize>,
    truth: Option<&Path>,
    out: &Path,
    trace: Option<&Path>,
) -> Result<()> {
    let step = s.get("step", step, 2)?;
    let bands = s.opt("bands", bands)?;
    let denoiser: DenoiserKind = s.get("denoiser", denoiser, "tv".into())?.parse()?;
    let mut cfg = ReconConfig::new(1, s.get("stages", stages, 9)?, denoiser);
    cfg.use_den = s.get("use-den", use_den, false)?;
    cfg.init = s.get("init", init, "normalized-adjoint".into())?.parse::<InitMode>()?;
    cfg.mu1 = s.get("mu1", sched[0], cfg.mu1)?;
    cfg.rho = s.get("rho", sched[1], cfg.rho)?;
    cfg.lambda = s.get("lambda", sched[2], cfg.lambda)?;
    cfg.tv_iters = s.get("tv-iters", tv_iters, cfg.tv_iters)?;
    let params_path: Option<PathBuf> = s.opt("params", params)?;
    s.finish()?;

    let y = dernn::cassi::Measurement::new(io::read_hsic(measurement)?)?;
    let mask = io::read_hsic(mask)?;
    let op = match bands {
        Some(b) => SensingOperator::from_mask(&Mask2D::new(plane(mask)?)?, b, step)?,
        None => SensingOperator::from_shifted(mask, step)?,
    };
    let params = match (&params_path, cfg.needs_params()) {
        (Some(p), true) => Some(io::read_params(p).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Error::Missing(format!("parameter file {}", p.display()))
            }
            e => e,
        })?),
        (None, true) => return Err(Error::Missing("--params is required by the learned components".into())),
        (_, false) => None,
    };
    if let Some(p) = &params {
        if cfg.use_den {
            cfg.den = DenConfig::from_params(p)?;
        }
        if cfg.denoiser == DenoiserKind::Lnlt {
            cfg.lnlt = LnltConfig::from_params(p)?;
        }
    }
    let truth = truth.map(read_cube).transpose()?;
    let rec = run_hqs(&y, &op, &cfg, params.as_ref())?;
    io::write_hsic(rec.estimate.tensor(), out)?;
    if let Some(t) = &truth {
        let init = MetricRow::evaluate("init", &rec.init, t)?;
        let fin = MetricRow::evaluate("final", &rec.estimate, t)?;
        for row in [init, fin] {
            println!("{:<5}  PSNR {:.4} dB  SSIM {:.6}  SAM {:.4} deg", row.scene_id, row.psnr, row.ssim, row.sam);
        }
    }
    if let Some(path) = trace {
        io::write_atomic(path, trace_csv(&rec, truth.as_ref())?.as_bytes())?;
    }
    println!(
        "{} stages, residual {:.6e} -> {:.6e}",
        rec.trace.len(),
        rec.initial_residual,
        rec.final_residual()
    );
    Ok(())
}

fn selftest_cmd(s: &Settings, level: Option<String>, tamper: bool) -> Result<bool> {
    let level: Level = s.get("level", level, "quick".into())?.parse()?;
    s.finish()?;
    let report = selftest::run(level, if tamper { Tamper::ConvSign } else { Tamper::None });
    print!("{}", report.table());
    eprintln!("elapsed {:.2?}", report.elapsed);
    if !report.passed() {
        println!("failed: {}", report.failures().join(", "));
    }
    Ok(report.passed())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    s: &Settings,
    truth: &Path,
    stages: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    warmup: Option<usize>,
    patch: Option<usize>,
    mask_seed: Option<u64>,
    step: Option<usize>,
    arch: [Option<usize>; 3],
    out: &Path,
    curve: Option<&Path>,
) -> Result<()> {
    let truth = read_cube(truth)?;
    let bands = truth.bands();
    let mut recon = toy_recon(bands, s.get("stages", stages, 3)?);
    recon.lnlt.base_channels = s.get("base-channels", arch[0], recon.lnlt.base_channels)?;
    recon.lnlt.window_size = s.get("window-size", arch[1], recon.lnlt.window_size)?;
    recon.lnlt.window_count = s.get("window-count", arch[2], recon.lnlt.window_count)?;
    let seed = s.get("seed", seed, 0)?;
    let mut cfg = TrainConfig::new(recon, s.get("steps", steps, 500)?, seed);
    cfg.lr = s.get("lr", lr, 2e-3)?;
    cfg.warmup_steps = s.get("warmup", warmup, 20)?;
    cfg.patch = s.opt("patch", patch)?.map(|p| (p, p));
    let mask_seed = s.get("mask-seed", mask_seed, seed)?;
    let step = s.get("step", step, 2)?;
    s.finish()?;

    let op = SensingOperator::from_mask(&Mask2D::random_binary(truth.height(), truth.width(), mask_seed)?, bands, step)?;
    let params = init_params(&cfg.recon, seed);
    let (params, losses) = train_overfit(&truth, &op, params, &cfg)?;
    io::write_params(&params, out)?;
    if let Some(path) = curve {
        io::write_atomic(path, loss_curve_csv(&losses).as_bytes())?;
    }
    let (first, last) = (losses[0].loss, losses[losses.len() - 1].loss);
    println!("{} steps, loss {first:.6e} -> {last:.6e}", losses.len());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let s = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Phantom {
            height,
            width,
            bands,
            seed,
            out,
        } => phantom_cmd(&s, height, width, bands, seed, &out)?,
        Command::Simulate {
            truth,
            mask,
            mask_seed,
            step,
            noise,
            bits,
            seed,
            out,
            mask_out,
        } => simulate_cmd(&s, &truth, mask.as_deref(), mask_seed, step, noise, bits, seed, &out, mask_out.as_deref())?,
        Command::Reconstruct {
            measurement,
            mask,
            bands,
            step,
            stages,
            denoiser,
            params,
            use_den,
            init,
            mu1,
            rho,
            lambda,
            tv_iters,
            truth,
            out,
            trace,
        } => reconstruct_cmd(
            &s,
            &measurement,
            &mask,
            bands,
            step,
            stages,
            denoiser,
            params,
            use_den,
            init,
            [mu1, rho, lambda],
            tv_iters,
            truth.as_deref(),
            &out,
            trace.as_deref(),
        )?,
        Command::Selftest { level, tamper_conv_sign } => return selftest_cmd(&s, level, tamper_conv_sign),
        Command::Train {
            truth,
            stages,
            steps,
            seed,
            lr,
            warmup,
            patch,
            mask_seed,
            step,
            base_channels,
            window_size,
            window_count,
            out,
            curve,
        } => train_cmd(
            &s,
            &truth,
            stages,
            steps,
            seed,
            lr,
            warmup,
            patch,
            mask_seed,
            step,
            [base_channels, window_size, window_count],
            &out,
            curve.as_deref(),
        )?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(dernn::ExitCode::SelftestFailure as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
