mod config;

use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fadenoise::align::align_pair;
use fadenoise::bayer::io::{read_raw, write_ppm, write_raw};
use fadenoise::bayer::isp;
use fadenoise::dataset::{
    load_pairs, make_pairs, split, synthetic_dataset, write_pairs, write_raw_dir,
};
use fadenoise::fanet::{count_macs, Model};
use fadenoise::metrics::{denoise_frame, evaluate, noise_of, prepare, Denoiser};
use fadenoise::noise::{calibrate, load_calibration_dir, NoiseParams, SensorNoiseModel};
use fadenoise::nsma::{partition, train_array, ModelArray, ARRAY_MANIFEST};
use fadenoise::train::{train, train_teacher};
use serde::Serialize;

use crate::config::{load_config, RunConfig};

const OUT_ENV: &str = "FADENOISE_OUT";
const RUN_MANIFEST: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(
    name = "fadenoise",
    version,
    about = "RAW denoising: calibrate, train, evaluate, align"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file, or `default` for built-in settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.batch=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory. Defaults to `$FADENOISE_OUT/<command>` or `runs/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a sensor noise model from a calibration directory.
    Calibrate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Write a synthetic clean dataset and noisy pairs for its held-out split.
    Synth {
        /// Write pairs for every image rather than the held-out split only.
        #[arg(long)]
        all_pairs: bool,
    },
    /// Train a student model (or the teacher with `--teacher`).
    Train {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        teacher: bool,
    },
    /// Train one model per noise subrange.
    TrainArray {
        #[arg(long)]
        models: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Denoise one RAW frame.
    Denoise {
        /// Checkpoint directory or array manifest.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Noise parameters; default is the frame's annotation.
        #[arg(long, requires = "b")]
        a: Option<f64>,
        #[arg(long, requires = "a")]
        b: Option<f64>,
        /// Sensor model for frames annotated only with a gain.
        #[arg(long)]
        sensor: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or array on a pair set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Pair manifest or directory containing `pairs.json`.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        sensor: Option<PathBuf>,
    },
    /// Print GMACs per megapixel of the configured student and teacher.
    Macs {
        #[arg(long, default_value_t = 512)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
    },
    /// Align a noisy/clean RAW pair by global translation.
    Align {
        #[arg(long)]
        noisy: PathBuf,
        #[arg(long)]
        clean: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Calibrate { .. } => "calibrate",
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::TrainArray { .. } => "train-array",
            Command::Denoise { .. } => "denoise",
            Command::Eval { .. } => "eval",
            Command::Macs { .. } => "macs",
            Command::Align { .. } => "align",
        }
    }
}

/// Written once per run next to its outputs.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    outputs: Vec<PathBuf>,
}

fn out_dir(common: &Common, command: &str, fallback: Option<&Path>) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    if let Some(root) = env::var_os(OUT_ENV) {
        return PathBuf::from(root).join(command);
    }
    fallback
        .map(Path::to_path_buf)
        .unwrap_or_else(|| Path::new("runs").join(command))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<PathBuf> {
    fs::write(path, serde_json::to_string_pretty(v)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn load_denoiser(path: &Path) -> Result<Denoiser> {
    let manifest = if path.is_dir() && path.join(ARRAY_MANIFEST).exists() {
        Some(path.join(ARRAY_MANIFEST))
    } else if path.extension().is_some_and(|e| e == "json") {
        Some(path.to_path_buf())
    } else {
        None
    };
    Ok(match manifest {
        Some(m) => Denoiser::Array(
            ModelArray::load(&m).with_context(|| format!("loading array {}", m.display()))?,
        ),
        None => Denoiser::Single(
            Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?,
        ),
    })
}

fn load_sensor(path: Option<&Path>) -> Result<Option<SensorNoiseModel>> {
    path.map(|p| -> Result<SensorNoiseModel> {
        let m: SensorNoiseModel = serde_json::from_str(&fs::read_to_string(p)?)?;
        m.validate()?;
        Ok(m)
    })
    .transpose()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.common.config.as_deref(), &cli.common.overrides)?;
    let name = cli.command.name();
    let mut outputs = Vec::new();
    let out = match &cli.command {
        Command::Train { .. } | Command::TrainArray { .. } => {
            out_dir(&cli.common, name, Some(&cfg.train.out_dir))
        }
        _ => out_dir(&cli.common, name, None),
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    match &cli.command {
        Command::Calibrate { input } => {
            let captures = load_calibration_dir(input)?;
            let (model, fits) = calibrate(&captures)?;
            outputs.push(write_json(&out.join("sensor.json"), &model)?);
            #[derive(Serialize)]
            struct Fit {
                gain: f64,
                params: NoiseParams,
            }
            let fits: Vec<Fit> = captures
                .iter()
                .zip(fits)
                .map(|(c, params)| Fit {
                    gain: c.gain,
                    params,
                })
                .collect();
            outputs.push(write_json(&out.join("captures.json"), &fits)?);
        }
        Command::Synth { all_pairs } => {
            let s = &cfg.synth;
            let images = synthetic_dataset(s.count, s.height, s.width, s.seed)?;
            write_raw_dir(&out.join("clean"), &images)?;
            outputs.push(out.join("clean"));
            let eval_set = if *all_pairs { images } else { split(images).1 };
            let sensor = cfg.train.noise.sensor_model()?;
            let pairs = make_pairs(&eval_set, &sensor, s.pair_seed)?;
            outputs.push(write_pairs(&out.join("pairs"), &pairs)?);
        }
        Command::Train {
            iterations,
            seed,
            teacher,
        } => {
            if let Some(n) = iterations {
                cfg.train.iterations = *n;
            }
            if let Some(s) = seed {
                cfg.train.seed = *s;
            }
            cfg.train.out_dir = out.clone();
            cfg.validate()?;
            let outcome = if *teacher {
                train_teacher(&cfg.train)?
            } else {
                train(&cfg.train)?
            };
            outputs.push(outcome.checkpoint);
            outputs.push(outcome.log);
            if let Some(r) = &outcome.report {
                eprintln!(
                    "held-out RAW PSNR {:.3} dB (noisy input {:.3} dB)",
                    r.model.raw_psnr, r.input.raw_psnr
                );
            }
        }
        Command::TrainArray { models, iterations } => {
            if let Some(n) = models {
                cfg.array.models = *n;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = *n;
            }
            cfg.train.out_dir = out.clone();
            cfg.validate()?;
            let p = partition(
                cfg.train.noise.a_min,
                cfg.train.noise.a_max,
                cfg.array.models,
            )?;
            let (_, outcomes) = train_array(&cfg.train, &p)?;
            outputs.push(out.join(ARRAY_MANIFEST));
            outputs.extend(outcomes.into_iter().map(|o| o.checkpoint));
        }
        Command::Denoise {
            model,
            input,
            a,
            b,
            sensor,
        } => {
            let denoiser = load_denoiser(model)?;
            let sensor = load_sensor(sensor.as_deref())?;
            let noisy = read_raw(input)?;
            let p = match (a, b) {
                (Some(a), Some(b)) => NoiseParams::new(*a, *b)?,
                _ => noise_of(&noisy, sensor.as_ref())?,
            };
            let (m, slot, clamped) = denoiser.route(p.a);
            let frame = prepare(&noisy, denoiser.bayer_multiple())?;
            let mut y = denoise_frame(m, &frame, &p)?;
            y.meta.noise = None;
            let stem = input
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("frame");
            let raw = out.join(format!("{stem}_denoised.pgm"));
            write_raw(&y, &raw)?;
            let rgb = out.join(format!("{stem}_denoised.ppm"));
            write_ppm(&isp(&y, &cfg.train.isp)?, &rgb, false)?;
            outputs.extend([raw, rgb]);
            if clamped {
                eprintln!(
                    "warning: a = {:e} is outside the array range; used slot {slot}",
                    p.a
                );
            }
        }
        Command::Eval {
            model,
            pairs,
            sensor,
        } => {
            let denoiser = load_denoiser(model)?;
            let sensor = load_sensor(sensor.as_deref())?;
            let pairs = load_pairs(pairs)?;
            let report = evaluate(&denoiser, &pairs, &cfg.train.isp, sensor.as_ref())?;
            report.write(&out, "report")?;
            outputs.extend([out.join("report.json"), out.join("report.csv")]);
            println!(
                "{}",
                serde_json::json!({
                    "raw_psnr": report.model.raw_psnr,
                    "raw_ssim": report.model.raw_ssim,
                    "rgb_psnr": report.model.rgb_psnr,
                    "rgb_ssim": report.model.rgb_ssim,
                    "gmacs_per_mp": report.gmacs_per_mp,
                })
            );
        }
        Command::Macs { height, width } => {
            let student = count_macs(&cfg.train.model, *height, *width);
            let teacher = count_macs(&cfg.train.teacher_model, *height, *width);
            println!(
                "{}",
                serde_json::json!({
                    "gmacs_per_mp": student,
                    "teacher_gmacs_per_mp": teacher,
                    "height": height,
                    "width": width,
                })
            );
        }
        Command::Align { noisy, clean } => {
            let n = read_raw(noisy)?;
            let c = read_raw(clean)?;
            let a = align_pair(&n, &c, &cfg.align)?;
            let (pn, pc) = (out.join("noisy.pgm"), out.join("clean.pgm"));
            write_raw(&a.noisy, &pn)?;
            write_raw(&a.clean, &pc)?;
            #[derive(Serialize)]
            struct AlignReport<'a> {
                shift: (i64, i64),
                flow: &'a fadenoise::align::FlowEstimate,
            }
            let report = AlignReport {
                shift: a.shift,
                flow: &a.flow,
            };
            outputs.extend([pn, pc, write_json(&out.join("flow.json"), &report)?]);
        }
    }

    let manifest = RunManifest {
        command: name,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.train.seed,
        config: &cfg,
        outputs,
    };
    write_json(&out.join(RUN_MANIFEST), &manifest)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<fadenoise::Error>(),
                    Some(fadenoise::Error::Usage(_))
                )
            });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
