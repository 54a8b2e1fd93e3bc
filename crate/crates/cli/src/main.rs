use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tednet::gradcheck;
use tednet::metrics::evaluate;
use tednet::phantom::{generate_phantoms, PhantomSpec};
use tednet::training::{train_from, Pair};
use tednet::weights::{load_params, save_params};
use tednet::{plan_shapes, tile_denoise, ImageVolume, Preset, RunConfig, TedNet};

/// Transformer encoder–decoder denoiser.
#[derive(Debug, Parser)]
#[command(name = "tednet", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Starting configuration.
    #[arg(long, global = true, default_value = "paper", value_parser = parse_preset)]
    preset: Preset,
    /// `key = value` overrides applied on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic clean/noisy pair of volumes to a directory.
    GenData {
        #[arg(long = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        /// Extra noise proportional to the clean intensity.
        #[arg(long, default_value_t = 0.0)]
        dose_scale: f64,
    },
    /// Fit parameters on the volumes in a `gen-data` directory.
    Train {
        /// Directory holding `noisy.tdv` and `clean.tdv`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Parameter file to write.
        #[arg(long = "out")]
        out: PathBuf,
        /// Also write the per-epoch loss log here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from these parameters instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Denoise every image of a volume with overlapping patches.
    Denoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long = "out")]
        out: PathBuf,
    },
    /// Compare a volume against a reference and print SSIM and RMSE as JSON.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Write the JSON report here as well as to stdout.
        #[arg(long = "out")]
        out: Option<PathBuf>,
    },
    /// Print the stage-by-stage shape plan of the configured model.
    ShapeCheck,
    /// Compare analytic gradients with finite differences in f64.
    Gradcheck {
        /// Skip the full-model check.
        #[arg(long)]
        primitives_only: bool,
    },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: tednet::Error| e.to_string())
}

type CliResult<T = ()> = Result<T, String>;

fn ctx(what: impl std::fmt::Display) -> impl FnOnce(tednet::Error) -> String {
    move |e| format!("{what}: {e}")
}

fn run_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::preset(common.preset);
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.apply(&text).map_err(ctx(path.display()))?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn load_volume(path: &Path) -> CliResult<ImageVolume> {
    ImageVolume::load(path).map_err(ctx(path.display()))
}

fn save_volume(path: &Path, v: &ImageVolume) -> CliResult {
    v.save(path).map_err(ctx(path.display()))
}

fn run(cli: Cli) -> CliResult {
    let cfg = run_config(&cli.common)?;
    match cli.command {
        Command::GenData {
            out,
            side,
            count,
            sigma,
            dose_scale,
        } => {
            let spec = PhantomSpec {
                side,
                count,
                noise_sigma: sigma,
                dose_scale,
                seed: cfg.train.seed,
                ..PhantomSpec::default()
            };
            let (clean, noisy) = generate_phantoms(&spec).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
            save_volume(&out.join("clean.tdv"), &clean)?;
            save_volume(&out.join("noisy.tdv"), &noisy)?;
            println!("wrote {count} pairs of {side}×{side} images to {}", out.display());
        }
        Command::Train {
            input,
            out,
            log,
            resume,
        } => {
            let noisy = load_volume(&input.join("noisy.tdv"))?;
            let clean = load_volume(&input.join("clean.tdv"))?;
            if (noisy.count, noisy.height, noisy.width) != (clean.count, clean.height, clean.width) {
                return Err("noisy and clean volumes differ in size".into());
            }
            let data: Vec<Pair> = noisy.images().into_iter().zip(clean.images()).collect();
            let net = TedNet::new(cfg.model.clone()).map_err(|e| e.to_string())?;
            let init = match &resume {
                Some(p) => load_params(p, &net).map_err(ctx(p.display()))?,
                None => net.init_params(cfg.train.seed),
            };
            let mut log_text = String::new();
            let outcome = train_from(&net, init, &data, &cfg.train, |r| {
                let line = r.log_line();
                eprintln!("{line}");
                log_text.push_str(&line);
                log_text.push('\n');
            })
            .map_err(|e| e.to_string())?;
            save_params(&out, &outcome.params).map_err(ctx(out.display()))?;
            if let Some(path) = log {
                std::fs::write(&path, log_text).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            println!(
                "{} steps, final loss {:.6e}, parameters written to {}",
                outcome.step_losses.len(),
                outcome.step_losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Denoise { input, params, out } => {
            let net = TedNet::new(cfg.model.clone()).map_err(|e| e.to_string())?;
            let p = load_params(&params, &net).map_err(ctx(params.display()))?;
            let vol = load_volume(&input)?;
            let images = vol
                .images()
                .iter()
                .map(|x| tile_denoise(x, &net, &p))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            let (mut lo, mut hi) = vol.range;
            for v in images.iter().flat_map(|t| t.data()) {
                lo = lo.min(*v as f64);
                hi = hi.max(*v as f64);
            }
            let result = ImageVolume::from_images(&images, (lo, hi)).map_err(|e| e.to_string())?;
            save_volume(&out, &result)?;
            println!("denoised {} images into {}", result.count, out.display());
        }
        Command::Eval {
            input,
            reference,
            out,
        } => {
            let test = load_volume(&input)?;
            let reference = load_volume(&reference)?;
            let report = evaluate(&test, &reference).map_err(|e| e.to_string())?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{json}");
            if let Some(path) = out {
                std::fs::write(&path, json + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
            }
        }
        Command::ShapeCheck => {
            let plan = plan_shapes(&cfg.model).map_err(|e| e.to_string())?;
            print!("{}", plan.table());
        }
        Command::Gradcheck { primitives_only } => {
            let seed = cfg.train.seed;
            let mut checks = gradcheck::primitive_suite(seed).map_err(|e| e.to_string())?;
            checks.push(gradcheck::transformer_block_check(seed).map_err(|e| e.to_string())?);
            if !primitives_only {
                checks.push(gradcheck::model_check(seed).map_err(|e| e.to_string())?);
            }
            let mut failed = 0;
            for c in &checks {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!("{status:<4} {:<20} max rel err {:.3e} over {} entries", c.name, c.max_rel_err, c.entries);
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                return Err(format!(
                    "{failed} gradient checks exceed tolerance {:e}",
                    gradcheck::TOLERANCE
                ));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
