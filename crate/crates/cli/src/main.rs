//! `oval`: affordance grounding, evaluation, ablations, mock serving and
//! grasp planning.
//!
//! Exit codes: 0 success, 1 backend/transport failure, 2 usage or invalid
//! input, 3 semantic failure (nothing grounded, mask too small), 4 depth hole.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oval_core::metrics::Aggregation;
use oval_core::pipeline::Ablation;

use commands::{Exit, Failure, GraspArgs, GroundArgs};
use config::{EffectiveConfig, Overrides};

#[derive(Parser)]
#[command(name = "oval", version, about = "Open-vocabulary affordance grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    /// TOML or JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Serve backend calls from a mock script instead of HTTP.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Base URL for detect/segment/chat (overrides OVAL_BACKEND_BASE).
    #[arg(long)]
    backend_base: Option<String>,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    #[arg(long)]
    confidence_floor: Option<f64>,
    #[arg(long)]
    max_reprompts: Option<u32>,
    /// Comma-separated object vocabulary.
    #[arg(long, value_delimiter = ',')]
    objects: Option<Vec<String>>,
}

#[derive(Args)]
struct EvalOpts {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = parse_aggregation)]
    aggregation: Option<Aggregation>,
    #[arg(long)]
    beta: Option<f64>,
    /// Distance-weighted F-measure instead of the uniform one.
    #[arg(long)]
    distance_weighting: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Ground one task on one image.
    Ground {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        task: String,
        /// Bare affordance word, used by vlm-only and for the overlay colour.
        #[arg(long)]
        affordance: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score every (record, affordance) pair of a manifest.
    Eval {
        #[command(flatten)]
        opts: EvalOpts,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate all three ablations side by side.
    Ablation {
        #[command(flatten)]
        opts: EvalOpts,
        #[command(flatten)]
        common: Common,
    },
    /// Serve a mock script over HTTP until interrupted.
    MockServe {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        bind: String,
    },
    /// Top-down grasp from a mask and a depth image.
    Grasp {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        planner_url: Option<String>,
        /// Fall back to the built-in planner when the external one is unreachable.
        #[arg(long)]
        fallback: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate the synthetic fixture corpus.
    #[command(hide = true)]
    GenFixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse::<Ablation>().map_err(|e| e.to_string())
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    match s {
        "per-affordance-mean" => Ok(Aggregation::PerAffordanceMean),
        "per-image-mean" => Ok(Aggregation::PerImageMean),
        _ => Err(format!("unknown aggregation {s:?} (per-affordance-mean | per-image-mean)")),
    }
}

fn overrides(common: &Common) -> Overrides {
    Overrides {
        backend_base: common.backend_base.clone(),
        mock_script: common.mock_script.clone(),
        ablation: common.ablation,
        confidence_floor: common.confidence_floor,
        max_reprompts: common.max_reprompts,
        objects: common.objects.clone(),
        ..Overrides::default()
    }
}

fn eval_overrides(opts: &EvalOpts, common: &Common) -> Overrides {
    Overrides {
        workers: opts.workers,
        aggregation: opts.aggregation,
        beta: opts.beta,
        distance_weighting: opts.distance_weighting,
        ..overrides(common)
    }
}

fn resolve(file: Option<&PathBuf>, flags: &Overrides) -> Result<EffectiveConfig, Failure> {
    EffectiveConfig::resolve(file.map(|p| p.as_path()), flags, |k| std::env::var(k).ok()).map_err(|error| Failure {
        code: Exit::Usage,
        error,
    })
}

fn run(cli: Cli) -> commands::Outcome {
    match cli.command {
        Command::Ground {
            image,
            task,
            affordance,
            out,
            common,
        } => {
            let cfg = resolve(common.config.as_ref(), &overrides(&common))?;
            commands::ground(
                GroundArgs {
                    image: &image,
                    task: &task,
                    affordance: affordance.as_deref(),
                    out: &out,
                },
                &cfg,
            )
        }
        Command::Eval { opts, common } => {
            let cfg = resolve(common.config.as_ref(), &eval_overrides(&opts, &common))?;
            commands::eval(&opts.manifest, &cfg, &opts.out)
        }
        Command::Ablation { opts, common } => {
            let cfg = resolve(common.config.as_ref(), &eval_overrides(&opts, &common))?;
            commands::ablation(&opts.manifest, &cfg, &opts.out)
        }
        Command::MockServe { script, bind } => commands::mock_serve(&script, &bind),
        Command::Grasp {
            mask,
            depth,
            intrinsics,
            planner_url,
            fallback,
            config,
            out,
        } => {
            let flags = Overrides {
                planner_url,
                planner_fallback: fallback,
                ..Overrides::default()
            };
            let cfg = resolve(config.as_ref(), &flags)?;
            commands::grasp(
                GraspArgs {
                    mask: &mask,
                    depth: &depth,
                    intrinsics: &intrinsics,
                    out: &out,
                },
                &cfg,
            )
        }
        Command::GenFixtures { out } => commands::gen_fixtures(&out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Exit::Usage as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code as u8)
        }
    }
}
