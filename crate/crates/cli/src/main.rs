//! Command-line front end for the staged alignment pipeline.
//!
//! Every stage writes content-addressed artifacts under `--out`; re-running
//! a stage with unchanged inputs is a no-op. Exit code 0 on success, a
//! category-specific nonzero code on failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use motion_align::config::RunConfig;
use motion_align::diffusion::SpaceKind;
use motion_align::error::Error;
use motion_align::pipeline::{AblationGrid, EvalTarget, Pipeline};

#[derive(Parser)]
#[command(name = "motion-align", version, about = "Desk-scale text-to-motion alignment pipeline")]
struct Cli {
    /// Run configuration (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Raw,
    Latent,
}

impl From<SpaceArg> for SpaceKind {
    fn from(s: SpaceArg) -> SpaceKind {
        match s {
            SpaceArg::Raw => SpaceKind::Raw,
            SpaceArg::Latent => SpaceKind::Latent,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Base,
    Aligned,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the toy dataset splits.
    GenData,
    /// Train the motion VAE.
    TrainVae,
    /// Train a diffusion generator.
    TrainDiffusion {
        #[arg(long, value_enum)]
        space: SpaceArg,
    },
    /// Train the contrastive text-motion ranker.
    TrainRanker,
    /// Build the ranked preference dataset.
    BuildPam,
    /// Align the target model against the frozen reference.
    Align,
    /// Evaluate a checkpoint with the full metric suite.
    Eval {
        #[arg(long, value_enum, default_value = "aligned")]
        model: ModelArg,
    },
    /// Run the ablation grid and emit one CSV.
    Ablate {
        /// Grid file (TOML); a default scorer x selection grid otherwise.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Aggregate evaluation reports.
    Report,
    /// Run the pipeline in stage order.
    Run {
        /// Stop after this stage (inclusive). Runs everything by default.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::desk_default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

const STAGE_ORDER: &[&str] = &[
    "gen-data",
    "train-vae",
    "train-diffusion-raw",
    "train-diffusion-latent",
    "train-ranker",
    "build-pam",
    "align",
    "eval-base",
    "eval-aligned",
    "report",
];

fn run_through(pipeline: &Pipeline, last: Option<&str>) -> Result<(), Error> {
    if let Some(name) = last {
        if !STAGE_ORDER.contains(&name) {
            return Err(Error::Config(format!(
                "unknown stage {name}; expected one of {STAGE_ORDER:?}"
            )));
        }
    }
    for &stage in STAGE_ORDER {
        let summary = match stage {
            "gen-data" => pipeline.gen_data()?,
            "train-vae" => pipeline.train_vae()?,
            "train-diffusion-raw" => pipeline.train_diffusion(SpaceKind::Raw)?,
            "train-diffusion-latent" => pipeline.train_diffusion(SpaceKind::Latent)?,
            "train-ranker" => pipeline.train_ranker()?,
            "build-pam" => {
                if pipeline.config.align.online {
                    println!("build-pam: skipped (online alignment)");
                    if last == Some(stage) {
                        break;
                    }
                    continue;
                }
                pipeline.build_pam()?
            }
            "align" => pipeline.align()?,
            "eval-base" => pipeline.eval(EvalTarget::Base)?,
            "eval-aligned" => pipeline.eval(EvalTarget::Aligned)?,
            "report" => pipeline.report()?,
            _ => unreachable!(),
        };
        print_summary(&summary);
        if last == Some(stage) {
            break;
        }
    }
    Ok(())
}

fn print_summary(summary: &motion_align::artifacts::StageSummary) {
    let stats: Vec<String> = summary
        .stats
        .iter()
        .map(|(k, v)| format!("{k}={v:.6}"))
        .collect();
    println!(
        "{}: key={} outputs=[{}] {}",
        summary.stage,
        &summary.key[..16],
        summary
            .outputs
            .keys()
            .cloned()
            .collect::<Vec<_>>()
            .join(", "),
        stats.join(" ")
    );
}

fn run(cli: &Cli) -> Result<(), Error> {
    let config = load_config(cli)?;
    if let Cmd::ShowConfig = cli.cmd {
        println!("{}", config.to_toml_string()?);
        return Ok(());
    }
    let pipeline = Pipeline::new(config, &cli.out)?;
    match &cli.cmd {
        Cmd::GenData => print_summary(&pipeline.gen_data()?),
        Cmd::TrainVae => print_summary(&pipeline.train_vae()?),
        Cmd::TrainDiffusion { space } => {
            print_summary(&pipeline.train_diffusion((*space).into())?)
        }
        Cmd::TrainRanker => print_summary(&pipeline.train_ranker()?),
        Cmd::BuildPam => print_summary(&pipeline.build_pam()?),
        Cmd::Align => print_summary(&pipeline.align()?),
        Cmd::Eval { model } => {
            let target = match model {
                ModelArg::Base => EvalTarget::Base,
                ModelArg::Aligned => EvalTarget::Aligned,
            };
            let summary = pipeline.eval(target)?;
            print_summary(&summary);
            let csv = pipeline.store.output_path(&summary, "eval.csv")?;
            println!("{}", std::fs::read_to_string(csv)?);
        }
        Cmd::Ablate { grid } => {
            let grid = match grid {
                Some(path) => AblationGrid::from_path(path)?,
                None => AblationGrid::default_grid(),
            };
            let summary = pipeline.ablate(&grid)?;
            print_summary(&summary);
            let csv = pipeline.store.output_path(&summary, "ablation.csv")?;
            println!("{}", std::fs::read_to_string(csv)?);
        }
        Cmd::Report => {
            let summary = pipeline.report()?;
            print_summary(&summary);
            let csv = pipeline.store.output_path(&summary, "report.csv")?;
            println!("{}", std::fs::read_to_string(csv)?);
        }
        Cmd::Run { stage } => run_through(&pipeline, stage.as_deref())?,
        Cmd::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
