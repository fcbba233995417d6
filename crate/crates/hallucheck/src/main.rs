use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand, ValueEnum};
use hallucheck::pipeline::{self, Context, Profile};
use hallucheck::records::Mode;
use hallucheck::{Error, PipelineConfig};
use hallucheck_core::perturb::Split;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "hallucheck", version, about = "Detect translation hallucinations from token contributions")]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Detector,
    Analysis,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Detector => Profile::Detector,
            ProfileArg::Analysis => Profile::Analysis,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Lrp,
    Attention,
}

#[derive(Subcommand)]
enum Command {
    /// Train the translation model on the corpus minus its held-out head.
    TrainModel,
    /// Perturb held-out sources, translate and label contrastive pairs.
    GenerateData {
        #[arg(long, value_enum, default_value = "detector")]
        profile: ProfileArg,
    },
    /// Export per-step source contributions, heatmap grids and features.
    Contributions {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "detector")]
        profile: ProfileArg,
    },
    /// Effect sizes and curves of hallucinated vs original outputs.
    Analyze {
        #[arg(long, value_enum, default_value = "detector")]
        profile: ProfileArg,
    },
    /// Train every detector for every configured run.
    TrainDetector,
    /// Apply one detector file to a split.
    Detect {
        #[arg(long)]
        detector: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Evaluate all detectors on the validation split.
    Eval,
    /// Rank an unlabeled source file by every detector.
    Stress {
        /// One source sentence per line.
        #[arg(long)]
        input: PathBuf,
        /// Detector run to use.
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// train-model, generate-data, both contributions, train-detector, eval.
    All,
    /// Print the resolved configuration.
    ShowConfig,
}

fn print<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let ctx = Context::new(cfg, cli.out, cli.overwrite);
    match cli.command {
        Command::TrainModel => print(&pipeline::train_model(&ctx)?),
        Command::GenerateData { profile } => print(&pipeline::generate_data(&ctx, profile.into())?),
        Command::Contributions { mode, profile } => {
            let mode = match mode {
                ModeArg::Lrp => Mode::Lrp,
                ModeArg::Attention => Mode::Attention,
            };
            print(&pipeline::contributions(&ctx, profile.into(), mode)?)
        }
        Command::Analyze { profile } => print(&pipeline::analyze(&ctx, profile.into())?),
        Command::TrainDetector => print(&pipeline::train_detector(&ctx)?),
        Command::Detect { detector, split } => {
            let report = pipeline::detect(&ctx, &detector, split.into())?;
            print(&(&report.detector, report.samples, &report.prf, report.auc))
        }
        Command::Eval => print(&pipeline::eval(&ctx)?.means),
        Command::Stress { input, run } => {
            let report = pipeline::stress(&ctx, &input, run).with_context(|| format!("stress test on {}", input.display()))?;
            print(&report)
        }
        Command::All => print(&pipeline::run_all(&ctx)?.means),
        Command::ShowConfig => {
            print!("{}", ctx.cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(2, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
