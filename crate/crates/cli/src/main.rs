use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use esdrl::config::{parse_variants, RunConfig};
use esdrl::ddpg::Phase;
use esdrl::runlog::{Job, Manifest};
use esdrl::runner::{execute, output_dir, rerun};

/// Extremum seeking, DDPG and their hybrid on a KV envelope beamline.
#[derive(Parser, Debug)]
#[command(name = "esdrl", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Repeat the run recorded in a manifest (file or run directory).
    #[arg(long, value_name = "MANIFEST")]
    from_manifest: Option<PathBuf>,

    /// Output directory for --from-manifest.
    #[arg(long, requires = "from_manifest")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a key, e.g. `ddpg.gamma=0.95` or `Q5=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory. Relative paths are placed under $ESDRL_OUTPUT_ROOT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the envelope for the nominal settings and report the reward.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the DDPG agent through the curriculum.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run only this phase (I, II or III).
        #[arg(long)]
        phase: Option<Phase>,
        /// Stop after this many episodes in total.
        #[arg(long)]
        max_episodes: Option<usize>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a trained policy against a random one.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the perturbation comparison and optionally the scalar study.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of drl,es,es-warm,hybrid.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also run the scalar unknown-direction study.
        #[arg(long)]
        scalar: bool,
    },
    /// Convert the line-delimited logs of a run to CSV.
    Export {
        #[command(flatten)]
        common: Common,
        /// Run directory to export.
        run: PathBuf,
    },
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn absolute(p: &Path) -> Result<String, String> {
    std::path::absolute(p)
        .map(|p| p.to_string_lossy().into_owned())
        .map_err(|e| format!("{}: {e}", p.display()))
}

fn run(cli: Cli) -> Result<(), String> {
    if let Some(m) = &cli.from_manifest {
        let manifest = Manifest::load(m).map_err(|e| e.to_string())?;
        let out = output_dir(cli.out.as_deref(), &manifest.config, &manifest.job);
        let outcome = rerun(m, &out).map_err(|e| e.to_string())?;
        report(&outcome);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err("nothing to do; pass a subcommand or --from-manifest (see --help)".into());
    };
    let (common, job, mut extra) = match command {
        Command::Simulate { common } => (common, Job::Simulate, vec![]),
        Command::Train {
            common,
            phase,
            max_episodes,
            resume,
        } => {
            let mut extra = vec![];
            if let Some(p) = phase {
                extra.push(format!("train.phase={}", quote(&p.to_string())));
            }
            if let Some(n) = max_episodes {
                extra.push(format!("train.max_episodes={n}"));
            }
            let resume = resume.as_deref().map(absolute).transpose()?;
            (common, Job::Train { resume }, extra)
        }
        Command::Evaluate {
            common,
            checkpoint,
            episodes,
        } => {
            let mut extra = vec![];
            if let Some(p) = checkpoint {
                extra.push(format!("evaluate.checkpoint={}", quote(&absolute(&p)?)));
            }
            if let Some(n) = episodes {
                extra.push(format!("evaluate.episodes={n}"));
            }
            (common, Job::Evaluate, extra)
        }
        Command::Experiment {
            common,
            variants,
            checkpoint,
            scalar,
        } => {
            let mut extra = vec![];
            if let Some(v) = variants {
                let list = parse_variants(&v).map_err(|e| e.to_string())?;
                let names: Vec<String> = list.iter().map(|k| quote(&k.to_string())).collect();
                extra.push(format!("experiment.variants=[{}]", names.join(", ")));
            }
            if let Some(p) = checkpoint {
                extra.push(format!("experiment.checkpoint={}", quote(&absolute(&p)?)));
            }
            if scalar {
                extra.push("experiment.scalar_study=true".into());
            }
            (common, Job::Experiment, extra)
        }
        Command::Export { common, run } => (common, Job::Export { run: absolute(&run)? }, vec![]),
    };
    let mut overrides = common.set.clone();
    overrides.append(&mut extra);
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path, &overrides),
        None => RunConfig::from_toml_with("", &overrides),
    }
    .map_err(|e| e.to_string())?;
    let out = output_dir(common.out.as_deref(), &cfg, &job);
    let outcome = execute(&job, &cfg, &overrides, &out).map_err(|e| e.to_string())?;
    report(&outcome);
    Ok(())
}

fn report(outcome: &esdrl::runner::RunOutcome) {
    println!("{:#}", outcome.summary);
    eprintln!("wrote {} file(s) to {}", outcome.files.len(), outcome.dir.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
