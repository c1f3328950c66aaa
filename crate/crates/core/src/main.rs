use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, CommandFactory, Parser, Subcommand};
use rfssl::cli::{cmd_eval, cmd_pretrain, cmd_report, cmd_synth, eval_dir, MATRIX_FILE};
use rfssl::config::{ExperimentConfig, Profile};
use rfssl::Error;
use rfssl_numerics::Exec;

#[derive(Parser)]
#[command(
    name = "rfssl",
    version,
    about = "Self-supervised pretraining for multi-antenna IQ data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration merged onto the profile defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Size preset: smoke, desk or full.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Run single-threaded.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize recordings, the manifest and the splits.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain an encoder on the dev split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Disable every augmentation.
        #[arg(long)]
        no_augment: bool,
    },
    /// Run the downstream experiment matrix.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated label ratios, e.g. 0.001,0.01,0.1,1.0
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Print tables from a saved matrix report.
    Report {
        #[command(flatten)]
        common: Common,
        /// Defaults to the evaluation output of the configuration.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Also rewrite CSV and text outputs here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, Exec), Error> {
    let profile: Profile = common.profile.parse()?;
    let cfg = ExperimentConfig::load(common.config.as_deref(), profile)?;
    let exec = if common.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    Ok((cfg, exec))
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut stdout = std::io::stdout();
    match cli.command {
        Command::Synth { common } => {
            let (cfg, exec) = load(&common)?;
            let outcome = cmd_synth(&cfg, exec, &mut stdout)?;
            print_paths(&outcome.paths);
        }
        Command::Pretrain { common, no_augment } => {
            let (cfg, exec) = load(&common)?;
            let cancel = Arc::new(AtomicBool::new(false));
            let flag = cancel.clone();
            ctrlc::set_handler(move || {
                eprintln!("stopping at the next step boundary");
                flag.store(true, Ordering::SeqCst);
            })
            .map_err(|e| Error::Config(format!("cannot install interrupt handler: {e}")))?;
            let summary = cmd_pretrain(&cfg, no_augment, Some(&cancel), exec, &mut stdout)?;
            print_paths(&[summary.checkpoint, summary.trace]);
        }
        Command::Eval {
            common,
            checkpoint,
            ratios,
        } => {
            let (cfg, exec) = load(&common)?;
            let (_, paths) = cmd_eval(&cfg, checkpoint.as_deref(), ratios.as_deref(), exec, &mut stdout)?;
            print_paths(&paths);
        }
        Command::Report { common, input, out_dir } => {
            let (cfg, _) = load(&common)?;
            let input = input.unwrap_or_else(|| eval_dir(&cfg).join(MATRIX_FILE));
            let (_, paths) = cmd_report(&input, out_dir.as_deref(), &mut stdout)?;
            print_paths(&paths);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 2 {
                eprintln!("{}", Cli::command().render_usage());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
