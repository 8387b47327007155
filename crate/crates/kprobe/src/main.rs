use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kprobe::pipeline::{
    cmd_all, cmd_attribute, cmd_check, cmd_evaluate, cmd_gen_corpus, cmd_report, cmd_select,
    cmd_train, load_config,
};
use kprobe::Error;

/// Train a small attention classifier on synthetic motif data, score its
/// Q/K/V neurons, and measure how accuracy degrades under ablation.
#[derive(Parser)]
#[command(name = "kprobe", version, disable_help_subcommand = true)]
struct Cli {
    /// JSON config file; defaults apply for anything omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config field by dotted path, e.g. --set train.epochs=5
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Worker threads (0 = all cores); results are identical regardless
    #[arg(long, global = true, env = "KPROBE_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labeled motif corpus
    GenCorpus,
    /// Train the classifier on the train split
    Train,
    /// Score every Q/K/V neuron (activation magnitude and integrated gradients)
    Attribute,
    /// Build keep-masks at each preservation fraction
    Select,
    /// Evaluate ablated submodels into the accuracy grid
    Evaluate,
    /// Emit grid CSV, heatmap CSV/SVG files, and report.json
    Report,
    /// Run the invariant suite against existing artifacts
    Check,
    /// Run the whole pipeline end to end
    All,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successful exits; everything else is usage.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    let cfg = match load_config(cli.config.as_deref(), &cli.sets) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };

    let result = match cli.command {
        Command::GenCorpus => cmd_gen_corpus(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Attribute => cmd_attribute(&cfg),
        Command::Select => cmd_select(&cfg),
        Command::Evaluate => cmd_evaluate(&cfg),
        Command::Report => cmd_report(&cfg),
        Command::All => cmd_all(&cfg),
        Command::Check => {
            return match cmd_check(&cfg) {
                Ok(outcomes) => {
                    let mut all_pass = true;
                    for o in &outcomes {
                        let tag = if o.pass { "PASS" } else { "FAIL" };
                        println!("{tag} {}: {}", o.name, o.detail);
                        all_pass &= o.pass;
                    }
                    if all_pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(2)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_code_for(&e))
                }
            };
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::MissingArtifact { .. } => 3,
        Error::InvariantFailure { .. } | Error::NonFinite { .. } | Error::Diverged { .. } => 2,
        _ => 1,
    }
}
