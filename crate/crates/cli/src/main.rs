use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use feast_core::config::{Experiment, ExperimentConfig};
use feast_core::pipeline::{self, PipelineError, RunDir, TestEnv};

#[derive(Parser)]
#[command(name = "feast", version, about = "Simulate, train, and pick the stopping epoch without labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); the built-in desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct Training {
    /// Overrides the network seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the training set (E1) and the test track.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Environment of the test track: e1 (matched) or e2 (mismatched).
        #[arg(long, default_value = "e2")]
        which: TestEnv,
    },
    /// Train the range classifier, recording loss and test predictions per epoch.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        #[arg(long)]
        quiet: bool,
    },
    /// Choose the stopping epoch from the recorded trace.
    Select {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        /// Also write the selected epoch's weights to selected.ckpt.
        #[arg(long)]
        weights: bool,
    },
    /// Score the selected epoch against truth ranges.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `time,range` CSV; defaults to the truth stored with the test set.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Bartlett matched-field estimates for every test sample.
    Mfp {
        #[command(flatten)]
        common: Common,
        /// Also export the ambiguity surface of this sample index.
        #[arg(long)]
        surface: Option<usize>,
    },
    /// Write figure-ready CSVs into <out>/plot.
    Plotdata {
        #[command(flatten)]
        common: Common,
        /// Tracks to export: epoch numbers, `selected`, `final`.
        #[arg(long)]
        epochs: Option<String>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Convert an external covariance series into <out>/test.ds.
    Import {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
}

fn experiment(path: Option<&Path>) -> Result<Experiment, PipelineError> {
    let (cfg, base) = match path {
        Some(p) => (ExperimentConfig::load(p)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (ExperimentConfig::desk(), PathBuf::from(".")),
    };
    Ok(cfg.resolve(&base)?)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Gen { common, which } => {
            let exp = experiment(common.config.as_deref())?;
            let s = pipeline::gen(&exp, which, &RunDir::new(&common.out))?;
            println!("n_train={} n_test={} input_dim={}", s.n_train, s.n_test, s.input_dim);
            println!("bins_covered={}/{} modes_e1={} modes_test={}", s.bins_covered, s.n_bins, s.modes_e1, s.modes_test);
        }
        Command::Train { common, training, quiet } => {
            let exp = experiment(common.config.as_deref())?;
            let cfg = pipeline::train_config(&exp, training.seed, training.epochs);
            let every = (cfg.max_epochs / 20).max(1);
            let s = pipeline::train(&exp, &RunDir::new(&common.out), &cfg, |r| {
                if !quiet && (r.epoch % every == 0 || r.epoch == 1) {
                    eprintln!("epoch {:>5}  loss {:.6}", r.epoch, r.train_loss);
                }
            })?;
            println!("epochs={} final_loss={}", s.epochs, s.final_loss);
        }
        Command::Select { common, training, weights } => {
            let exp = experiment(common.config.as_deref())?;
            let cfg = pipeline::train_config(&exp, training.seed, training.epochs);
            let ft = pipeline::select(&exp, &RunDir::new(&common.out), &cfg, weights)?;
            println!("lambda={}", ft.lambda);
            println!("selected_epoch={}", ft.selected_epoch());
        }
        Command::Eval { common, truth } => {
            let s = pipeline::eval(&RunDir::new(&common.out), truth.as_deref())?;
            println!("selected_epoch={} rmse={:.6}", s.selected_epoch, s.rmse_selected);
            println!("best_epoch={} rmse={:.6}", s.best_epoch, s.rmse_best);
            println!("final_epoch={} rmse={:.6}", s.final_epoch, s.rmse_final);
        }
        Command::Mfp { common, surface } => {
            let exp = experiment(common.config.as_deref())?;
            let rows = pipeline::mfp(&exp, &RunDir::new(&common.out), surface)?;
            println!("samples={}", rows.len());
        }
        Command::Plotdata { common, epochs, truth } => {
            let exp = experiment(common.config.as_deref())?;
            let specs = match epochs {
                Some(list) => pipeline::parse_epoch_list(&list)?,
                None => {
                    let mut v: Vec<String> = exp.config.plot_epochs.iter().map(|e| e.to_string()).collect();
                    v.extend(["selected".into(), "final".into()]);
                    pipeline::parse_epoch_list(&v.join(","))?
                }
            };
            for path in pipeline::plotdata(&exp, &RunDir::new(&common.out), &specs, truth.as_deref())? {
                println!("{}", path.display());
            }
        }
        Command::Import { input, out } => {
            let n = pipeline::import(&input, &RunDir::new(&out))?;
            println!("imported={n}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
