use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fatigue_rec_cli::{cmd_eval, cmd_grad_check, cmd_prepare, cmd_synth, cmd_train, render_text, EvalOptions, RunConfig, GRAD_CHECK_TOLERANCE};
use fatigue_rec_core::data::Split;
use fatigue_rec_core::model::Ablations;

#[derive(Parser)]
#[command(name = "fatigue-rec", version, about = "Fatigue-aware sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, truncate and split an interaction log.
    Prepare {
        #[command(flatten)]
        config: ConfigArg,
        /// Tab-separated log; defaults to `events.tsv` in the data directory.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Defaults to the data directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        k_core: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Train:valid:test shares, e.g. `8:1:1`.
        #[arg(long, value_parser = parse_ratios)]
        ratios: Option<[usize; 3]>,
    },
    /// Generate a synthetic corpus with repetition fatigue.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Engaged events; defaults to `events.tsv` in the data directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Every exposure with its outcome; defaults to `exposures.tsv` next to the output.
        #[arg(long)]
        exposures: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on the prepared splits.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Run the finite-difference gradient check instead of training.
        #[arg(long)]
        grad_check: bool,
        /// Training instances in the checked batch.
        #[arg(long, default_value_t = 2)]
        grad_check_instances: usize,
        /// Parameters checked; 0 checks all of them.
        #[arg(long, default_value_t = 500)]
        grad_check_coordinates: usize,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split file; defaults to `splits.tsv` in the data directory.
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also report each fatigue-importance bucket.
        #[arg(long)]
        group_by_m: bool,
        /// Add the EVTR curve of an exposure log (default: `exposures.tsv` in the data directory).
        #[arg(long, num_args = 0..=1)]
        evtr: Option<Option<PathBuf>>,
        /// Look-back in exposures for the EVTR curve; defaults to the synthetic window.
        #[arg(long)]
        evtr_window: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write the report here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the effective run configuration as TOML.
    Config {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

#[derive(Args)]
struct TrainOverrides {
    /// Comma-separated ablations (`no_fusion`, `no_fru`, `no_cross`, `no_cl`, `all`).
    #[arg(long)]
    ablation: Option<Ablations>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    history: Option<PathBuf>,
}

impl TrainOverrides {
    fn apply(self, run: &mut RunConfig) {
        if let Some(a) = self.ablation {
            let m = &mut run.model.ablations;
            m.no_fusion |= a.no_fusion;
            m.no_fru |= a.no_fru;
            m.no_cross |= a.no_cross;
            m.no_cl |= a.no_cl;
        }
        if let Some(seed) = self.seed {
            run.train.seed = seed;
        }
        if let Some(epochs) = self.max_epochs {
            run.train.max_epochs = epochs;
        }
        if let Some(path) = self.checkpoint {
            run.paths.checkpoint = path;
        }
        if let Some(path) = self.history {
            run.paths.history = path;
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

fn parse_ratios(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected train:valid:test, got {s:?}"));
    };
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([n(a)?, n(b)?, n(c)?])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            config,
            input,
            out_dir,
            k_core,
            max_len,
            ratios,
        } => {
            let mut run = RunConfig::load_or_default(config.config.as_deref())?;
            let p = &mut run.prepare;
            p.k_core = k_core.unwrap_or(p.k_core);
            p.max_len = max_len.unwrap_or(p.max_len);
            p.ratios = ratios.unwrap_or(p.ratios);
            let input = input.unwrap_or_else(|| run.paths.events());
            let out_dir = out_dir.unwrap_or_else(|| run.paths.data_dir.clone());
            let stats = cmd_prepare(&input, &out_dir, &run.prepare)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Synth {
            config,
            output,
            exposures,
            seed,
        } => {
            let mut run = RunConfig::load_or_default(config.config.as_deref())?;
            run.synthetic.seed = seed.unwrap_or(run.synthetic.seed);
            let output = output.unwrap_or_else(|| run.paths.events());
            let exposures = exposures.unwrap_or_else(|| output.with_file_name(fatigue_rec_cli::EXPOSURES_FILE));
            let n = cmd_synth(&run, &output, &exposures)?;
            println!("{n} engaged events written to {}", output.display());
        }
        Command::Train {
            config,
            overrides,
            grad_check,
            grad_check_instances,
            grad_check_coordinates,
        } => {
            let mut run = RunConfig::load_or_default(config.config.as_deref())?;
            overrides.apply(&mut run);
            if grad_check {
                let cap = (grad_check_coordinates > 0).then_some(grad_check_coordinates);
                let report = cmd_grad_check(&run, grad_check_instances, cap)?;
                println!(
                    "gradient check: {} coordinates, {} skipped at kinks, max relative error {:.3e}",
                    report.checked, report.skipped, report.max_rel_error
                );
                if !(report.max_rel_error <= GRAD_CHECK_TOLERANCE) {
                    anyhow::bail!("gradient check failed: {:.3e} exceeds {GRAD_CHECK_TOLERANCE:e}", report.max_rel_error);
                }
                return Ok(());
            }
            let outcome = cmd_train(&run)?;
            println!(
                "best epoch {} (valid GAUC {:.4}) after {} epochs, {} steps; checkpoint {}",
                outcome.best_epoch,
                outcome.best_gauc,
                outcome.epochs_run,
                outcome.steps,
                run.paths.checkpoint.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            splits,
            split,
            group_by_m,
            evtr,
            evtr_window,
            format,
            output,
        } => {
            let run = RunConfig::load_or_default(config.config.as_deref())?;
            let checkpoint = checkpoint.unwrap_or_else(|| run.paths.checkpoint.clone());
            let splits = splits.unwrap_or_else(|| run.paths.splits());
            let window = evtr_window.unwrap_or(run.synthetic.window);
            let opts = EvalOptions {
                split: Some(match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Valid => Split::Valid,
                    SplitArg::Test => Split::Test,
                }),
                group_by_m,
                evtr: evtr.map(|p| (p.unwrap_or_else(|| run.paths.exposures()), window)),
                batch_size: run.train.eval_batch_size,
            };
            let report = cmd_eval(&checkpoint, &splits, run.train.seed, &opts)?;
            let text = match format {
                Format::Text => render_text(&report),
                Format::Json => serde_json::to_string_pretty(&report)? + "\n",
            };
            match output {
                Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Config { config, overrides } => {
            let mut run = RunConfig::load_or_default(config.config.as_deref())?;
            overrides.apply(&mut run);
            run.validate()?;
            print!("{}", run.to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
