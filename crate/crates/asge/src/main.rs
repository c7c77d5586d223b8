//! Thin command-line front end; all behavior lives in the library's `cli`
//! module.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asge::cli::{
    cmd_eval, cmd_goodness_dump, cmd_gradcheck, cmd_sweep, cmd_train, CliOverrides, DumpArgs,
    EvalArgs, SweepArgs,
};
use asge::data::SplitTag;
use asge::error::Error;
use asge::network::Strategy;

#[derive(Parser)]
#[command(name = "asge", version, about = "Backpropagation-free CNN training via adaptive spatial goodness encoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML, or a resolved.json replay).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path config override, repeatable: --override training.seed=7
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset root (defaults to config, then $ASGE_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Run seed; fans out into init/projection/split/augment/order streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Force deterministic mode on or off.
    #[arg(long)]
    deterministic: Option<bool>,
    /// Train layers pipelined (one worker per stage).
    #[arg(long)]
    pipeline: bool,
    /// Worker threads for intra-op parallelism (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Suppress progress lines.
    #[arg(long)]
    quiet: bool,
}

impl Common {
    fn overrides_struct(&self) -> CliOverrides {
        CliOverrides {
            data_dir: self.data_dir.clone(),
            out_dir: self.out_dir.clone(),
            seed: self.seed,
            deterministic: self.deterministic,
            pipeline: self.pipeline.then_some(true),
            threads: self.threads,
        }
    }

    fn init_threads(&self) {
        if let Some(n) = self.threads {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network per the config; writes metrics.jsonl, best.ckpt and
    /// resolved.json into the output directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate: train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Must match the checkpoint's strategy when given.
        #[arg(long)]
        strategy: Option<String>,
        /// Write the JSON report here as well as printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify the layer-local gradient chain against finite differences
    /// (double precision, small stacks only).
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Dump a layer's goodness values for one batch, before pooling and
    /// after each pooling variant, as CSV.
    GoodnessDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1-based layer index; the layer must have pooling configured.
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of a swept parameter (alpha, pooling, strategy)
    /// with a shared seed; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        parameter: String,
        /// Comma-separated values, e.g. 0,0.5,1,1.5,2 or rms,avg,max.
        #[arg(long)]
        values: String,
    },
}

fn parse_split(s: &str) -> Result<SplitTag, Error> {
    match s {
        "train" => Ok(SplitTag::Train),
        "val" => Ok(SplitTag::Val),
        "test" => Ok(SplitTag::Test),
        other => Err(Error::usage(format!("unknown split '{other}'"))),
    }
}

fn parse_strategy(s: &str) -> Result<Strategy, Error> {
    match s {
        "last" => Ok(Strategy::Last),
        "fusion" => Ok(Strategy::Fusion),
        "best" => Ok(Strategy::Best),
        other => Err(Error::usage(format!("unknown strategy '{other}'"))),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { common } => {
            common.init_threads();
            let summary = cmd_train(
                common.config.as_deref(),
                &common.overrides,
                &common.overrides_struct(),
                common.quiet,
            )?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            strategy,
            out,
        } => {
            common.init_threads();
            let report = cmd_eval(EvalArgs {
                checkpoint: &checkpoint,
                config_path: common.config.as_deref(),
                overrides: &common.overrides,
                cli: common.overrides_struct(),
                split: parse_split(&split)?,
                strategy: strategy.as_deref().map(parse_strategy).transpose()?,
                out: out.as_deref(),
            })?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            Ok(())
        }
        Command::Gradcheck { common } => {
            common.init_threads();
            let report = cmd_gradcheck(
                common.config.as_deref(),
                &common.overrides,
                common.seed.unwrap_or(1),
            )?;
            for layer in &report.layers {
                println!(
                    "layer {:>2}: max relative error {:.3e} over {} parameters (worst: {})",
                    layer.layer, layer.max_rel_err, layer.params_checked, layer.worst_param
                );
            }
            if report.passed() {
                println!("gradcheck passed (threshold {:.0e})", report.threshold);
                Ok(())
            } else {
                let failures: Vec<String> = report
                    .failures()
                    .map(|l| format!("layer {} ({})", l.layer, l.worst_param))
                    .collect();
                Err(Error::input(format!(
                    "gradient check failed: {}",
                    failures.join(", ")
                )))
            }
        }
        Command::GoodnessDump {
            common,
            checkpoint,
            layer,
            batch_size,
            out,
        } => {
            common.init_threads();
            let csv = cmd_goodness_dump(DumpArgs {
                checkpoint: &checkpoint,
                config_path: common.config.as_deref(),
                overrides: &common.overrides,
                cli: common.overrides_struct(),
                layer,
                batch_size,
                out: out.as_deref(),
            })?;
            if out.is_none() {
                print!("{csv}");
            }
            Ok(())
        }
        Command::Sweep {
            common,
            parameter,
            values,
        } => {
            common.init_threads();
            let rows = cmd_sweep(
                SweepArgs {
                    config_path: common.config.as_deref(),
                    overrides: &common.overrides,
                    cli: common.overrides_struct(),
                    parameter: &parameter,
                    values: &values,
                },
                common.quiet,
            )?;
            println!("value,test_acc,wall_seconds,classifier_params");
            for row in rows {
                println!(
                    "{},{},{},{}",
                    row.value, row.test_acc, row.wall_seconds, row.classifier_params
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.reason());
            match e {
                Error::Io { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
