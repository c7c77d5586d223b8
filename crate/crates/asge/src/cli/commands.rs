//! The five commands behind the `asge` binary. Each takes plain arguments
//! and returns a summary struct; printing/exit-code policy lives in the
//! binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::cli::config::{load_config, load_datasets, resolve, CliOverrides, ResolvedRun};
use crate::data::SplitTag;
use crate::error::{Error, Result};
use crate::goodness::{partition_factor, spatial_goodness, PartitionPlan};
use crate::gradcheck::{run_gradcheck, GradcheckReport};
use crate::layers::{pool, PoolKind, PoolSpec};
use crate::network::{build_network, Strategy};
use crate::tensor::{conv2d_forward, relu, Tensor};
use crate::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use crate::trainer::session::{evaluate, EvalReport, TrainSession};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Outcome of `asge train`.
#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub epochs: u64,
    pub best_val_acc: f64,
    pub best_epoch: u64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub wall_seconds: f64,
}

/// Runs a full training: writes `resolved.json`, streams `metrics.jsonl`,
/// and keeps the best-validation checkpoint as `best.ckpt`.
pub fn cmd_train(
    config_path: Option<&Path>,
    overrides: &[String],
    cli: &CliOverrides,
    quiet: bool,
) -> Result<TrainSummary> {
    cmd_train_with(config_path, overrides, cli, quiet, |_| {})
}

/// Arguments of `asge eval`.
pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub config_path: Option<&'a Path>,
    pub overrides: &'a [String],
    pub cli: CliOverrides,
    pub split: SplitTag,
    pub strategy: Option<Strategy>,
    pub out: Option<&'a Path>,
}

/// Evaluates a checkpoint on a dataset split.
pub fn cmd_eval(args: EvalArgs<'_>) -> Result<EvalReport> {
    let ckpt = load_checkpoint(args.checkpoint)?;
    let resolved = resolve(load_config(args.config_path, args.overrides)?, &args.cli)?;
    if args.config_path.is_some() && resolved.arch != ckpt.arch {
        return Err(Error::config(format!(
            "architecture mismatch: config hash {} vs checkpoint hash {}",
            hex(&resolved.arch.hash()),
            hex(&ckpt.arch.hash())
        )));
    }
    let mut network = ckpt.restore_network()?;
    if let Some(strategy) = args.strategy {
        if strategy != network.spec.strategy {
            return Err(Error::usage(format!(
                "checkpoint was trained with strategy {:?}; rebuild rather than override",
                network.spec.strategy
            )));
        }
    }
    if network.spec.strategy == Strategy::Best && network.best_layer.is_none() {
        return Err(Error::usage(
            "best-layer strategy requires a recorded best layer",
        ));
    }

    // Dataset geometry must match what the checkpoint expects.
    let mut resolved = resolved;
    resolved.config.dataset.augmentation = Some(crate::data::AugmentationPolicy::disabled());
    let data = load_datasets(&resolved)?;
    let dataset = match args.split {
        SplitTag::Train => data.train,
        SplitTag::Val => data.val,
        SplitTag::Test => data.test,
    };
    if dataset.sample_shape() != network.spec.input_shape {
        return Err(Error::config(format!(
            "dataset samples {:?} do not match architecture input {:?}",
            dataset.sample_shape(),
            network.spec.input_shape
        )));
    }
    let report = evaluate(&mut network, &dataset, resolved.options.batch_size)?;
    if let Some(path) = args.out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

/// Runs the finite-difference gradient check on the architecture from the
/// config (or the built-in small stack) and reports per-layer errors.
pub fn cmd_gradcheck(
    config_path: Option<&Path>,
    overrides: &[String],
    seed: u64,
) -> Result<GradcheckReport> {
    let spec = match config_path {
        Some(_) => {
            let resolved = resolve(load_config(config_path, overrides)?, &CliOverrides::default())?;
            resolved.arch
        }
        None => crate::gradcheck::default_spec(),
    };
    run_gradcheck(&spec, seed, None)
}

/// Arguments of `asge goodness-dump`.
pub struct DumpArgs<'a> {
    pub checkpoint: &'a Path,
    pub config_path: Option<&'a Path>,
    pub overrides: &'a [String],
    pub cli: CliOverrides,
    /// 1-based layer index.
    pub layer: usize,
    pub batch_size: usize,
    pub out: Option<&'a Path>,
}

/// Dumps a layer's goodness distribution for one batch, before pooling and
/// after each pooling variant, as CSV rows
/// `layer,variant,channel,patch_i,patch_j,value`.
pub fn cmd_goodness_dump(args: DumpArgs<'_>) -> Result<String> {
    if args.layer == 0 {
        return Err(Error::usage("layer indices are 1-based"));
    }
    let ckpt = load_checkpoint(args.checkpoint)?;
    let network = ckpt.restore_network()?;
    if args.layer > network.n_layers() {
        return Err(Error::usage(format!(
            "layer {} out of range for a {}-layer network",
            args.layer,
            network.n_layers()
        )));
    }
    let idx = args.layer - 1;
    let pool_spec = network.layers[idx].pool.ok_or_else(|| {
        Error::usage(format!(
            "layer {} has no pooling; post-pool distributions are undefined",
            args.layer
        ))
    })?;

    let mut resolved = resolve(load_config(args.config_path, args.overrides)?, &args.cli)?;
    resolved.config.dataset.augmentation = Some(crate::data::AugmentationPolicy::disabled());
    let data = load_datasets(&resolved)?;
    let batch_size = args.batch_size.min(data.test.len()).max(1);
    let indices: Vec<u32> = (0..batch_size as u32).collect();
    let (batch, _) = data.test.gather(&indices);

    // Forward to the layer's input, then tap its post-activation maps.
    let mut current = batch;
    for layer in &network.layers[..idx] {
        current = layer.forward(&current)?.output;
    }
    let layer = &network.layers[idx];
    let pre = conv2d_forward(&current, &layer.conv)?;
    let (act, _) = relu(&pre);

    let mut csv = String::from("layer,variant,channel,patch_i,patch_j,value\n");
    let mut emit = |variant: &str, g: &Tensor<f32>, plan: &PartitionPlan| {
        let p = plan.patches();
        let dim = plan.goodness_dim();
        for sample in g.data().chunks(dim) {
            for c in 0..plan.channels() {
                for i in 0..p {
                    for j in 0..p {
                        let v = sample[(c * p + i) * p + j];
                        csv.push_str(&format!("{},{variant},{c},{i},{j},{v}\n", args.layer));
                    }
                }
            }
        }
    };

    let origin = spatial_goodness(&act, &layer.plan)?;
    emit("origin", &origin, &layer.plan);

    let alpha = network.spec.alpha;
    let c_last = network
        .spec
        .effective_layers()
        .last()
        .unwrap()
        .out_channels;
    for kind in [PoolKind::Rms, PoolKind::Avg, PoolKind::Max] {
        let spec = PoolSpec {
            kind,
            ..pool_spec
        };
        let pooled = pool(&act, &spec)?;
        let (_, c, ph, pw) = pooled.dims4()?;
        let p = partition_factor(alpha, c, c_last, ph, pw);
        let plan = PartitionPlan::new(c, ph, pw, p)?;
        let g = spatial_goodness(&pooled, &plan)?;
        let variant = match kind {
            PoolKind::Rms => "rms",
            PoolKind::Avg => "avg",
            PoolKind::Max => "max",
        };
        emit(variant, &g, &plan);
    }

    if let Some(path) = args.out {
        fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(csv)
}

/// One row of a sweep summary.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub test_acc: f64,
    pub wall_seconds: f64,
    pub classifier_params: usize,
}

/// Arguments of `asge sweep`.
pub struct SweepArgs<'a> {
    pub config_path: Option<&'a Path>,
    pub overrides: &'a [String],
    pub cli: CliOverrides,
    pub parameter: &'a str,
    pub values: &'a str,
}

/// Trains once per parameter value with a shared seed and reports test
/// accuracy per value. Writes `sweep.csv` under the output directory.
pub fn cmd_sweep(args: SweepArgs<'_>, quiet: bool) -> Result<Vec<SweepRow>> {
    let values: Vec<String> = args
        .values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::usage("no sweep values given"));
    }
    match args.parameter {
        "alpha" | "pooling" | "strategy" => {}
        other => {
            return Err(Error::usage(format!(
                "unknown sweep parameter '{other}' (alpha, pooling, strategy)"
            )))
        }
    }

    let base = resolve(load_config(args.config_path, args.overrides)?, &args.cli)?;
    let base_out = base.out_dir.clone();
    fs::create_dir_all(&base_out).map_err(|e| Error::io(&base_out, e))?;

    let mut rows = Vec::with_capacity(values.len());
    for value in &values {
        let mut run_overrides: Vec<String> = args.overrides.to_vec();
        match args.parameter {
            "alpha" => {
                let v: f64 = value
                    .parse()
                    .map_err(|_| Error::usage(format!("alpha value '{value}' is not a number")))?;
                run_overrides.push(format!("arch.alpha={v}"));
            }
            "strategy" => {
                match value.as_str() {
                    "last" | "fusion" | "best" => {}
                    other => {
                        return Err(Error::usage(format!("unknown strategy '{other}'")))
                    }
                }
                run_overrides.push(format!("arch.strategy=\"{value}\""));
            }
            "pooling" => match value.as_str() {
                "rms" | "avg" | "max" => {}
                other => return Err(Error::usage(format!("unknown pooling '{other}'"))),
            },
            _ => unreachable!(),
        }
        let mut cli = args.cli.clone();
        cli.out_dir = Some(base_out.join(format!("{}-{}", args.parameter, value)));
        // Pooling has no dotted-path form (it lives inside the layer list),
        // so it is rewritten on the resolved architecture instead.
        let summary = if args.parameter == "pooling" {
            let kind = match value.as_str() {
                "rms" => PoolKind::Rms,
                "avg" => PoolKind::Avg,
                _ => PoolKind::Max,
            };
            cmd_train_with(args.config_path, &run_overrides, &cli, quiet, |resolved| {
                for layer in resolved.arch.layers.iter_mut() {
                    if let Some(p) = layer.pool.as_mut() {
                        p.kind = kind;
                    }
                }
                if let Some(layers) = resolved.config.arch.layers.as_mut() {
                    for layer in layers.iter_mut() {
                        if let Some(p) = layer.pool.as_mut() {
                            p.kind = kind;
                        }
                    }
                }
            })?
        } else {
            cmd_train(args.config_path, &run_overrides, &cli, quiet)?
        };

        // Test accuracy of the best checkpoint.
        let ckpt = load_checkpoint(&summary.checkpoint_path)?;
        let mut network = ckpt.restore_network()?;
        let classifier_params = network
            .classifier
            .as_ref()
            .map(|c| c.param_count())
            .unwrap_or(0);
        let mut eval_resolved =
            resolve(load_config(args.config_path, &run_overrides)?, &cli)?;
        eval_resolved.config.dataset.augmentation =
            Some(crate::data::AugmentationPolicy::disabled());
        let data = load_datasets(&eval_resolved)?;
        let report = evaluate(&mut network, &data.test, eval_resolved.options.batch_size)?;
        rows.push(SweepRow {
            value: value.clone(),
            test_acc: report.top1,
            wall_seconds: summary.wall_seconds,
            classifier_params,
        });
        if !quiet {
            eprintln!(
                "sweep {}={}  test acc {:.4}",
                args.parameter, value, report.top1
            );
        }
    }

    let mut csv = String::from("value,test_acc,wall_seconds,classifier_params\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.value, row.test_acc, row.wall_seconds, row.classifier_params
        ));
    }
    let path = base_out.join("sweep.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// `cmd_train` with a post-resolve architecture rewrite hook (sweeps rewrite
/// bits of the architecture that have no dotted-path override form).
fn cmd_train_with(
    config_path: Option<&Path>,
    overrides: &[String],
    cli: &CliOverrides,
    quiet: bool,
    rewrite: impl FnOnce(&mut ResolvedRun),
) -> Result<TrainSummary> {
    let started = Instant::now();
    let mut resolved = resolve(load_config(config_path, overrides)?, cli)?;
    rewrite(&mut resolved);
    resolved.arch.trace()?;
    fs::create_dir_all(&resolved.out_dir).map_err(|e| Error::io(&resolved.out_dir, e))?;

    let resolved_path = resolved.out_dir.join("resolved.json");
    let resolved_json =
        serde_json::to_string_pretty(&resolved.config).expect("config serializes");
    fs::write(&resolved_path, resolved_json).map_err(|e| Error::io(&resolved_path, e))?;

    let data = load_datasets(&resolved)?;
    let network = build_network(&resolved.arch, resolved.options.seed, resolved.hyper)?;
    let mut session = TrainSession::new(network, data.train, data.val, resolved.options)?;

    let metrics_path = resolved.out_dir.join("metrics.jsonl");
    let mut metrics_file =
        fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let checkpoint_path = resolved.out_dir.join("best.ckpt");
    let keep = resolved.checkpoint_keep;
    let out_dir = resolved.out_dir.clone();
    let mut kept: Vec<PathBuf> = Vec::new();

    session.run(|session, metrics| {
        let line = serde_json::to_string(metrics).expect("metrics serialize");
        writeln!(metrics_file, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        let improved = session.best_epoch == metrics.epoch;
        if improved {
            let ckpt = session.checkpoint();
            save_checkpoint(&checkpoint_path, &ckpt)?;
            if keep > 1 {
                let stamped = out_dir.join(format!("best-epoch{}.ckpt", metrics.epoch));
                save_checkpoint(&stamped, &ckpt)?;
                kept.push(stamped);
                while kept.len() > keep {
                    let old = kept.remove(0);
                    let _ = fs::remove_file(old);
                }
            }
        }
        if !quiet {
            eprintln!(
                "epoch {:>3}  lr {:.6}  val acc {:.4}{}",
                metrics.epoch,
                metrics.lr,
                metrics.strategy_val_acc,
                if improved { "  *" } else { "" }
            );
        }
        Ok(())
    })?;

    Ok(TrainSummary {
        out_dir: resolved.out_dir,
        epochs: session.options.epochs,
        best_val_acc: session.best_val_acc,
        best_epoch: session.best_epoch,
        metrics_path,
        checkpoint_path,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
