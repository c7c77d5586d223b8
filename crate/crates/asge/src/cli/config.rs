//! Run configuration: a TOML (or JSON) file with nested sections, strict
//! about unknown keys so ablation typos die loudly. Every field has a
//! default except the dataset location, which may also come from the
//! `ASGE_DATA_DIR` environment variable or the `--data-dir` flag. The fully
//! materialized configuration is written back as `resolved.json`, which is
//! itself a valid config: re-running from it reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    compute_stats, load_cifar, load_idx, load_stats, normalize, split, store_stats,
    AugmentationPolicy, CifarVariant, Dataset, SplitTag,
};
use crate::error::{Error, Result};
use crate::layers::{PoolKind, PoolSpec};
use crate::network::{ArchSpec, LayerSpec, Strategy};
use crate::trainer::opt::{OptimizerHyper, OptimizerKind, Schedule};
use crate::trainer::session::TrainOptions;

pub const DATA_DIR_ENV: &str = "ASGE_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
}

impl DatasetName {
    pub fn n_classes(self) -> usize {
        match self {
            DatasetName::Cifar100 => 100,
            _ => 10,
        }
    }

    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetName::Mnist | DatasetName::FashionMnist => [1, 28, 28],
            _ => [3, 32, 32],
        }
    }

    pub fn default_val_count(self) -> usize {
        match self {
            DatasetName::Mnist | DatasetName::FashionMnist => 10_000,
            _ => 5_000,
        }
    }

    /// Flip would corrupt digit semantics, so only the natural-image sets
    /// augment by default.
    pub fn default_augmentation(self) -> AugmentationPolicy {
        match self {
            DatasetName::Cifar10 | DatasetName::Cifar100 => AugmentationPolicy {
                pad_crop: 4,
                flip_prob: 0.5,
            },
            _ => AugmentationPolicy::disabled(),
        }
    }

    fn stats_stem(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Cifar100 => "cifar100",
        }
    }

    /// Default stack for this dataset: the VGG8 realization for 32x32 color
    /// sets, a four-layer 32/32/64/64 stack for the 28x28 gray sets.
    pub fn default_layers(self) -> Vec<LayerSpec> {
        match self {
            DatasetName::Cifar10 | DatasetName::Cifar100 => {
                ArchSpec::vgg8([3, 32, 32], self.n_classes(), PoolKind::Rms).layers
            }
            _ => [32usize, 32, 64, 64]
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let spec = LayerSpec::channels(c);
                    if matches!(i + 1, 2 | 4) {
                        spec.with_pool(PoolSpec::new(PoolKind::Rms))
                    } else {
                        spec
                    }
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_dataset_name")]
    pub name: DatasetName,
    /// Directory holding the dataset files; falls back to `ASGE_DATA_DIR`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub val_count: Option<usize>,
    /// Truncate the training split to this many samples (0 = all). Smoke
    /// knob; never set it for real runs.
    #[serde(default)]
    pub train_limit: usize,
    #[serde(default)]
    pub test_limit: usize,
    #[serde(default)]
    pub augmentation: Option<AugmentationPolicy>,
}

fn default_dataset_name() -> DatasetName {
    DatasetName::Mnist
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: DatasetName::Mnist,
            dir: None,
            val_count: None,
            train_limit: 0,
            test_limit: 0,
            augmentation: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default)]
    pub input_shape: Option<[usize; 3]>,
    #[serde(default)]
    pub n_classes: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub strategy: Option<Strategy>,
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    #[serde(default)]
    pub pipeline: bool,
    #[serde(default = "default_queue_depth")]
    pub queue_depth: usize,
    /// Worker threads for intra-op parallelism; 0 = all cores.
    #[serde(default)]
    pub threads: usize,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::AdamW
}
fn default_lr_max() -> f64 {
    2e-4
}
fn default_lr_min() -> f64 {
    1e-5
}
fn default_weight_decay() -> f64 {
    0.001
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch_size() -> usize {
    128
}
fn default_epochs() -> u64 {
    5
}
fn default_seed() -> u64 {
    1
}
fn default_true() -> bool {
    true
}
fn default_queue_depth() -> usize {
    2
}

impl Default for TrainingConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    /// How many improved checkpoints to retain (the newest best is always
    /// `best.ckpt`).
    #[serde(default = "default_checkpoint_keep")]
    pub checkpoint_keep: usize,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_checkpoint_keep() -> usize {
    1
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_out_dir(),
            checkpoint_keep: 1,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Flag-level overrides, applied after file parsing and `--override`s.
#[derive(Clone, Debug, Default)]
pub struct CliOverrides {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub deterministic: Option<bool>,
    pub pipeline: Option<bool>,
    pub threads: Option<usize>,
}

/// Parses a config file (TOML, or JSON for `resolved.json` replays) and
/// applies dotted-path `--override key=value` pairs. Unknown keys anywhere
/// are hard errors.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            if p.extension().is_some_and(|e| e == "json") {
                let value: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                json_to_toml_table(value)
                    .ok_or_else(|| Error::config(format!("{}: not a JSON object", p.display())))?
            } else {
                text.parse()
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
        }
        None => toml::Table::new(),
    };
    for pair in overrides {
        apply_override(&mut table, pair)?;
    }
    let value = toml::Value::Table(table);
    value
        .try_into()
        .map_err(|e| Error::config(format!("invalid config: {e}")))
}

fn json_to_toml_table(value: serde_json::Value) -> Option<toml::Table> {
    match json_to_toml(value)? {
        toml::Value::Table(t) => Some(t),
        _ => None,
    }
}

fn json_to_toml(value: serde_json::Value) -> Option<toml::Value> {
    Some(match value {
        serde_json::Value::Null => return None,
        serde_json::Value::Bool(b) => toml::Value::Boolean(b),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                toml::Value::Integer(i)
            } else {
                toml::Value::Float(n.as_f64()?)
            }
        }
        serde_json::Value::String(s) => toml::Value::String(s),
        serde_json::Value::Array(a) => {
            toml::Value::Array(a.into_iter().filter_map(json_to_toml).collect())
        }
        serde_json::Value::Object(o) => {
            let mut t = toml::Table::new();
            for (k, v) in o {
                if let Some(v) = json_to_toml(v) {
                    t.insert(k, v);
                }
            }
            toml::Value::Table(t)
        }
    })
}

fn apply_override(table: &mut toml::Table, pair: &str) -> Result<()> {
    let (path, raw_value) = pair
        .split_once('=')
        .ok_or_else(|| Error::usage(format!("override '{pair}' is not key=value")))?;
    let value: toml::Value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::usage(format!("override key '{path}' is malformed")));
    }
    let mut current = table;
    for key in &keys[..keys.len() - 1] {
        current = current
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::usage(format!("override path '{path}' crosses a non-table")))?;
    }
    current.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// A fully materialized run: config with every default filled, the derived
/// architecture, and trainer options.
#[derive(Clone, Debug)]
pub struct ResolvedRun {
    pub config: RunConfig,
    pub arch: ArchSpec,
    pub options: TrainOptions,
    pub hyper: OptimizerHyper,
    pub out_dir: PathBuf,
    pub checkpoint_keep: usize,
    pub threads: usize,
}

/// Fills dataset-dependent defaults, applies flag overrides, validates the
/// architecture, and derives trainer options.
pub fn resolve(mut config: RunConfig, cli: &CliOverrides) -> Result<ResolvedRun> {
    if let Some(dir) = &cli.data_dir {
        config.dataset.dir = Some(dir.clone());
    }
    if let Some(dir) = &cli.out_dir {
        config.output.dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        config.training.seed = seed;
    }
    if let Some(d) = cli.deterministic {
        config.training.deterministic = d;
    }
    if let Some(p) = cli.pipeline {
        config.training.pipeline = p;
    }
    if let Some(t) = cli.threads {
        config.training.threads = t;
    }

    let name = config.dataset.name;
    if config.dataset.dir.is_none() {
        config.dataset.dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    }
    config.dataset.val_count = Some(
        config
            .dataset
            .val_count
            .unwrap_or_else(|| name.default_val_count()),
    );
    config.dataset.augmentation = Some(
        config
            .dataset
            .augmentation
            .unwrap_or_else(|| name.default_augmentation()),
    );

    config.arch.input_shape = Some(config.arch.input_shape.unwrap_or_else(|| name.input_shape()));
    config.arch.n_classes = Some(config.arch.n_classes.unwrap_or_else(|| name.n_classes()));
    config.arch.alpha = Some(config.arch.alpha.unwrap_or(1.0));
    config.arch.strategy = Some(config.arch.strategy.unwrap_or(Strategy::Fusion));
    config.arch.layers = Some(
        config
            .arch
            .layers
            .clone()
            .unwrap_or_else(|| name.default_layers()),
    );

    let arch = ArchSpec {
        input_shape: config.arch.input_shape.unwrap(),
        n_classes: config.arch.n_classes.unwrap(),
        alpha: config.arch.alpha.unwrap(),
        strategy: config.arch.strategy.unwrap(),
        layers: config.arch.layers.clone().unwrap(),
    };
    arch.trace()?;

    let t = &config.training;
    if t.batch_size == 0 {
        return Err(Error::config("training.batch_size must be >= 1"));
    }
    if t.epochs == 0 {
        return Err(Error::config("training.epochs must be >= 1"));
    }
    if t.queue_depth == 0 {
        return Err(Error::config("training.queue_depth must be >= 1"));
    }
    let schedule = Schedule::new(t.lr_max, t.lr_min, t.epochs)?;
    let hyper = match t.optimizer {
        OptimizerKind::AdamW => OptimizerHyper::adamw(t.weight_decay as f32),
        OptimizerKind::SgdMomentum => {
            OptimizerHyper::sgd_momentum(t.momentum as f32, t.weight_decay as f32)
        }
    };
    let options = TrainOptions {
        seed: t.seed,
        epochs: t.epochs,
        batch_size: t.batch_size,
        optimizer: hyper,
        schedule,
        augmentation: config.dataset.augmentation.unwrap(),
        deterministic: t.deterministic,
        pipeline: t.pipeline,
        queue_depth: t.queue_depth,
    };

    Ok(ResolvedRun {
        out_dir: config.output.dir.clone(),
        checkpoint_keep: config.output.checkpoint_keep.max(1),
        threads: config.training.threads,
        config,
        arch,
        options,
        hyper,
    })
}

/// Train/val/test splits, normalized with cached channel statistics.
#[derive(Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn require_file(dir: &Path, file: &str) -> Result<PathBuf> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(Error::config(format!(
            "dataset.dir: missing {} under {}",
            file,
            dir.display()
        )));
    }
    Ok(path)
}

/// Loads the configured dataset from disk, computes or reuses the channel
/// statistics sidecar, normalizes, and splits per the configured protocol.
pub fn load_datasets(resolved: &ResolvedRun) -> Result<LoadedData> {
    let ds = &resolved.config.dataset;
    let dir = ds.dir.as_ref().ok_or_else(|| {
        Error::config(format!(
            "dataset.dir: not set (config, --data-dir, or {DATA_DIR_ENV})"
        ))
    })?;
    if !dir.is_dir() {
        return Err(Error::config(format!(
            "dataset.dir: {} is not a directory",
            dir.display()
        )));
    }
    let name = ds.name;
    let (mut full_train, mut test) = match name {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            let train = load_idx(
                &require_file(dir, "train-images-idx3-ubyte")?,
                &require_file(dir, "train-labels-idx1-ubyte")?,
                name.n_classes(),
            )?;
            let test = load_idx(
                &require_file(dir, "t10k-images-idx3-ubyte")?,
                &require_file(dir, "t10k-labels-idx1-ubyte")?,
                name.n_classes(),
            )?;
            (train, test)
        }
        DatasetName::Cifar10 => {
            let batches: Vec<PathBuf> = (1..=5)
                .map(|i| require_file(dir, &format!("data_batch_{i}.bin")))
                .collect::<Result<_>>()?;
            let train = load_cifar(&batches, CifarVariant::Ten)?;
            let test = load_cifar(&[require_file(dir, "test_batch.bin")?], CifarVariant::Ten)?;
            (train, test)
        }
        DatasetName::Cifar100 => {
            let train = load_cifar(&[require_file(dir, "train.bin")?], CifarVariant::Hundred)?;
            let test = load_cifar(&[require_file(dir, "test.bin")?], CifarVariant::Hundred)?;
            (train, test)
        }
    };

    // Channel statistics: computed from the training files once, cached as
    // a sidecar next to them. Failing to write the cache is not fatal.
    let stats_path = dir.join(format!("{}.stats.json", name.stats_stem()));
    let stats = match load_stats(&stats_path) {
        Ok(stats) => stats,
        Err(_) => {
            let stats = compute_stats(&full_train);
            let _ = store_stats(&stats_path, &stats);
            stats
        }
    };
    normalize(&mut full_train, &stats)?;
    normalize(&mut test, &stats)?;
    test.tag = SplitTag::Test;

    let val_count = ds.val_count.expect("resolved");
    let (mut train, val) = split(&full_train, val_count, resolved.options.seed)?;
    if ds.train_limit > 0 {
        train.truncate(ds.train_limit);
    }
    if ds.test_limit > 0 {
        test.truncate(ds.test_limit);
    }
    Ok(LoadedData { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in_per_dataset() {
        let config = load_config(None, &[]).unwrap();
        let resolved = resolve(
            config,
            &CliOverrides {
                data_dir: Some(PathBuf::from("/nonexistent")),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(resolved.arch.n_classes, 10);
        assert_eq!(resolved.arch.input_shape, [1, 28, 28]);
        assert_eq!(resolved.arch.layers.len(), 4);
        assert_eq!(resolved.options.batch_size, 128);
        assert_eq!(resolved.options.schedule.lr_max, 2e-4);
        assert!(resolved.options.augmentation.is_disabled());
    }

    #[test]
    fn cifar_defaults_differ() {
        let config = load_config(None, &["dataset.name=\"cifar100\"".into()]).unwrap();
        let resolved = resolve(config, &CliOverrides::default()).unwrap();
        assert_eq!(resolved.arch.n_classes, 100);
        assert_eq!(resolved.arch.layers.len(), 7);
        assert_eq!(resolved.options.augmentation.pad_crop, 4);
        assert_eq!(resolved.config.dataset.val_count, Some(5000));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load_config(None, &["training.lr=0.1".into()]).unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
    }

    #[test]
    fn overrides_take_precedence() {
        let config = load_config(None, &["training.seed=7".into()]).unwrap();
        assert_eq!(config.training.seed, 7);
        let resolved = resolve(
            config,
            &CliOverrides {
                seed: Some(9),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(resolved.options.seed, 9);
    }

    #[test]
    fn resolved_json_replays() {
        let config = load_config(None, &["training.epochs=3".into()]).unwrap();
        let resolved = resolve(config, &CliOverrides::default()).unwrap();
        let json = serde_json::to_string_pretty(&resolved.config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resolved.json");
        std::fs::write(&path, json).unwrap();
        let reloaded = load_config(Some(&path), &[]).unwrap();
        let re_resolved = resolve(reloaded, &CliOverrides::default()).unwrap();
        assert_eq!(re_resolved.arch, resolved.arch);
        assert_eq!(re_resolved.options, resolved.options);
    }

    #[test]
    fn missing_data_dir_names_the_field() {
        let config = load_config(None, &[]).unwrap();
        let resolved = resolve(config, &CliOverrides::default()).unwrap();
        if resolved.config.dataset.dir.is_none() {
            let err = load_datasets(&resolved).unwrap_err();
            assert!(err.to_string().contains("dataset.dir"), "{err}");
        }
    }
}
