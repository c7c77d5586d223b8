//! The epoch loop. A session owns a network plus its train/validation
//! splits and advances batch by batch; each epoch ends with a validation
//! pass and a metrics record. Epochs can run sequentially (reference
//! semantics) or layer-pipelined (one worker per stage, bounded queues);
//! because every layer forwards its pre-update activations, both schedules
//! produce bit-identical parameter trajectories.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, epoch_order, AugmentationPolicy, Dataset};
use crate::error::{Error, Result};
use crate::network::{argmax_rows, select_best_layer, Network, Strategy};
use crate::tensor::Tensor;
use crate::trainer::checkpoint::{Checkpoint, CheckpointMeta};
use crate::trainer::opt::{cosine_lr, OptimizerHyper, Schedule};

/// Run-shaping knobs the trainer needs beyond the network itself.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub seed: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerHyper,
    pub schedule: Schedule,
    pub augmentation: AugmentationPolicy,
    pub deterministic: bool,
    pub pipeline: bool,
    pub queue_depth: usize,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub lr: f64,
    pub per_layer_train_loss: Vec<f64>,
    pub per_layer_val_acc: Vec<f64>,
    pub strategy_val_acc: f64,
    /// Real elapsed seconds in performance mode; 0.0 in deterministic mode
    /// so reruns produce bit-identical metrics files.
    pub wall_seconds: f64,
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub best_val_acc: f64,
    pub best_epoch: u64,
    pub metrics: Vec<EpochMetrics>,
}

/// Forward-only evaluation summary for a dataset.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub top1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    pub per_layer_acc: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_layer: Option<usize>,
}

struct PipeMsg {
    input: Tensor<f32>,
    targets: Vec<usize>,
    losses: Vec<f32>,
    gaps: Vec<Tensor<f32>>,
}

/// Training state between batches; checkpointable at any batch boundary.
pub struct TrainSession {
    pub network: Network,
    pub options: TrainOptions,
    train: Dataset,
    val: Dataset,
    epoch: u64,
    batch_idx: u64,
    order: Vec<u32>,
    loss_sums: Vec<f64>,
    classifier_loss_sum: f64,
    pub best_val_acc: f64,
    pub best_epoch: u64,
}

impl TrainSession {
    pub fn new(network: Network, train: Dataset, val: Dataset, options: TrainOptions) -> Result<Self> {
        if options.batch_size == 0 || options.batch_size > train.len() {
            return Err(Error::config(format!(
                "batch size {} invalid for {} training samples",
                options.batch_size,
                train.len()
            )));
        }
        if options.epochs != options.schedule.total_steps {
            return Err(Error::config(
                "schedule total_steps must equal the epoch count (per-epoch cosine)",
            ));
        }
        let n_layers = network.n_layers();
        let order = epoch_order(train.len(), options.seed, 0);
        Ok(TrainSession {
            network,
            options,
            train,
            val,
            epoch: 0,
            batch_idx: 0,
            order,
            loss_sums: vec![0.0; n_layers],
            classifier_loss_sum: 0.0,
            best_val_acc: -1.0,
            best_epoch: 0,
        })
    }

    /// Rebuilds a session from a checkpoint; training continues bit-exactly
    /// in deterministic mode. Scheduling flags are supplied fresh, everything
    /// that defines the trajectory comes from the checkpoint.
    pub fn resume(
        checkpoint: &Checkpoint,
        train: Dataset,
        val: Dataset,
        pipeline: bool,
        deterministic: bool,
        queue_depth: usize,
    ) -> Result<Self> {
        let network = checkpoint.restore_network()?;
        let meta = &checkpoint.meta;
        let options = TrainOptions {
            seed: meta.seed,
            epochs: meta.schedule.total_steps,
            batch_size: meta.batch_size,
            optimizer: meta.optimizer,
            schedule: meta.schedule,
            augmentation: meta.augmentation,
            deterministic,
            pipeline,
            queue_depth,
        };
        let mut session = TrainSession::new(network, train, val, options)?;
        session.epoch = meta.epoch;
        session.batch_idx = meta.batch_idx;
        session.order = epoch_order(session.train.len(), meta.seed, meta.epoch);
        session.loss_sums = meta.loss_sums.clone();
        session.classifier_loss_sum = meta.classifier_loss_sum;
        session.best_val_acc = meta.best_val_acc;
        Ok(session)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batch_idx(&self) -> u64 {
        self.batch_idx
    }

    /// Whole batches per epoch; a trailing partial batch is dropped so every
    /// update sees the same batch size.
    pub fn num_batches(&self) -> u64 {
        (self.train.len() / self.options.batch_size) as u64
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.options.epochs
    }

    fn lr(&self) -> Result<f64> {
        cosine_lr(&self.options.schedule, self.epoch)
    }

    /// Snapshot of the full training state at the current batch boundary.
    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            seed: self.options.seed,
            epoch: self.epoch,
            batch_idx: self.batch_idx,
            best_layer: self.network.best_layer,
            best_val_acc: self.best_val_acc,
            loss_sums: self.loss_sums.clone(),
            classifier_loss_sum: self.classifier_loss_sum,
            optimizer: self.options.optimizer,
            schedule: self.options.schedule,
            batch_size: self.options.batch_size,
            augmentation: self.options.augmentation,
        };
        Checkpoint::capture(&self.network, meta)
    }

    fn compose_batch(&self, batch_idx: u64) -> (Tensor<f32>, Vec<usize>) {
        let bs = self.options.batch_size;
        let start = batch_idx as usize * bs;
        let indices = &self.order[start..start + bs];
        let (mut images, targets) = self.train.gather(indices);
        augment_batch(
            &mut images,
            &self.options.augmentation,
            self.options.seed,
            self.epoch,
            batch_idx,
        );
        (images, targets)
    }

    /// One sequential batch step through every layer (and the classifier).
    pub fn step(&mut self) -> Result<()> {
        if self.finished() {
            return Err(Error::usage("training already finished"));
        }
        let lr = self.lr()? as f32;
        let (images, targets) = self.compose_batch(self.batch_idx);
        let report = self.network.forward_train(&images, &targets, lr)?;
        for (sum, loss) in self.loss_sums.iter_mut().zip(&report.per_layer_loss) {
            *sum += *loss as f64;
        }
        if let Some(l) = report.classifier_loss {
            self.classifier_loss_sum += l as f64;
        }
        self.batch_idx += 1;
        if self.batch_idx >= self.num_batches() {
            self.finish_epoch(0.0)?;
        }
        Ok(())
    }

    /// Runs `n` sequential batch steps, crossing epoch boundaries as needed.
    pub fn run_steps(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            if self.finished() {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    /// Runs the remainder of the current epoch and returns its metrics.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        if self.finished() {
            return Err(Error::usage("training already finished"));
        }
        let started = Instant::now();
        if self.options.pipeline {
            self.run_batches_pipelined()?;
        } else {
            while self.batch_idx < self.num_batches() {
                let lr = self.lr()? as f32;
                let (images, targets) = self.compose_batch(self.batch_idx);
                let report = self.network.forward_train(&images, &targets, lr)?;
                for (sum, loss) in self.loss_sums.iter_mut().zip(&report.per_layer_loss) {
                    *sum += *loss as f64;
                }
                if let Some(l) = report.classifier_loss {
                    self.classifier_loss_sum += l as f64;
                }
                self.batch_idx += 1;
            }
        }
        let wall = started.elapsed().as_secs_f64();
        self.finish_epoch(wall)
    }

    /// Runs every remaining epoch, invoking `on_epoch` after each (metrics
    /// emission, checkpoint-on-improvement live there).
    pub fn run<F>(&mut self, mut on_epoch: F) -> Result<RunArtifacts>
    where
        F: FnMut(&TrainSession, &EpochMetrics) -> Result<()>,
    {
        let mut metrics = Vec::new();
        while !self.finished() {
            let m = self.run_epoch()?;
            on_epoch(self, &m)?;
            metrics.push(m);
        }
        Ok(RunArtifacts {
            best_val_acc: self.best_val_acc,
            best_epoch: self.best_epoch,
            metrics,
        })
    }

    /// Layer-pipelined execution of the epoch's remaining batches: one
    /// worker per stage, bounded queues of the configured depth between
    /// adjacent stages, a producer feeding augmented batches, and the
    /// classifier consuming in batch order. The pipeline is acyclic with
    /// bounded buffers, so it cannot deadlock; a failing stage forwards its
    /// error and the run aborts with that stage named.
    fn run_batches_pipelined(&mut self) -> Result<()> {
        let lr = self.lr()? as f32;
        let batches = self.num_batches();
        let first = self.batch_idx;
        if first >= batches {
            return Ok(());
        }
        let depth = self.options.queue_depth.max(1);
        let n_layers = self.network.layers.len();

        let order = &self.order;
        let train = &self.train;
        let augmentation = self.options.augmentation;
        let seed = self.options.seed;
        let epoch = self.epoch;
        let batch_size = self.options.batch_size;

        let Network {
            layers, classifier, spec, ..
        } = &mut self.network;
        let strategy = spec.strategy;

        let mut loss_sums = vec![0.0f64; n_layers];
        let mut classifier_loss_sum = 0.0f64;

        let result: Result<()> = thread::scope(|scope| {
            let mut senders: Vec<SyncSender<Result<PipeMsg>>> = Vec::with_capacity(n_layers + 1);
            let mut receivers: Vec<Receiver<Result<PipeMsg>>> = Vec::with_capacity(n_layers + 1);
            for _ in 0..=n_layers {
                let (tx, rx) = sync_channel::<Result<PipeMsg>>(depth);
                senders.push(tx);
                receivers.push(rx);
            }
            // Stage workers own their layer and their endpoints.
            let mut stage_rx: Vec<Receiver<Result<PipeMsg>>> = Vec::new();
            let mut final_rx = None;
            for (i, rx) in receivers.into_iter().enumerate() {
                if i < n_layers {
                    stage_rx.push(rx);
                } else {
                    final_rx = Some(rx);
                }
            }
            let final_rx = final_rx.expect("final receiver exists");
            let producer_tx = senders.remove(0);

            scope.spawn(move || {
                for b in first..batches {
                    let start = b as usize * batch_size;
                    let indices = &order[start..start + batch_size];
                    let (mut images, targets) = train.gather(indices);
                    augment_batch(&mut images, &augmentation, seed, epoch, b);
                    let msg = PipeMsg {
                        input: images,
                        targets,
                        losses: Vec::with_capacity(n_layers),
                        gaps: Vec::with_capacity(n_layers),
                    };
                    if producer_tx.send(Ok(msg)).is_err() {
                        break; // downstream already failed
                    }
                }
            });

            for (i, (layer, rx)) in layers.iter_mut().zip(stage_rx).enumerate() {
                let tx = senders.remove(0);
                scope.spawn(move || {
                    while let Ok(incoming) = rx.recv() {
                        let outgoing = incoming.and_then(|mut msg| {
                            let step = layer
                                .step(&msg.input, &msg.targets, lr)
                                .map_err(|e| Error::input(format!("layer {}: {e}", i + 1)))?;
                            msg.losses.push(step.loss);
                            msg.gaps.push(step.gap);
                            msg.input = step.output;
                            Ok(msg)
                        });
                        let failed = outgoing.is_err();
                        if tx.send(outgoing).is_err() || failed {
                            break;
                        }
                    }
                });
            }
            debug_assert!(senders.is_empty());

            while let Ok(incoming) = final_rx.recv() {
                let msg = incoming?;
                for (sum, loss) in loss_sums.iter_mut().zip(&msg.losses) {
                    *sum += *loss as f64;
                }
                if let Some(classifier) = classifier.as_mut() {
                    let features = assemble_features_static(strategy, &msg.gaps)?;
                    let loss = classifier.train_step(&features, &msg.targets, lr)?;
                    classifier_loss_sum += loss as f64;
                }
            }
            Ok(())
        });
        result?;

        for (sum, add) in self.loss_sums.iter_mut().zip(&loss_sums) {
            *sum += add;
        }
        self.classifier_loss_sum += classifier_loss_sum;
        self.batch_idx = batches;
        Ok(())
    }

    /// Validation pass, metrics record, epoch rollover.
    fn finish_epoch(&mut self, wall: f64) -> Result<EpochMetrics> {
        let lr = self.lr()?;
        let batches = self.num_batches().max(1) as f64;
        let per_layer_train_loss: Vec<f64> =
            self.loss_sums.iter().map(|s| s / batches).collect();

        let (per_layer_val_acc, strategy_val_acc) = self.validate()?;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            lr,
            per_layer_train_loss,
            per_layer_val_acc,
            strategy_val_acc,
            wall_seconds: if self.options.deterministic { 0.0 } else { wall },
        };
        if strategy_val_acc > self.best_val_acc {
            self.best_val_acc = strategy_val_acc;
            self.best_epoch = self.epoch;
        }
        self.epoch += 1;
        self.batch_idx = 0;
        if !self.finished() {
            self.order = epoch_order(self.train.len(), self.options.seed, self.epoch);
        }
        self.loss_sums = vec![0.0; self.network.n_layers()];
        self.classifier_loss_sum = 0.0;
        Ok(metrics)
    }

    /// Per-layer and strategy accuracy over the validation split. Under the
    /// classifier-free strategy this also records the best layer (first
    /// layer excluded from candidacy).
    pub fn validate(&mut self) -> Result<(Vec<f64>, f64)> {
        let report = evaluate_with_best(
            &mut self.network,
            &self.val,
            self.options.batch_size,
            true,
        )?;
        Ok((report.per_layer_acc, report.top1))
    }
}

fn assemble_features_static(strategy: Strategy, gaps: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    match strategy {
        Strategy::Last => Ok(gaps.last().unwrap().clone()),
        Strategy::Fusion => {
            let batch = gaps[0].shape()[0];
            let dim: usize = gaps[1..].iter().map(|g| g.shape()[1]).sum();
            let mut out = Tensor::zeros(&[batch, dim]);
            let mut offset = 0;
            for g in &gaps[1..] {
                let width = g.shape()[1];
                for b in 0..batch {
                    let src = &g.data()[b * width..(b + 1) * width];
                    out.data_mut()[b * dim + offset..b * dim + offset + width]
                        .copy_from_slice(src);
                }
                offset += width;
            }
            Ok(out)
        }
        Strategy::Best => Err(Error::usage("classifier-free strategy has no features")),
    }
}

fn top_k_hit(logits_row: &[f32], target: usize, k: usize) -> bool {
    let target_score = logits_row[target];
    let better = logits_row
        .iter()
        .enumerate()
        .filter(|(i, v)| **v > target_score || (**v == target_score && *i < target))
        .count();
    better < k
}

/// Forward-only evaluation of a dataset: per-layer projection accuracy and
/// the strategy's top-1 (plus top-5 for 100-way and larger label spaces).
pub fn evaluate(network: &Network, dataset: &Dataset, batch_size: usize) -> Result<EvalReport> {
    // Shared with validation, but never (re)records the best layer.
    let mut network = network.clone();
    evaluate_with_best(&mut network, dataset, batch_size, false)
}

fn evaluate_with_best(
    network: &mut Network,
    dataset: &Dataset,
    batch_size: usize,
    record_best: bool,
) -> Result<EvalReport> {
    let n_layers = network.n_layers();
    let n = dataset.len();
    if n == 0 {
        return Err(Error::usage("empty evaluation dataset"));
    }
    let mut layer_hits = vec![0u64; n_layers];
    let mut strategy_hits = 0u64;
    let mut top5_hits = 0u64;
    let want_top5 = dataset.n_classes >= 100;
    let has_classifier = network.classifier.is_some();

    let indices: Vec<u32> = (0..n as u32).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, targets) = dataset.gather(chunk);
        let pass = network.forward_all(&images)?;
        for (l, logits) in pass.per_layer_logits.iter().enumerate() {
            let preds = argmax_rows(logits);
            layer_hits[l] += preds
                .iter()
                .zip(&targets)
                .filter(|(p, t)| p == t)
                .count() as u64;
        }
        if has_classifier {
            let features = network.assemble_features(&pass.gaps)?;
            let logits = network.classifier.as_ref().unwrap().logits(&features)?;
            let preds = argmax_rows(&logits);
            strategy_hits += preds
                .iter()
                .zip(&targets)
                .filter(|(p, t)| p == t)
                .count() as u64;
            if want_top5 {
                let width = dataset.n_classes;
                for (row, &t) in logits.data().chunks(width).zip(&targets) {
                    if top_k_hit(row, t, 5) {
                        top5_hits += 1;
                    }
                }
            }
        }
    }
    let per_layer_acc: Vec<f64> = layer_hits.iter().map(|&h| h as f64 / n as f64).collect();

    let (top1, top5, best_layer) = if has_classifier {
        (
            strategy_hits as f64 / n as f64,
            want_top5.then(|| top5_hits as f64 / n as f64),
            network.best_layer,
        )
    } else {
        // Classifier-free: pick the best-validating layer (first layer
        // excluded from candidacy) during validation, reuse the recorded
        // one everywhere else.
        let best = if record_best {
            let candidate = select_best_layer(&per_layer_acc[1..])? + 1;
            network.record_best_layer(candidate)?;
            candidate
        } else {
            network.best_layer.ok_or_else(|| {
                Error::usage("best-layer strategy requires a recorded best layer")
            })?
        };
        (per_layer_acc[best], None, Some(best))
    };
    Ok(EvalReport {
        top1,
        top5,
        per_layer_acc,
        best_layer,
    })
}

/// Accuracy of predictions over a labelled dataset in batches.
pub fn predict_accuracy(network: &Network, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    let n = dataset.len();
    let indices: Vec<u32> = (0..n as u32).collect();
    let mut hits = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, targets) = dataset.gather(chunk);
        let logits = network.strategy_logits(&images)?;
        let preds = argmax_rows(&logits);
        hits += preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
    }
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitTag;
    use crate::layers::{PoolKind, PoolSpec};
    use crate::network::{build_network, ArchSpec, LayerSpec};

    use crate::data::synthetic_textures as synthetic_dataset;

    fn small_arch() -> ArchSpec {
        ArchSpec {
            input_shape: [1, 8, 8],
            n_classes: 4,
            alpha: 1.0,
            strategy: Strategy::Fusion,
            layers: vec![
                LayerSpec::channels(4).with_pool(PoolSpec::new(PoolKind::Rms)),
                LayerSpec::channels(8),
            ],
        }
    }

    fn options(pipeline: bool) -> TrainOptions {
        TrainOptions {
            seed: 42,
            epochs: 4,
            batch_size: 16,
            optimizer: OptimizerHyper::adamw(0.001),
            schedule: Schedule::new(0.01, 1e-4, 4).unwrap(),
            augmentation: AugmentationPolicy::disabled(),
            deterministic: true,
            pipeline,
            queue_depth: 2,
        }
    }

    fn session(pipeline: bool) -> TrainSession {
        let arch = small_arch();
        let network = build_network(&arch, 42, OptimizerHyper::adamw(0.001)).unwrap();
        let train = synthetic_dataset(256, 1, SplitTag::Train);
        let val = synthetic_dataset(64, 2, SplitTag::Val);
        TrainSession::new(network, train, val, options(pipeline)).unwrap()
    }

    fn network_bytes(network: &Network) -> Vec<u8> {
        let mut out = Vec::new();
        for l in &network.layers {
            for v in l.conv.weights.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in l.conv.bias.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(c) = &network.classifier {
            for v in c.weights.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in c.bias.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    #[test]
    fn sequential_and_pipelined_trajectories_are_bit_identical() {
        let mut seq = session(false);
        let mut pipe = session(true);
        let m1 = seq.run_epoch().unwrap();
        let m2 = pipe.run_epoch().unwrap();
        assert_eq!(network_bytes(&seq.network), network_bytes(&pipe.network));
        assert_eq!(m1.per_layer_train_loss, m2.per_layer_train_loss);
        assert_eq!(m1.per_layer_val_acc, m2.per_layer_val_acc);
        // Another epoch, same story.
        seq.run_epoch().unwrap();
        pipe.run_epoch().unwrap();
        assert_eq!(network_bytes(&seq.network), network_bytes(&pipe.network));
    }

    #[test]
    fn deterministic_reruns_match() {
        let mut a = session(false);
        let mut b = session(false);
        let ra = a.run(|_, _| Ok(())).unwrap();
        let rb = b.run(|_, _| Ok(())).unwrap();
        assert_eq!(ra.metrics, rb.metrics);
        assert_eq!(network_bytes(&a.network), network_bytes(&b.network));
    }

    #[test]
    fn checkpoint_resume_continues_bit_exactly() {
        let mut reference = session(false);
        let mut interrupted = session(false);
        interrupted.run_steps(3).unwrap();
        let ckpt = interrupted.checkpoint();
        reference.run_steps(3).unwrap();

        let train = synthetic_dataset(256, 1, SplitTag::Train);
        let val = synthetic_dataset(64, 2, SplitTag::Val);
        let mut resumed = TrainSession::resume(&ckpt, train, val, false, true, 2).unwrap();
        assert_eq!(resumed.epoch(), interrupted.epoch());
        assert_eq!(resumed.batch_idx(), interrupted.batch_idx());

        reference.run_steps(10).unwrap();
        resumed.run_steps(10).unwrap();
        assert_eq!(
            network_bytes(&reference.network),
            network_bytes(&resumed.network)
        );
    }

    #[test]
    fn training_learns_the_synthetic_task() {
        let mut s = session(false);
        let artifacts = s.run(|_, _| Ok(())).unwrap();
        // The texture classes differ in patch energy, so the deepest
        // layer's goodness projection should solve them.
        let last = artifacts.metrics.last().unwrap();
        let deepest = *last.per_layer_val_acc.last().unwrap();
        assert!(deepest >= 0.9, "deepest layer stuck at {deepest}");
        let first_loss = artifacts.metrics.first().unwrap().per_layer_train_loss[1];
        let last_loss = last.per_layer_train_loss[1];
        assert!(last_loss < first_loss, "layer loss did not decrease");
        assert!(artifacts.best_val_acc >= 0.5, "classifier collapsed");
        for m in &artifacts.metrics {
            for loss in &m.per_layer_train_loss {
                assert!(loss.is_finite());
            }
        }
    }

    #[test]
    fn best_strategy_records_a_layer_and_reports_its_accuracy() {
        let mut arch = small_arch();
        arch.strategy = Strategy::Best;
        let network = build_network(&arch, 7, OptimizerHyper::adamw(0.001)).unwrap();
        let train = synthetic_dataset(96, 3, SplitTag::Train);
        let val = synthetic_dataset(48, 4, SplitTag::Val);
        let mut opts = options(false);
        opts.epochs = 1;
        opts.schedule = Schedule::new(0.01, 1e-4, 1).unwrap();
        let mut s = TrainSession::new(network, train, val, opts).unwrap();
        let m = s.run_epoch().unwrap();
        let best = s.network.best_layer.expect("best layer recorded");
        assert!(best >= 1, "first layer excluded from candidates");
        assert_eq!(m.strategy_val_acc, m.per_layer_val_acc[best]);
    }

    #[test]
    fn stage_errors_name_the_layer() {
        let mut s = session(true);
        // Poison layer 2 so its patch energies overflow and the loss turns
        // non-finite.
        for v in s.network.layers[1].conv.weights.data_mut() {
            *v = 1e25;
        }
        let err = s.run_epoch().unwrap_err();
        assert!(err.to_string().contains("layer 2"), "{err}");
    }
}
