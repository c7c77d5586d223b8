//! Architecture description and the assembled layer stack. Layers are
//! trained strictly in isolation; what flows between them is a detached
//! activation tensor, so the stack is a pipeline of independently owned
//! states rather than one differentiable graph.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::goodness::{partition_factor, PartitionPlan};
use crate::layers::{AsgeLayer, NormSpec, PoolSpec};
use crate::rng::{rng_from_seed, substream_seed, Stream};
use crate::supervision::{local_ce_loss, make_projection, Logits};
use crate::tensor::{matmul, matmul_at, ConvParams, Tensor};
use crate::trainer::opt::{OptimizerHyper, ParamState};

/// How the stack produces its final class prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Linear classifier over the last conv layer's pooled features.
    Last,
    /// Linear classifier over concatenated pooled features of every conv
    /// layer except the first.
    Fusion,
    /// The frozen projection logits of whichever layer validated best; no
    /// classifier at all, and inference can stop early at that layer.
    Best,
}

/// One convolutional stage of the stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_padding")]
    pub padding: usize,
    #[serde(default)]
    pub pool: Option<PoolSpec>,
    #[serde(default)]
    pub norm: NormSpec,
}

fn default_kernel() -> usize {
    3
}
fn default_stride() -> usize {
    1
}
fn default_padding() -> usize {
    1
}

impl LayerSpec {
    pub fn channels(out_channels: usize) -> Self {
        LayerSpec {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            pool: None,
            norm: NormSpec::default(),
        }
    }

    pub fn with_pool(mut self, pool: PoolSpec) -> Self {
        self.pool = Some(pool);
        self
    }
}

/// Full declarative description of a stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// `[C, H, W]` of one input sample.
    pub input_shape: [usize; 3],
    pub n_classes: usize,
    /// Partition granularity; larger means finer patch tiling.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub layers: Vec<LayerSpec>,
}

fn default_alpha() -> f64 {
    1.0
}
fn default_strategy() -> Strategy {
    Strategy::Fusion
}

/// Traced shapes for one layer after validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    /// Post-convolution (= goodness tap) extents.
    pub conv_h: usize,
    pub conv_w: usize,
    pub out_channels: usize,
    pub partition: usize,
    /// Post-pool extents (equal to conv extents when there is no pool).
    pub out_h: usize,
    pub out_w: usize,
}

impl ArchSpec {
    /// The VGG8-style default: seven 3x3 conv layers with channel widths
    /// 128/128/256/256/512/512/512, 2x2 pooling after layers 2, 4 and 7.
    pub fn vgg8(input_shape: [usize; 3], n_classes: usize, pool_kind: crate::layers::PoolKind) -> Self {
        let widths = [128usize, 128, 256, 256, 512, 512, 512];
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let spec = LayerSpec::channels(c);
                if matches!(i + 1, 2 | 4 | 7) {
                    spec.with_pool(PoolSpec::new(pool_kind))
                } else {
                    spec
                }
            })
            .collect();
        ArchSpec {
            input_shape,
            n_classes,
            alpha: 1.0,
            strategy: Strategy::Fusion,
            layers,
        }
    }

    /// Layer list actually built. Under the classifier-free strategy the
    /// final layer is a copy of the one before it.
    pub fn effective_layers(&self) -> Vec<LayerSpec> {
        let mut layers = self.layers.clone();
        if self.strategy == Strategy::Best && layers.len() >= 2 {
            layers[self.layers.len() - 1] = layers[self.layers.len() - 2].clone();
        }
        layers
    }

    /// Validates the whole stack and traces per-layer shapes. Errors carry
    /// the offending 1-based layer index.
    pub fn trace(&self) -> Result<Vec<LayerGeometry>> {
        if self.layers.len() < 2 {
            return Err(Error::config(format!(
                "stack needs at least 2 conv layers, got {}",
                self.layers.len()
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must be >= 2"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha must be finite and >= 0"));
        }
        let layers = self.effective_layers();
        let c_last = layers.last().unwrap().out_channels;
        let [mut c, mut h, mut w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("input shape extents must be >= 1"));
        }
        let mut out = Vec::with_capacity(layers.len());
        for (i, spec) in layers.iter().enumerate() {
            let layer_no = i + 1;
            if spec.out_channels == 0 {
                return Err(Error::config(format!("layer {layer_no}: zero channels")));
            }
            if spec.kernel % 2 == 0 || spec.kernel == 0 {
                return Err(Error::config(format!(
                    "layer {layer_no}: kernel must be odd, got {}",
                    spec.kernel
                )));
            }
            if spec.norm.affine {
                return Err(Error::config(format!(
                    "layer {layer_no}: learnable affine norm is not supported"
                )));
            }
            let span_h = h + 2 * spec.padding;
            let span_w = w + 2 * spec.padding;
            if span_h < spec.kernel || span_w < spec.kernel {
                return Err(Error::config(format!(
                    "layer {layer_no}: {h}x{w} too small for kernel {}",
                    spec.kernel
                )));
            }
            if (span_h - spec.kernel) % spec.stride != 0 || (span_w - spec.kernel) % spec.stride != 0
            {
                return Err(Error::config(format!(
                    "layer {layer_no}: geometry does not tile with stride {}",
                    spec.stride
                )));
            }
            let conv_h = (span_h - spec.kernel) / spec.stride + 1;
            let conv_w = (span_w - spec.kernel) / spec.stride + 1;
            let partition = partition_factor(self.alpha, spec.out_channels, c_last, conv_h, conv_w);
            let (out_h, out_w) = match &spec.pool {
                Some(p) => p.out_extent(conv_h, conv_w).map_err(|e| {
                    Error::config(format!("layer {layer_no}: {e}"))
                })?,
                None => (conv_h, conv_w),
            };
            out.push(LayerGeometry {
                in_channels: c,
                in_h: h,
                in_w: w,
                conv_h,
                conv_w,
                out_channels: spec.out_channels,
                partition,
                out_h,
                out_w,
            });
            c = spec.out_channels;
            h = out_h;
            w = out_w;
        }
        Ok(out)
    }

    /// Dimension of the classifier input under the configured strategy.
    /// Zero for the classifier-free strategy.
    pub fn classifier_dim(&self) -> Result<usize> {
        let geometry = self.trace()?;
        Ok(match self.strategy {
            Strategy::Last => geometry.last().unwrap().out_channels,
            Strategy::Fusion => geometry[1..].iter().map(|g| g.out_channels).sum(),
            Strategy::Best => 0,
        })
    }

    /// SHA-256 over the canonical JSON encoding; identifies an architecture
    /// in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("arch spec serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        hasher.finalize().into()
    }
}

/// Trainable single-layer linear classifier head.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    /// `[D, N]`
    pub weights: Tensor<f32>,
    /// `[N]`
    pub bias: Tensor<f32>,
    pub w_state: ParamState,
    pub b_state: ParamState,
}

impl LinearClassifier {
    pub fn new(in_dim: usize, n_classes: usize, hyper: OptimizerHyper) -> Self {
        LinearClassifier {
            weights: Tensor::zeros(&[in_dim, n_classes]),
            bias: Tensor::zeros(&[n_classes]),
            w_state: ParamState::new(hyper, in_dim * n_classes),
            b_state: ParamState::new(hyper, n_classes),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn logits(&self, features: &Tensor<f32>) -> Result<Logits<f32>> {
        let (batch, dim) = features.dims2()?;
        let (d, n) = self.weights.dims2()?;
        if dim != d {
            return Err(Error::config(format!(
                "classifier expects {d}-dim features, got {dim}"
            )));
        }
        let mut out = Tensor::zeros(&[batch, n]);
        matmul(features.data(), self.weights.data(), batch, dim, n, out.data_mut());
        for row in out.data_mut().chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += *b;
            }
        }
        Ok(out)
    }

    /// One cross-entropy step on detached features. Touches nothing but the
    /// classifier's own parameters.
    pub fn train_step(&mut self, features: &Tensor<f32>, targets: &[usize], lr: f32) -> Result<f32> {
        let logits = self.logits(features)?;
        let (loss, d_logits) = local_ce_loss(&logits, targets)?;
        let (batch, dim) = features.dims2()?;
        let n = self.bias.len();
        // dW = features^T [D, B] x d_logits [B, N]
        let mut dw = vec![0.0f32; dim * n];
        matmul_at(features.data(), d_logits.data(), batch, dim, n, &mut dw);
        let mut db = vec![0.0f32; n];
        for row in d_logits.data().chunks(n) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += *v;
            }
        }
        self.w_state.apply(self.weights.data_mut(), &dw, lr);
        self.b_state.apply(self.bias.data_mut(), &db, lr);
        Ok(loss)
    }
}

/// A built stack: layer states, optional classifier, and bookkeeping.
#[derive(Debug)]
pub struct Network {
    pub spec: ArchSpec,
    pub geometry: Vec<LayerGeometry>,
    pub layers: Vec<AsgeLayer>,
    pub classifier: Option<LinearClassifier>,
    /// 0-based index of the best-validating layer, once recorded.
    pub best_layer: Option<usize>,
    /// Per-layer forward-execution counters (observable early exit).
    exec_counts: Vec<AtomicU64>,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            spec: self.spec.clone(),
            geometry: self.geometry.clone(),
            layers: self.layers.clone(),
            classifier: self.classifier.clone(),
            best_layer: self.best_layer,
            exec_counts: self
                .exec_counts
                .iter()
                .map(|c| AtomicU64::new(c.load(Ordering::Relaxed)))
                .collect(),
        }
    }
}

/// Builds a stack from its spec: He-initialized convolutions, one frozen
/// projection head per layer (seeded from the run seed and layer index),
/// and a zero-initialized classifier when the strategy wants one.
pub fn build_network(spec: &ArchSpec, seed: u64, hyper: OptimizerHyper) -> Result<Network> {
    let geometry = spec.trace()?;
    let layer_specs = spec.effective_layers();
    let mut layers = Vec::with_capacity(layer_specs.len());
    for (i, (layer_spec, geo)) in layer_specs.iter().zip(&geometry).enumerate() {
        let fan_in = geo.in_channels * layer_spec.kernel * layer_spec.kernel;
        let std = (2.0 / fan_in as f64).sqrt() as f32;
        let mut rng = rng_from_seed(substream_seed(seed, Stream::Init, i as u64));
        let weights = Tensor::randn(
            &[
                layer_spec.out_channels,
                geo.in_channels,
                layer_spec.kernel,
                layer_spec.kernel,
            ],
            std,
            &mut rng,
        );
        let conv = ConvParams::new(
            weights,
            Tensor::zeros(&[layer_spec.out_channels]),
            layer_spec.stride,
            layer_spec.padding,
        )?;
        let plan = PartitionPlan::new(geo.out_channels, geo.conv_h, geo.conv_w, geo.partition)?;
        let head_seed = substream_seed(seed, Stream::Projection, i as u64);
        let head = make_projection(head_seed, plan.goodness_dim(), spec.n_classes);
        layers.push(AsgeLayer {
            w_state: ParamState::new(hyper, conv.weights.len()),
            b_state: ParamState::new(hyper, conv.bias.len()),
            conv,
            head,
            plan,
            pool: layer_spec.pool,
            norm: layer_spec.norm,
        });
    }
    let classifier = match spec.strategy {
        Strategy::Best => None,
        _ => Some(LinearClassifier::new(
            spec.classifier_dim()?,
            spec.n_classes,
            hyper,
        )),
    };
    let exec_counts = (0..layers.len()).map(|_| AtomicU64::new(0)).collect();
    Ok(Network {
        spec: spec.clone(),
        geometry,
        layers,
        classifier,
        best_layer: None,
        exec_counts,
    })
}

/// Per-layer results of one training batch.
pub struct TrainBatchReport {
    pub per_layer_loss: Vec<f32>,
    pub per_layer_accuracy: Vec<f64>,
    pub classifier_loss: Option<f32>,
}

/// Forward-only results for a batch.
pub struct ForwardPass {
    pub per_layer_logits: Vec<Logits<f32>>,
    pub gaps: Vec<Tensor<f32>>,
}

pub fn argmax_rows(logits: &Logits<f32>) -> Vec<usize> {
    let (_, n) = logits.dims2().expect("logits are 2-d");
    logits
        .data()
        .chunks(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

pub fn accuracy(predictions: &[usize], targets: &[usize]) -> f64 {
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| p == t)
        .count();
    hits as f64 / targets.len().max(1) as f64
}

impl Network {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn exec_count(&self, layer: usize) -> u64 {
        self.exec_counts[layer].load(Ordering::Relaxed)
    }

    pub fn reset_exec_counts(&self) {
        for c in &self.exec_counts {
            c.store(0, Ordering::Relaxed);
        }
    }

    fn bump(&self, layer: usize) {
        self.exec_counts[layer].fetch_add(1, Ordering::Relaxed);
    }

    /// Classifier feature vector for a forward pass under the configured
    /// strategy: last layer's pooled features, or the concatenation over
    /// layers 2..=L.
    pub fn assemble_features(&self, gaps: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        match self.spec.strategy {
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
            Strategy::Best => Err(Error::usage(
                "classifier-free strategy has no feature vector",
            )),
        }
    }

    /// Trains every layer (and the classifier, when present) on one batch.
    /// Each layer consumes the detached, pre-update output of the previous
    /// one.
    pub fn forward_train(
        &mut self,
        batch: &Tensor<f32>,
        targets: &[usize],
        lr: f32,
    ) -> Result<TrainBatchReport> {
        let mut per_layer_loss = Vec::with_capacity(self.layers.len());
        let mut per_layer_accuracy = Vec::with_capacity(self.layers.len());
        let mut gaps = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for i in 0..self.layers.len() {
            self.exec_counts[i].fetch_add(1, Ordering::Relaxed);
            let step = self.layers[i].step(&current, targets, lr).map_err(|e| {
                Error::input(format!("layer {}: {e}", i + 1))
            })?;
            per_layer_loss.push(step.loss);
            per_layer_accuracy.push(accuracy(&argmax_rows(&step.logits), targets));
            gaps.push(step.gap);
            current = step.output;
        }
        let classifier_loss = match &mut self.classifier {
            Some(classifier) => {
                let features = match self.spec.strategy {
                    Strategy::Last => gaps.last().unwrap().clone(),
                    Strategy::Fusion => {
                        // Inline to sidestep borrow of self while classifier
                        // is mutably borrowed.
                        let batch_n = gaps[0].shape()[0];
                        let dim: usize = gaps[1..].iter().map(|g| g.shape()[1]).sum();
                        let mut out = Tensor::zeros(&[batch_n, dim]);
                        let mut offset = 0;
                        for g in &gaps[1..] {
                            let width = g.shape()[1];
                            for b in 0..batch_n {
                                let src = &g.data()[b * width..(b + 1) * width];
                                out.data_mut()[b * dim + offset..b * dim + offset + width]
                                    .copy_from_slice(src);
                            }
                            offset += width;
                        }
                        out
                    }
                    Strategy::Best => unreachable!("no classifier under best strategy"),
                };
                Some(classifier.train_step(&features, targets, lr)?)
            }
            None => None,
        };
        Ok(TrainBatchReport {
            per_layer_loss,
            per_layer_accuracy,
            classifier_loss,
        })
    }

    /// Forward-only pass through every layer, collecting projection logits
    /// and pooled features.
    pub fn forward_all(&self, batch: &Tensor<f32>) -> Result<ForwardPass> {
        let mut per_layer_logits = Vec::with_capacity(self.layers.len());
        let mut gaps = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            self.bump(i);
            let fwd = layer.forward(&current)?;
            per_layer_logits.push(fwd.logits);
            gaps.push(fwd.gap);
            current = fwd.output;
        }
        Ok(ForwardPass {
            per_layer_logits,
            gaps,
        })
    }

    /// Strategy logits for a batch (classifier logits, or the recorded best
    /// layer's projection logits).
    pub fn strategy_logits(&self, batch: &Tensor<f32>) -> Result<Logits<f32>> {
        match self.spec.strategy {
            Strategy::Best => {
                let best = self.best_layer.ok_or_else(|| {
                    Error::usage("best-layer strategy requires a recorded best layer")
                })?;
                let mut current = batch.clone();
                // Early exit: layers beyond the best one never run.
                for (i, layer) in self.layers.iter().take(best + 1).enumerate() {
                    self.bump(i);
                    let fwd = layer.forward(&current)?;
                    if i == best {
                        return Ok(fwd.logits);
                    }
                    current = fwd.output;
                }
                unreachable!("best layer index validated at record time")
            }
            _ => {
                let classifier = self
                    .classifier
                    .as_ref()
                    .expect("classifier exists for last/fusion");
                let pass = self.forward_all(batch)?;
                let features = self.assemble_features(&pass.gaps)?;
                classifier.logits(&features)
            }
        }
    }

    pub fn predict_last(&self, batch: &Tensor<f32>) -> Result<Vec<usize>> {
        if self.spec.strategy != Strategy::Last {
            return Err(Error::usage("network was not built for last-layer prediction"));
        }
        Ok(argmax_rows(&self.strategy_logits(batch)?))
    }

    pub fn predict_fusion(&self, batch: &Tensor<f32>) -> Result<Vec<usize>> {
        if self.spec.strategy != Strategy::Fusion {
            return Err(Error::usage("network was not built for fusion prediction"));
        }
        Ok(argmax_rows(&self.strategy_logits(batch)?))
    }

    pub fn predict_best(&self, batch: &Tensor<f32>) -> Result<Vec<usize>> {
        if self.spec.strategy != Strategy::Best {
            return Err(Error::usage("network was not built for best-layer prediction"));
        }
        Ok(argmax_rows(&self.strategy_logits(batch)?))
    }

    pub fn record_best_layer(&mut self, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::usage(format!(
                "best layer {layer} out of range for {} layers",
                self.layers.len()
            )));
        }
        self.best_layer = Some(layer);
        Ok(())
    }
}

/// Index of the highest accuracy, ties broken toward the shallower layer.
pub fn select_best_layer(accuracies: &[f64]) -> Result<usize> {
    if accuracies.is_empty() {
        return Err(Error::usage("no per-layer accuracies to select from"));
    }
    let mut best = 0;
    for (i, &acc) in accuracies.iter().enumerate() {
        if acc > accuracies[best] {
            best = i;
        }
    }
    Ok(best)
}
