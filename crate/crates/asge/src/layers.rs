//! Non-trained forward transforms (pooling, layer normalization) and the
//! assembled per-layer training step. Pooling and normalization sit strictly
//! between a layer's goodness tap and the next layer's detached input, so
//! neither needs a backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goodness::PartitionPlan;
use crate::supervision::{layer_chain, Logits, ProjectionHead};
use crate::tensor::{conv2d_forward, global_avg_pool, relu, ConvParams, Scalar, Tensor};
use crate::trainer::opt::ParamState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Rms,
    Avg,
    Max,
}

/// Windowed downsampling. The default 2x2/stride-2 tiles the map exactly,
/// which is what keeps RMS pooling energy-conserving.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kind: PoolKind,
    #[serde(default = "default_pool_extent")]
    pub window: usize,
    #[serde(default = "default_pool_extent")]
    pub stride: usize,
}

fn default_pool_extent() -> usize {
    2
}

impl PoolSpec {
    pub fn new(kind: PoolKind) -> Self {
        PoolSpec {
            kind,
            window: 2,
            stride: 2,
        }
    }

    pub fn out_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::config("pool window and stride must be >= 1"));
        }
        if self.window > h || self.window > w {
            return Err(Error::config(format!(
                "pool window {} larger than map {h}x{w}",
                self.window
            )));
        }
        if (h - self.window) % self.stride != 0 || (w - self.window) % self.stride != 0 {
            return Err(Error::config(format!(
                "pool window {} stride {} does not tile {h}x{w}",
                self.window, self.stride
            )));
        }
        Ok((
            (h - self.window) / self.stride + 1,
            (w - self.window) / self.stride + 1,
        ))
    }
}

macro_rules! pool_impl {
    ($input:expr, $spec:expr, $init:expr, $fold:expr, $finish:expr) => {{
        let input = $input;
        let spec = $spec;
        let (b, c, h, w) = input.dims4()?;
        let (oh, ow) = spec.out_extent(h, w)?;
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let area = T::from_f64((spec.window * spec.window) as f64);
        let src = input.data();
        let dst = out.data_mut();
        let mut idx = 0;
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * spec.stride;
                    let x0 = ox * spec.stride;
                    let mut acc = $init;
                    for dy in 0..spec.window {
                        let row = base + (y0 + dy) * w + x0;
                        for v in &src[row..row + spec.window] {
                            acc = $fold(acc, *v);
                        }
                    }
                    dst[idx] = $finish(acc, area);
                    idx += 1;
                }
            }
        }
        Ok(out)
    }};
}

/// Root of the mean of squares over each window: the energy-preserving
/// downsampler the goodness statistic assumes.
pub fn rms_pool<T: Scalar>(input: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    pool_impl!(
        input,
        spec,
        T::zero(),
        |acc: T, v: T| acc + v * v,
        |acc: T, area: T| (acc / area).sqrt()
    )
}

pub fn avg_pool<T: Scalar>(input: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    pool_impl!(
        input,
        spec,
        T::zero(),
        |acc: T, v: T| acc + v,
        |acc: T, area: T| acc / area
    )
}

pub fn max_pool<T: Scalar>(input: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    pool_impl!(
        input,
        spec,
        T::neg_infinity(),
        |acc: T, v: T| if v > acc { v } else { acc },
        |acc: T, _area: T| acc
    )
}

pub fn pool<T: Scalar>(input: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    match spec.kind {
        PoolKind::Rms => rms_pool(input, spec),
        PoolKind::Avg => avg_pool(input, spec),
        PoolKind::Max => max_pool(input, spec),
    }
}

/// Per-sample normalization over all of (C, H, W), no learnable affine.
/// An affine here could never receive gradient (it sits downstream of the
/// layer's own detach), so it would be dead weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSpec {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub affine: bool,
}

fn default_epsilon() -> f64 {
    1e-5
}

impl Default for NormSpec {
    fn default() -> Self {
        NormSpec {
            epsilon: 1e-5,
            affine: false,
        }
    }
}

pub fn layer_norm<T: Scalar>(input: &Tensor<T>, spec: &NormSpec) -> Result<Tensor<T>> {
    if spec.epsilon <= 0.0 {
        return Err(Error::config("layer norm epsilon must be positive"));
    }
    if spec.affine {
        return Err(Error::config("learnable affine is not supported"));
    }
    let (b, c, h, w) = input.dims4()?;
    let per = c * h * w;
    let n = T::from_f64(per as f64);
    let eps = T::from_f64(spec.epsilon);
    let mut out = input.clone();
    for sample in out.data_mut().chunks_mut(per) {
        let mean = sample.iter().copied().sum::<T>() / n;
        let var = sample
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / n;
        let inv = T::one() / (var + eps).sqrt();
        for v in sample {
            *v = (*v - mean) * inv;
        }
    }
    let _ = b;
    Ok(out)
}

/// One trainable unit of the stack: a convolution supervised through its
/// frozen projection head, plus the non-trained transforms that shape its
/// forwarded output.
#[derive(Clone, Debug)]
pub struct AsgeLayer {
    pub conv: ConvParams<f32>,
    pub head: ProjectionHead<f32>,
    pub plan: PartitionPlan,
    pub pool: Option<PoolSpec>,
    pub norm: NormSpec,
    pub w_state: ParamState,
    pub b_state: ParamState,
}

/// Outcome of one layer-local training step.
pub struct LayerStep {
    /// Pooled, normalized output for the next stage. Computed from the
    /// parameters as they were when the step began (pre-update), which is
    /// what makes sequential and pipelined training produce identical
    /// trajectories. Carries no gradient linkage by construction.
    pub output: Tensor<f32>,
    pub loss: f32,
    pub logits: Logits<f32>,
    /// Global average pooling of the post-activation maps, for downstream
    /// classifier heads.
    pub gap: Tensor<f32>,
}

/// Forward-only pass through one layer.
pub struct LayerForward {
    pub activations: Tensor<f32>,
    pub output: Tensor<f32>,
    pub logits: Logits<f32>,
    pub gap: Tensor<f32>,
}

impl AsgeLayer {
    /// Pool (if configured) then layer-normalize.
    fn transform(&self, activations: &Tensor<f32>) -> Result<Tensor<f32>> {
        let pooled = match &self.pool {
            Some(spec) => pool(activations, spec)?,
            None => activations.clone(),
        };
        layer_norm(&pooled, &self.norm)
    }

    /// Trains this layer on one batch: computes the layer-local loss and its
    /// parameter gradients, applies the optimizer to this layer only, and
    /// forwards the pre-update activations downstream.
    pub fn step(&mut self, input: &Tensor<f32>, targets: &[usize], lr: f32) -> Result<LayerStep> {
        let chain = layer_chain(input, &self.conv, &self.head, &self.plan, targets)?;
        if !chain.loss.is_finite() {
            return Err(Error::input("non-finite layer loss"));
        }
        let output = self.transform(&chain.activations)?;
        let gap = global_avg_pool(&chain.activations)?;
        self.w_state
            .apply(self.conv.weights.data_mut(), chain.d_weights.data(), lr);
        self.b_state
            .apply(self.conv.bias.data_mut(), chain.d_bias.data(), lr);
        Ok(LayerStep {
            output,
            loss: chain.loss,
            logits: chain.logits,
            gap,
        })
    }

    /// Inference pass; touches no state.
    pub fn forward(&self, input: &Tensor<f32>) -> Result<LayerForward> {
        let pre = conv2d_forward(input, &self.conv)?;
        let (activations, _) = relu(&pre);
        let output = self.transform(&activations)?;
        let logits = {
            let g = crate::goodness::spatial_goodness(&activations, &self.plan)?;
            crate::supervision::project(&self.head, &g)?
        };
        let gap = global_avg_pool(&activations)?;
        Ok(LayerForward {
            activations,
            output,
            logits,
            gap,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::supervision::make_projection;
    use crate::trainer::opt::OptimizerHyper;

    #[test]
    fn rms_pool_hand_cases() {
        let spec = PoolSpec::new(PoolKind::Rms);
        let t = Tensor::from_vec(&[1, 1, 2, 2], vec![3.0f32, 4.0, 0.0, 0.0]).unwrap();
        let out = rms_pool(&t, &spec).unwrap();
        assert_eq!(out.data(), &[2.5]);

        let constant = Tensor::<f32>::filled(&[2, 3, 4, 4], -1.5);
        let out = rms_pool(&constant, &spec).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.5).abs() <= 1e-7));

        let zero = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        assert!(rms_pool(&zero, &spec).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn avg_and_max_hand_cases() {
        let t = Tensor::from_vec(&[1, 1, 2, 2], vec![3.0f32, 4.0, 0.0, 0.0]).unwrap();
        let spec = PoolSpec::new(PoolKind::Avg);
        assert_eq!(avg_pool(&t, &spec).unwrap().data(), &[1.75]);
        assert_eq!(max_pool(&t, &spec).unwrap().data(), &[4.0]);

        let c = Tensor::<f32>::filled(&[1, 2, 2, 2], 7.0);
        assert_eq!(avg_pool(&c, &spec).unwrap().data(), &[7.0, 7.0]);
        assert_eq!(max_pool(&c, &spec).unwrap().data(), &[7.0, 7.0]);
    }

    #[test]
    fn power_mean_ordering_on_non_negative_input() {
        let mut rng = rng_from_seed(51);
        let mut t = Tensor::<f32>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        for v in t.data_mut() {
            *v = v.abs();
        }
        let spec = PoolSpec::new(PoolKind::Rms);
        let r = rms_pool(&t, &spec).unwrap();
        let a = avg_pool(&t, &spec).unwrap();
        let m = max_pool(&t, &spec).unwrap();
        for ((a, r), m) in a.data().iter().zip(r.data()).zip(m.data()) {
            assert!(*a <= r + 1e-6);
            assert!(*r <= m + 1e-6);
        }
    }

    #[test]
    fn rms_pool_conserves_mean_square() {
        let mut rng = rng_from_seed(52);
        let t = Tensor::<f32>::randn(&[2, 4, 8, 8], 1.0, &mut rng);
        let pooled = rms_pool(&t, &PoolSpec::new(PoolKind::Rms)).unwrap();
        let ms = |x: &Tensor<f32>| {
            x.data().iter().map(|v| (v * v) as f64).sum::<f64>() / x.len() as f64
        };
        let (orig, down) = (ms(&t), ms(&pooled));
        assert!((orig - down).abs() / orig <= 1e-5, "{orig} vs {down}");
    }

    #[test]
    fn pool_rejects_non_tiling_geometry() {
        let t = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        let spec = PoolSpec::new(PoolKind::Rms);
        assert!(matches!(rms_pool(&t, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn layer_norm_contract() {
        let mut rng = rng_from_seed(53);
        let t = Tensor::<f32>::randn(&[3, 2, 4, 4], 3.0, &mut rng);
        let out = layer_norm(&t, &NormSpec::default()).unwrap();
        for sample in out.data().chunks(32) {
            let mean: f32 = sample.iter().sum::<f32>() / 32.0;
            let var: f32 = sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 32.0;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn layer_norm_shift_and_scale_invariance() {
        let mut rng = rng_from_seed(54);
        let t = Tensor::<f32>::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let base = layer_norm(&t, &NormSpec::default()).unwrap();

        let mut shifted = t.clone();
        for v in shifted.data_mut() {
            *v += 11.0;
        }
        let out = layer_norm(&shifted, &NormSpec::default()).unwrap();
        for (a, b) in out.data().iter().zip(base.data()) {
            assert!((a - b).abs() <= 1e-4);
        }

        for s in [0.5f32, 2.0] {
            let mut scaled = t.clone();
            scaled.scale_in_place(s);
            let out = layer_norm(&scaled, &NormSpec::default()).unwrap();
            for (a, b) in out.data().iter().zip(base.data()) {
                assert!((a - b).abs() <= 1e-3);
            }
        }
    }

    fn test_layer(seed: u64) -> AsgeLayer {
        let mut rng = rng_from_seed(seed);
        let conv = ConvParams::new(
            Tensor::randn(&[4, 2, 3, 3], 0.3, &mut rng),
            Tensor::zeros(&[4]),
            1,
            1,
        )
        .unwrap();
        let plan = PartitionPlan::new(4, 8, 8, 2).unwrap();
        let head = make_projection(seed ^ 1, plan.goodness_dim(), 10);
        let hyper = OptimizerHyper::adamw(0.001);
        AsgeLayer {
            w_state: ParamState::new(hyper, conv.weights.len()),
            b_state: ParamState::new(hyper, conv.bias.len()),
            conv,
            head,
            plan,
            pool: Some(PoolSpec::new(PoolKind::Rms)),
            norm: NormSpec::default(),
        }
    }

    #[test]
    fn zero_lr_freezes_dynamics() {
        let mut layer = test_layer(61);
        let mut rng = rng_from_seed(62);
        let input = Tensor::randn(&[2, 2, 8, 8], 1.0, &mut rng);
        let first = layer.step(&input, &[1, 2], 0.0).unwrap();
        let second = layer.step(&input, &[1, 2], 0.0).unwrap();
        assert_eq!(first.output.data(), second.output.data());
        assert_eq!(first.loss, second.loss);
    }

    #[test]
    fn forwarded_output_uses_pre_update_parameters() {
        let mut layer = test_layer(63);
        let frozen = layer.clone();
        let mut rng = rng_from_seed(64);
        let input = Tensor::randn(&[2, 2, 8, 8], 1.0, &mut rng);
        let stepped = layer.step(&input, &[0, 3], 0.05).unwrap();
        let reference = frozen.forward(&input).unwrap();
        assert_eq!(stepped.output.data(), reference.output.data());
        // ...and the update really happened.
        assert_ne!(layer.conv.weights.data(), frozen.conv.weights.data());
    }

    #[test]
    fn step_trains_only_its_own_layer() {
        // Training a downstream layer on a detached output must leave the
        // upstream layer's parameters bit-identical.
        let mut first = test_layer(65);
        let mut rng = rng_from_seed(67);
        let input = Tensor::randn(&[2, 2, 8, 8], 1.0, &mut rng);
        let out = first.step(&input, &[1, 2], 0.01).unwrap();
        let first_snapshot = first.conv.clone();

        // Pooled 4x4, 4-channel output feeds the next layer.
        let hyper = OptimizerHyper::adamw(0.001);
        let conv = ConvParams::new(
            Tensor::randn(&[4, 4, 3, 3], 0.3, &mut rng),
            Tensor::zeros(&[4]),
            1,
            1,
        )
        .unwrap();
        let plan = PartitionPlan::new(4, 4, 4, 1).unwrap();
        let mut next = AsgeLayer {
            w_state: ParamState::new(hyper, conv.weights.len()),
            b_state: ParamState::new(hyper, conv.bias.len()),
            head: make_projection(99, plan.goodness_dim(), 10),
            conv,
            plan,
            pool: None,
            norm: NormSpec::default(),
        };
        next.step(&out.output, &[1, 2], 0.01).unwrap();
        assert_eq!(first.conv, first_snapshot);
    }
}
