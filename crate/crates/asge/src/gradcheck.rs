//! Finite-difference verification of the layer-local gradient chain, run in
//! double precision on a deliberately small stack. The analytic gradients
//! come from the hand-derived pullback; the reference comes from central
//! differences of the layer's scalar loss, which exercises only the forward
//! path. The two routes stay independent.

use crate::error::{Error, Result};
use crate::goodness::PartitionPlan;
use crate::layers::{layer_norm, pool, PoolKind, PoolSpec};
use crate::network::{ArchSpec, LayerSpec, Strategy};
use crate::rng::{rng_from_seed, splitmix64, substream_seed, Stream};
use crate::supervision::{layer_local_gradient, make_projection, ProjectionHead};
use crate::tensor::{conv2d_forward, relu, ConvParams, Tensor};

/// Largest per-layer channel count the harness accepts; finite differences
/// on anything bigger would be pointlessly slow.
pub const MAX_CHANNELS: usize = 8;

pub const DEFAULT_THRESHOLD: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

/// Verification outcome for one layer.
#[derive(Clone, Debug)]
pub struct LayerCheck {
    /// 1-based layer index.
    pub layer: usize,
    pub max_rel_err: f64,
    /// Human-readable handle of the worst parameter, e.g. `weights[17]`.
    pub worst_param: String,
    pub params_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub layers: Vec<LayerCheck>,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.max_rel_err <= self.threshold)
    }

    pub fn failures(&self) -> impl Iterator<Item = &LayerCheck> {
        self.layers
            .iter()
            .filter(move |l| l.max_rel_err > self.threshold)
    }
}

/// The built-in harness spec: two layers of 4 and 8 channels on an 8x8
/// single-channel input, ten classes.
pub fn default_spec() -> ArchSpec {
    ArchSpec {
        input_shape: [1, 8, 8],
        n_classes: 10,
        alpha: 1.0,
        strategy: Strategy::Fusion,
        layers: vec![
            LayerSpec::channels(4).with_pool(PoolSpec::new(PoolKind::Rms)),
            LayerSpec::channels(8),
        ],
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs()).max(1e-6);
    (analytic - fd).abs() / denom
}

/// Runs the full-chain check on every layer of `spec` in double precision.
///
/// `corrupt_layer` (1-based) is a test hook that perturbs that layer's
/// analytic gradient so harness sensitivity itself can be verified; it is
/// never set by production callers.
pub fn run_gradcheck(
    spec: &ArchSpec,
    seed: u64,
    corrupt_layer: Option<usize>,
) -> Result<GradcheckReport> {
    let geometry = spec.trace()?;
    if let Some(g) = geometry.iter().find(|g| g.out_channels > MAX_CHANNELS) {
        return Err(Error::usage(format!(
            "gradient check requires <= {MAX_CHANNELS} channels per layer, found {}",
            g.out_channels
        )));
    }
    let layer_specs = spec.effective_layers();

    // f64 twins of what build_network would create.
    let mut convs: Vec<ConvParams<f64>> = Vec::new();
    let mut heads: Vec<ProjectionHead<f64>> = Vec::new();
    let mut plans: Vec<PartitionPlan> = Vec::new();
    for (i, (layer_spec, geo)) in layer_specs.iter().zip(&geometry).enumerate() {
        let fan_in = geo.in_channels * layer_spec.kernel * layer_spec.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = rng_from_seed(substream_seed(seed, Stream::Init, i as u64));
        let weights = Tensor::<f64>::randn(
            &[
                layer_spec.out_channels,
                geo.in_channels,
                layer_spec.kernel,
                layer_spec.kernel,
            ],
            std,
            &mut rng,
        );
        // Small random biases so the bias gradients are exercised off zero.
        let bias = Tensor::<f64>::randn(&[layer_spec.out_channels], 0.05, &mut rng);
        convs.push(ConvParams::new(weights, bias, layer_spec.stride, layer_spec.padding)?);
        plans.push(PartitionPlan::new(
            geo.out_channels,
            geo.conv_h,
            geo.conv_w,
            geo.partition,
        )?);
        let head_seed = substream_seed(seed, Stream::Projection, i as u64);
        heads.push(make_projection::<f64>(
            head_seed,
            plans[i].goodness_dim(),
            spec.n_classes,
        ));
    }

    let batch = 2usize;
    let mut data_rng = rng_from_seed(splitmix64(seed ^ 0x6772_6164));
    let input = Tensor::<f64>::randn(
        &[batch, spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]],
        1.0,
        &mut data_rng,
    );
    let targets: Vec<usize> = (0..batch)
        .map(|i| (splitmix64(seed.wrapping_add(i as u64)) % spec.n_classes as u64) as usize)
        .collect();

    let mut checks = Vec::with_capacity(convs.len());
    let mut current = input;
    for (i, ((conv, head), plan)) in convs.iter().zip(&heads).zip(&plans).enumerate() {
        let (_, mut dw, db) = layer_local_gradient(&current, conv, head, plan, &targets)?;
        if corrupt_layer == Some(i + 1) {
            dw.scale_in_place(1.01);
        }

        let loss_of = |p: &ConvParams<f64>| -> Result<f64> {
            Ok(layer_local_gradient(&current, p, head, plan, &targets)?.0)
        };
        let mut max_rel = 0.0f64;
        let mut worst = String::from("-");
        for idx in 0..conv.weights.len() {
            let mut plus = conv.clone();
            plus.weights.data_mut()[idx] += FD_STEP;
            let mut minus = conv.clone();
            minus.weights.data_mut()[idx] -= FD_STEP;
            let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * FD_STEP);
            let err = rel_err(dw.data()[idx], fd);
            if err > max_rel {
                max_rel = err;
                worst = format!("weights[{idx}]");
            }
        }
        for idx in 0..conv.bias.len() {
            let mut plus = conv.clone();
            plus.bias.data_mut()[idx] += FD_STEP;
            let mut minus = conv.clone();
            minus.bias.data_mut()[idx] -= FD_STEP;
            let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * FD_STEP);
            let err = rel_err(db.data()[idx], fd);
            if err > max_rel {
                max_rel = err;
                worst = format!("bias[{idx}]");
            }
        }
        checks.push(LayerCheck {
            layer: i + 1,
            max_rel_err: max_rel,
            worst_param: worst,
            params_checked: conv.weights.len() + conv.bias.len(),
        });

        // Forward to the next layer's input: conv, ReLU, pool, norm.
        let pre = conv2d_forward(&current, conv)?;
        let (act, _) = relu(&pre);
        let pooled = match &layer_specs[i].pool {
            Some(p) => pool(&act, p)?,
            None => act,
        };
        current = layer_norm(&pooled, &layer_specs[i].norm)?;
    }
    Ok(GradcheckReport {
        layers: checks,
        threshold: DEFAULT_THRESHOLD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_passes_within_threshold() {
        let report = run_gradcheck(&default_spec(), 7, None).unwrap();
        assert_eq!(report.layers.len(), 2);
        assert!(report.passed(), "{report:?}");
        for layer in &report.layers {
            assert!(layer.max_rel_err <= DEFAULT_THRESHOLD, "{layer:?}");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected_and_named() {
        let report = run_gradcheck(&default_spec(), 7, Some(2)).unwrap();
        assert!(!report.passed());
        let failures: Vec<usize> = report.failures().map(|l| l.layer).collect();
        assert_eq!(failures, vec![2]);
    }

    #[test]
    fn zero_input_counts_as_pass() {
        // All-zero input with zero bias: gradients are exactly zero on both
        // routes and the 0/0 guard reports zero error.
        let spec = default_spec();
        let geometry = spec.trace().unwrap();
        let conv = ConvParams::new(
            Tensor::<f64>::zeros(&[4, 1, 3, 3]),
            Tensor::zeros(&[4]),
            1,
            1,
        )
        .unwrap();
        let plan = PartitionPlan::new(4, geometry[0].conv_h, geometry[0].conv_w, geometry[0].partition).unwrap();
        let head = make_projection::<f64>(1, plan.goodness_dim(), 10);
        let input = Tensor::<f64>::zeros(&[2, 1, 8, 8]);
        let (_, dw, _) = layer_local_gradient(&input, &conv, &head, &plan, &[0, 1]).unwrap();
        assert!(dw.data().iter().all(|&v| v == 0.0));
        assert_eq!(rel_err(0.0, 0.0), 0.0);
    }

    #[test]
    fn oversized_spec_is_rejected() {
        let mut spec = default_spec();
        spec.layers[1].out_channels = 16;
        let err = run_gradcheck(&spec, 1, None).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
