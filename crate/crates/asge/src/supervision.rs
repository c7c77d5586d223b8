//! Frozen random projection heads and the layer-local loss. Each layer's
//! goodness vector is mapped to class logits through a fixed random affine
//! map; cross-entropy against the true label then yields gradients for that
//! layer's convolution only. The projection is never trained, so the head is
//! fully described by (seed, in_dim, n_classes) and regenerated on load.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::goodness::{GoodnessVector, PartitionPlan};
use crate::rng::rng_from_seed;
use crate::tensor::{im2col_sample, matmul, ConvParams, Scalar, Tensor};

/// Frozen random affine map from goodness space to class logits.
///
/// Entries are drawn from a zero-mean normal with standard deviation
/// `1/sqrt(n_classes)`, the Johnson-Lindenstrauss scaling that keeps the
/// projected norm close to the input norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<T: Scalar = f32> {
    seed: u64,
    /// `[in_dim, n_classes]`
    weights: Tensor<T>,
    /// `[n_classes]`, broadcast over the batch
    bias: Tensor<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }
}

/// Class logits, `[B, n_classes]`.
pub type Logits<T = f32> = Tensor<T>;

/// Deterministically generates a projection head. The same
/// `(seed, in_dim, n_classes)` always yields bit-identical matrices; weights
/// are drawn first (row-major), then the bias.
pub fn make_projection<T: Scalar>(seed: u64, in_dim: usize, n_classes: usize) -> ProjectionHead<T> {
    assert!(in_dim >= 1 && n_classes >= 1);
    let std = T::from_f64(1.0 / (n_classes as f64).sqrt());
    let mut rng = rng_from_seed(seed);
    let weights = Tensor::randn(&[in_dim, n_classes], std, &mut rng);
    let bias = Tensor::randn(&[n_classes], std, &mut rng);
    ProjectionHead {
        seed,
        weights,
        bias,
    }
}

/// `logits = g * W + b`, bias broadcast per sample.
pub fn project<T: Scalar>(head: &ProjectionHead<T>, g: &GoodnessVector<T>) -> Result<Logits<T>> {
    let (batch, dim) = g.dims2()?;
    if dim != head.in_dim() {
        return Err(Error::config(format!(
            "goodness dim {dim} does not match projection in_dim {}",
            head.in_dim()
        )));
    }
    let n = head.n_classes();
    let mut out = Tensor::zeros(&[batch, n]);
    matmul(g.data(), head.weights.data(), batch, dim, n, out.data_mut());
    for row in out.data_mut().chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(head.bias.data()) {
            *v += *b;
        }
    }
    Ok(out)
}

/// Batch-mean cross-entropy from raw logits, with max-subtraction
/// stabilization. Returns the loss and its gradient
/// `(softmax(a) - onehot(target)) / B`.
pub fn local_ce_loss<T: Scalar>(logits: &Logits<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    let (batch, n) = logits.dims2()?;
    if targets.len() != batch {
        return Err(Error::input(format!(
            "{} targets for batch of {batch}",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::input(format!("target {t} out of range for {n} classes")));
    }
    let inv_b = T::from_f64(1.0 / batch as f64);
    let mut grad = Tensor::zeros(&[batch, n]);
    let mut loss = T::zero();
    for ((row, g_row), &t) in logits
        .data()
        .chunks(n)
        .zip(grad.data_mut().chunks_mut(n))
        .zip(targets)
    {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (g, &a) in g_row.iter_mut().zip(row) {
            let e = (a - max).exp();
            *g = e;
            denom += e;
        }
        loss += denom.ln() + max - row[t];
        for g in g_row.iter_mut() {
            *g = *g / denom * inv_b;
        }
        g_row[t] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Everything one layer-local training step needs, computed in a single
/// forward/backward sweep with the layer's parameters held fixed.
pub struct ChainResult<T> {
    pub loss: T,
    pub d_weights: Tensor<T>,
    pub d_bias: Tensor<T>,
    /// Post-activation feature maps (input to goodness and to forwarding).
    pub activations: Tensor<T>,
    pub logits: Logits<T>,
}

/// Samples per parallel work item; fixed so results are bit-identical for
/// any worker layout.
const CHUNK_SAMPLES: usize = 8;

/// Runs conv -> ReLU -> goodness -> projection -> cross-entropy, then pulls
/// the loss gradient back through the frozen projection, the goodness
/// Jacobian, and the ReLU mask to the convolution parameters. Nothing
/// propagates past the layer input.
///
/// Every sample's contribution is independent (the loss is a per-sample
/// mean), so the whole chain runs as one fused per-sample sweep sharing a
/// single im2col buffer between the forward and weight-gradient matmuls.
/// The ReLU mask never materializes: the goodness derivative is
/// proportional to the post-activation value, which is already zero
/// wherever the mask would be.
pub fn layer_chain<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    head: &ProjectionHead<T>,
    plan: &PartitionPlan,
    targets: &[usize],
) -> Result<ChainResult<T>> {
    let (batch, c_in, h, w) = input.dims4()?;
    if c_in != params.in_channels() {
        return Err(Error::config(format!(
            "input has {c_in} channels, conv expects {}",
            params.in_channels()
        )));
    }
    let (h_out, w_out) = params.out_extent(h, w)?;
    let c_out = params.out_channels();
    if plan.channels() != c_out || plan.map_extent() != (h_out, w_out) {
        return Err(Error::config(format!(
            "partition plan does not match conv output {c_out}x{h_out}x{w_out}"
        )));
    }
    let g_dim = plan.goodness_dim();
    if head.in_dim() != g_dim {
        return Err(Error::config(format!(
            "projection in_dim {} does not match goodness dim {g_dim}",
            head.in_dim()
        )));
    }
    let n = head.n_classes();
    if targets.len() != batch {
        return Err(Error::input(format!(
            "{} targets for batch of {batch}",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::input(format!("target {t} out of range for {n} classes")));
    }

    let k = params.kernel();
    let col_rows = c_in * k * k;
    let cols = h_out * w_out;
    let in_stride = c_in * h * w;
    let act_stride = c_out * cols;
    let p = plan.patches();
    let (ph, pw) = plan.patch_extent();
    let area = T::from_f64((ph * pw) as f64);
    let two_over_area = T::from_f64(2.0 / (ph * pw) as f64);
    let inv_b = T::from_f64(1.0 / batch as f64);
    let weights = params.weights.data();
    let bias = params.bias.data();
    let proj = head.weights.data();
    let proj_bias = head.bias.data();

    let mut activations = Tensor::zeros(&[batch, c_out, h_out, w_out]);
    let mut logits = Tensor::zeros(&[batch, n]);

    // Per-chunk partial gradients and loss, folded in chunk order.
    let partials: Vec<(Vec<T>, Vec<T>, T)> = activations
        .data_mut()
        .par_chunks_mut(act_stride * CHUNK_SAMPLES)
        .zip(logits.data_mut().par_chunks_mut(n * CHUNK_SAMPLES))
        .zip(input.data().par_chunks(in_stride * CHUNK_SAMPLES))
        .zip(targets.par_chunks(CHUNK_SAMPLES))
        .map(|(((act_chunk, logit_chunk), in_chunk), tgt_chunk)| {
            let mut col = vec![T::zero(); col_rows * cols];
            let mut goodness = vec![T::zero(); g_dim];
            let mut d_logits = vec![T::zero(); n];
            let mut d_goodness = vec![T::zero(); g_dim];
            let mut d_act = vec![T::zero(); act_stride];
            let mut dw = vec![T::zero(); c_out * col_rows];
            let mut db = vec![T::zero(); c_out];
            let mut loss_sum = T::zero();

            let samples = act_chunk
                .chunks_mut(act_stride)
                .zip(logit_chunk.chunks_mut(n))
                .zip(in_chunk.chunks(in_stride))
                .zip(tgt_chunk);
            for (((act, logit_row), sample), &target) in samples {
                im2col_sample(
                    sample, c_in, h, w, k, params.stride, params.padding, h_out, w_out, &mut col,
                );
                // Forward: conv, bias, ReLU in place.
                matmul(weights, &col, c_out, col_rows, cols, act);
                for (o, plane) in act.chunks_mut(cols).enumerate() {
                    let b = bias[o];
                    for v in plane.iter_mut() {
                        *v += b;
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                }
                // Patch energies in the fixed (channel, row, col) order.
                for c in 0..c_out {
                    let plane = &act[c * cols..(c + 1) * cols];
                    for pi in 0..p {
                        for pj in 0..p {
                            let mut acc = T::zero();
                            for dy in 0..ph {
                                let row = (pi * ph + dy) * w_out + pj * pw;
                                for v in &plane[row..row + pw] {
                                    acc += *v * *v;
                                }
                            }
                            goodness[(c * p + pi) * p + pj] = acc / area;
                        }
                    }
                }
                // Logits and the stabilized cross-entropy.
                logit_row.copy_from_slice(proj_bias);
                T::gemm(
                    1, g_dim, n,
                    T::one(),
                    &goodness, g_dim as isize, 1,
                    proj, n as isize, 1,
                    T::one(),
                    logit_row, n as isize, 1,
                );
                let max = logit_row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for (d, &a) in d_logits.iter_mut().zip(logit_row.iter()) {
                    let e = (a - max).exp();
                    *d = e;
                    denom += e;
                }
                loss_sum += denom.ln() + max - logit_row[target];
                for d in d_logits.iter_mut() {
                    *d = *d / denom * inv_b;
                }
                d_logits[target] -= inv_b;
                // Pull back through the frozen projection: W * dL_da.
                T::gemm(
                    g_dim, n, 1,
                    T::one(),
                    proj, n as isize, 1,
                    &d_logits, 1, 1,
                    T::zero(),
                    &mut d_goodness, 1, 1,
                );
                // Through the goodness Jacobian (ReLU mask folded in).
                for c in 0..c_out {
                    let act_plane = &act[c * cols..(c + 1) * cols];
                    let d_plane = &mut d_act[c * cols..(c + 1) * cols];
                    for pi in 0..p {
                        for pj in 0..p {
                            let u = d_goodness[(c * p + pi) * p + pj] * two_over_area;
                            for dy in 0..ph {
                                let row = (pi * ph + dy) * w_out + pj * pw;
                                for (d, a) in d_plane[row..row + pw]
                                    .iter_mut()
                                    .zip(&act_plane[row..row + pw])
                                {
                                    *d = u * *a;
                                }
                            }
                        }
                    }
                }
                // Accumulate parameter gradients against the same columns.
                T::gemm(
                    c_out, cols, col_rows,
                    T::one(),
                    &d_act, cols as isize, 1,
                    &col, 1, cols as isize,
                    T::one(),
                    &mut dw, col_rows as isize, 1,
                );
                for (o, plane) in d_act.chunks(cols).enumerate() {
                    db[o] += plane.iter().copied().sum::<T>();
                }
            }
            (dw, db, loss_sum)
        })
        .collect();

    let mut dw = vec![T::zero(); c_out * col_rows];
    let mut db = vec![T::zero(); c_out];
    let mut loss = T::zero();
    for (pw_, pb, pl) in &partials {
        for (acc, v) in dw.iter_mut().zip(pw_) {
            *acc += *v;
        }
        for (acc, v) in db.iter_mut().zip(pb) {
            *acc += *v;
        }
        loss += *pl;
    }
    Ok(ChainResult {
        loss: loss * inv_b,
        d_weights: Tensor::from_vec(&[c_out, c_in, k, k], dw)?,
        d_bias: Tensor::from_vec(&[c_out], db)?,
        activations,
        logits,
    })
}

/// Loss and parameter gradients of one layer's local objective.
pub fn layer_local_gradient<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    head: &ProjectionHead<T>,
    plan: &PartitionPlan,
    targets: &[usize],
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let chain = layer_chain(input, params, head, plan, targets)?;
    Ok((chain.loss, chain.d_weights, chain.d_bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::tensor::Tensor;

    #[test]
    fn projection_is_deterministic() {
        let a: ProjectionHead<f32> = make_projection(99, 64, 10);
        let b: ProjectionHead<f32> = make_projection(99, 64, 10);
        assert_eq!(a, b);
        let c: ProjectionHead<f32> = make_projection(100, 64, 10);
        assert_ne!(a.weights().data(), c.weights().data());
    }

    #[test]
    fn projection_entry_statistics() {
        // in_dim * n >= 1e5 draws; declared std is 1/sqrt(n).
        let (in_dim, n) = (2000, 50);
        let head: ProjectionHead<f64> = make_projection(7, in_dim, n);
        let count = (in_dim * n) as f64;
        let mean: f64 = head.weights().data().iter().sum::<f64>() / count;
        let var: f64 = head
            .weights()
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / count;
        let sigma = 1.0 / (n as f64).sqrt();
        assert!(var >= 0.9 / n as f64 && var <= 1.1 / n as f64, "var {var}");
        let bound = 3.0 * sigma / count.sqrt();
        assert!(mean.abs() <= bound, "mean {mean} vs bound {bound}");
    }

    #[test]
    fn project_zero_gives_bias() {
        let head: ProjectionHead<f32> = make_projection(3, 16, 5);
        let g = Tensor::zeros(&[4, 16]);
        let logits = project(&head, &g).unwrap();
        for row in logits.data().chunks(5) {
            assert_eq!(row, head.bias().data());
        }
    }

    #[test]
    fn project_is_affine() {
        let head: ProjectionHead<f64> = make_projection(11, 32, 7);
        let mut rng = rng_from_seed(12);
        let g1 = Tensor::randn(&[2, 32], 1.0, &mut rng);
        let g2 = Tensor::randn(&[2, 32], 1.0, &mut rng);
        let mut sum = g1.clone();
        for (s, v) in sum.data_mut().iter_mut().zip(g2.data()) {
            *s += *v;
        }
        let lhs = project(&head, &sum).unwrap();
        let a = project(&head, &g1).unwrap();
        let b = project(&head, &g2).unwrap();
        for (i, l) in lhs.data().iter().enumerate() {
            let rhs = a.data()[i] + b.data()[i] - head.bias().data()[i % 7];
            assert!((l - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_preserves_norms_on_average() {
        // Johnson-Lindenstrauss statistic: mean ||gW||^2 / ||g||^2 near 1.
        let head: ProjectionHead<f64> = make_projection(21, 512, 100);
        let mut rng = rng_from_seed(22);
        let mut ratio_sum = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let mut g = Tensor::randn(&[1, 512], 1.0, &mut rng);
            let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            g.scale_in_place(1.0 / norm);
            let logits = project(&head, &g).unwrap();
            let sq: f64 = logits
                .data()
                .iter()
                .zip(head.bias().data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            ratio_sum += sq;
        }
        let mean = ratio_sum / trials as f64;
        assert!((0.9..=1.1).contains(&mean), "JL mean ratio {mean}");
    }

    #[test]
    fn ce_loss_uniform_logits() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let (loss, grad) = local_ce_loss(&logits, &[0, 5, 9]).unwrap();
        assert!((loss - (10.0f64).ln()).abs() <= 1e-12);
        for (r, &t) in grad.data().chunks(10).zip(&[0usize, 5, 9]) {
            for (i, g) in r.iter().enumerate() {
                let expect = if i == t { (0.1 - 1.0) / 3.0 } else { 0.1 / 3.0 };
                assert!((g - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ce_loss_saturates_to_zero() {
        let mut logits = Tensor::<f64>::zeros(&[1, 4]);
        logits.data_mut()[2] = 200.0;
        let (loss, _) = local_ce_loss(&logits, &[2]).unwrap();
        assert!(loss.abs() <= 1e-12);
    }

    #[test]
    fn ce_loss_rejects_bad_target() {
        let logits = Tensor::<f32>::zeros(&[1, 4]);
        assert!(matches!(
            local_ce_loss(&logits, &[4]).unwrap_err(),
            Error::Input(_)
        ));
    }

    #[test]
    fn ce_loss_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(31);
        let logits = Tensor::<f64>::randn(&[3, 6], 2.0, &mut rng);
        let targets = [1usize, 0, 5];
        let (_, grad) = local_ce_loss(&logits, &targets).unwrap();
        let h = 1e-6;
        for idx in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[idx] += h;
            let mut minus = logits.clone();
            minus.data_mut()[idx] -= h;
            let (lp, _) = local_ce_loss(&plus, &targets).unwrap();
            let (lm, _) = local_ce_loss(&minus, &targets).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let an = grad.data()[idx];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-5, "logit {idx}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn ce_loss_shift_invariance() {
        let mut rng = rng_from_seed(32);
        let logits = Tensor::<f64>::randn(&[2, 8], 1.0, &mut rng);
        let targets = [3usize, 7];
        let (loss, grad) = local_ce_loss(&logits, &targets).unwrap();
        let mut shifted = logits.clone();
        for row in shifted.data_mut().chunks_mut(8) {
            for v in row {
                *v += 42.5;
            }
        }
        let (loss2, grad2) = local_ce_loss(&shifted, &targets).unwrap();
        assert!((loss - loss2).abs() <= 1e-6);
        for (a, b) in grad.data().iter().zip(grad2.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    fn small_chain_fixture() -> (Tensor<f64>, ConvParams<f64>, ProjectionHead<f64>, PartitionPlan) {
        let mut rng = rng_from_seed(41);
        let input = Tensor::randn(&[2, 2, 8, 8], 1.0, &mut rng);
        let params = ConvParams::new(
            Tensor::randn(&[4, 2, 3, 3], 0.4, &mut rng),
            Tensor::randn(&[4], 0.1, &mut rng),
            1,
            1,
        )
        .unwrap();
        let plan = PartitionPlan::new(4, 8, 8, 2).unwrap();
        let head = make_projection(42, plan.goodness_dim(), 10);
        (input, params, head, plan)
    }

    #[test]
    fn dead_layer_produces_zero_gradients() {
        let (_, mut params, head, plan) = small_chain_fixture();
        params.bias = Tensor::zeros(&[4]);
        let input = Tensor::zeros(&[2, 2, 8, 8]);
        let (loss, dw, db) = layer_local_gradient(&input, &params, &head, &plan, &[1, 2]).unwrap();
        assert!(dw.data().iter().all(|&v| v == 0.0));
        assert!(db.data().iter().all(|&v| v == 0.0));
        // Logits collapse to the bias, so the loss is the bias cross-entropy.
        let bias_logits = Tensor::from_vec(&[1, 10], head.bias().data().to_vec()).unwrap();
        let (expect1, _) = local_ce_loss(&bias_logits, &[1]).unwrap();
        let (expect2, _) = local_ce_loss(&bias_logits, &[2]).unwrap();
        assert!((loss - (expect1 + expect2) / 2.0).abs() <= 1e-12);
    }

    #[test]
    fn duplicated_batch_leaves_gradients_unchanged() {
        let (input, params, head, plan) = small_chain_fixture();
        let (loss, dw, db) = layer_local_gradient(&input, &params, &head, &plan, &[3, 7]).unwrap();

        let mut doubled = Vec::with_capacity(input.len() * 2);
        doubled.extend_from_slice(input.data());
        doubled.extend_from_slice(input.data());
        let doubled = Tensor::from_vec(&[4, 2, 8, 8], doubled).unwrap();
        let (loss2, dw2, db2) =
            layer_local_gradient(&doubled, &params, &head, &plan, &[3, 7, 3, 7]).unwrap();
        assert!((loss - loss2).abs() <= 1e-12);
        for (a, b) in dw.data().iter().zip(dw2.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in db.data().iter().zip(db2.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn full_chain_matches_finite_differences() {
        let (input, params, head, plan) = small_chain_fixture();
        let targets = [3usize, 7];
        let (_, dw, db) = layer_local_gradient(&input, &params, &head, &plan, &targets).unwrap();

        let loss_of = |p: &ConvParams<f64>| -> f64 {
            layer_local_gradient(&input, p, &head, &plan, &targets)
                .unwrap()
                .0
        };
        let h = 1e-5;
        let mut worst = 0.0f64;
        for idx in 0..params.weights.len() {
            let mut plus = params.clone();
            plus.weights.data_mut()[idx] += h;
            let mut minus = params.clone();
            minus.weights.data_mut()[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = dw.data()[idx];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        for idx in 0..params.bias.len() {
            let mut plus = params.clone();
            plus.bias.data_mut()[idx] += h;
            let mut minus = params.clone();
            minus.bias.data_mut()[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = db.data()[idx];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn fused_chain_matches_composed_building_blocks() {
        // The fused sweep must agree with the op-by-op composition:
        // conv -> ReLU -> goodness -> projection -> CE, pulled back through
        // the projection transpose, the goodness Jacobian, the ReLU mask,
        // and the convolution weight gradient.
        use crate::goodness::{goodness_jacobian_apply, spatial_goodness};
        use crate::tensor::{conv2d_forward, conv2d_weight_grad, matmul_bt, relu};

        let (input, params, head, plan) = small_chain_fixture();
        let targets = [3usize, 7];
        let fused = layer_chain(&input, &params, &head, &plan, &targets).unwrap();

        let pre = conv2d_forward(&input, &params).unwrap();
        let (act, mask) = relu(&pre);
        let g = spatial_goodness(&act, &plan).unwrap();
        let logits = project(&head, &g).unwrap();
        let (loss, d_logits) = local_ce_loss(&logits, &targets).unwrap();
        let (batch, n) = d_logits.dims2().unwrap();
        let mut d_g = Tensor::zeros(&[batch, head.in_dim()]);
        matmul_bt(
            d_logits.data(),
            head.weights().data(),
            batch,
            n,
            head.in_dim(),
            d_g.data_mut(),
        );
        let mut d_pre = goodness_jacobian_apply(&act, &plan, &d_g).unwrap();
        for (d, m) in d_pre.data_mut().iter_mut().zip(mask.data()) {
            *d *= *m;
        }
        let (dw, db) = conv2d_weight_grad(&input, &d_pre, &params).unwrap();

        assert!((fused.loss - loss).abs() <= 1e-12 * loss.abs().max(1.0));
        for (a, b) in fused.activations.data().iter().zip(act.data()) {
            assert_eq!(a, b);
        }
        for (a, b) in fused.logits.data().iter().zip(logits.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in fused.d_weights.data().iter().zip(dw.data()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
        }
        for (a, b) in fused.d_bias.data().iter().zip(db.data()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn regenerated_head_is_bit_identical() {
        let head: ProjectionHead<f32> = make_projection(1234, 128, 10);
        let again: ProjectionHead<f32> = make_projection(head.seed(), head.in_dim(), head.n_classes());
        assert_eq!(head.weights().data(), again.weights().data());
        assert_eq!(head.bias().data(), again.bias().data());
    }
}
