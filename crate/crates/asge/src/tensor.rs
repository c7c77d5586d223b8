//! Dense row-major tensors and the handful of convolution-stack operations
//! the layer-local gradient chain needs. There is deliberately no general
//! autodiff here: gradients never cross layer boundaries, so the only
//! backward pieces required are the convolution weight/bias gradients and a
//! few hand-derived Jacobian applications in sibling modules.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Samples per parallel work item in batched ops. Fixed (never derived from
/// thread count) so results are bit-identical for any worker layout.
const CHUNK_SAMPLES: usize = 8;

/// Element type of the numeric stack: `f32` for training, `f64` for
/// finite-difference gradient checking.
pub trait Scalar:
    Float + NumAssign + Sum + Send + Sync + Default + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Standard normal draw with a fixed transform algorithm, so matrices
    /// regenerated from a stored seed are bit-identical.
    fn standard_normal<R: Rng>(rng: &mut R) -> Self;

    /// Dense row/column-strided matrix multiply `C = alpha*A*B + beta*C`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

/// Dense n-dimensional array, row-major contiguous.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != expect {
            return Err(Error::config(format!(
                "shape {shape:?} wants {expect} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Fills from a standard normal scaled by `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: T, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::standard_normal(rng) * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interprets the tensor as `[B, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::config(format!(
                "expected 4-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Interprets the tensor as `[rows, cols]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::config(format!(
                "expected 2-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element precision (used by the gradient-check harness).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(Scalar::to_f64(*v)))
                .collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// Row-major `[m, k] x [k, n] -> [m, n]` on flat slices.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    T::gemm(
        m, k, n,
        T::one(),
        a, k as isize, 1,
        b, n as isize, 1,
        T::zero(),
        out, n as isize, 1,
    );
}

/// `A^T x B -> [m, n]` where `a` is stored as `[k, m]`.
pub fn matmul_at<T: Scalar>(a_t: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a_t.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    T::gemm(
        m, k, n,
        T::one(),
        a_t, 1, m as isize,
        b, n as isize, 1,
        T::zero(),
        out, n as isize, 1,
    );
}

/// `[m, k] x [k, n] -> [m, n]` where `b` is stored transposed as `[n, k]`.
pub fn matmul_bt<T: Scalar>(a: &[T], b_t: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b_t.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    T::gemm(
        m, k, n,
        T::one(),
        a, k as isize, 1,
        b_t, 1, k as isize,
        T::zero(),
        out, n as isize, 1,
    );
}

/// Convolution parameters for one layer: `[C_out, C_in, K, K]` weights plus
/// a per-output-channel bias. Square odd kernels only.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::config(format!(
                "conv weights must be [C_out, C_in, K, K], got {s:?}"
            )));
        }
        let k = s[2];
        if k % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {k}")));
        }
        if bias.shape() != [s[0]] {
            return Err(Error::config(format!(
                "conv bias must be [C_out={}], got {:?}",
                s[0],
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::config("stride must be >= 1"));
        }
        if !weights.is_finite() || !bias.is_finite() {
            return Err(Error::config("conv parameters must be finite"));
        }
        Ok(ConvParams {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Output spatial extents for an `[.., H, W]` input.
    pub fn out_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let span_h = h + 2 * self.padding;
        let span_w = w + 2 * self.padding;
        if span_h < k || span_w < k {
            return Err(Error::config(format!(
                "input {h}x{w} with padding {} smaller than kernel {k}",
                self.padding
            )));
        }
        if (span_h - k) % self.stride != 0 || (span_w - k) % self.stride != 0 {
            return Err(Error::config(format!(
                "geometry {h}x{w} (pad {}, kernel {k}) does not tile with stride {}",
                self.padding, self.stride
            )));
        }
        Ok(((span_h - k) / self.stride + 1, (span_w - k) / self.stride + 1))
    }
}

/// Lowers one sample `[C_in, H, W]` into `[C_in*K*K, H_out*W_out]` columns,
/// zero-filling padded taps. `col` must be sized exactly.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col_sample<T: Scalar>(
    sample: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), c_in * k * k * h_out * w_out);
    let cols = h_out * w_out;
    for c in 0..c_in {
        let plane = &sample[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * cols;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out_row = row + oy * w_out;
                    if iy < 0 || iy >= h as isize {
                        col[out_row..out_row + w_out].fill(T::zero());
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        col[out_row + ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            plane[iy * w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Cross-correlation (deep-learning convention, no kernel flip) plus bias.
///
/// `[B, C_in, H, W] -> [B, C_out, H_out, W_out]` with
/// `H_out = (H + 2*pad - K)/stride + 1`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let (batch, c_in, h, w) = input.dims4()?;
    if c_in != params.in_channels() {
        return Err(Error::config(format!(
            "input has {c_in} channels, conv expects {}",
            params.in_channels()
        )));
    }
    let (h_out, w_out) = params.out_extent(h, w)?;
    let c_out = params.out_channels();
    let k = params.kernel();
    let col_rows = c_in * k * k;
    let cols = h_out * w_out;

    let mut out = Tensor::zeros(&[batch, c_out, h_out, w_out]);
    let in_stride = c_in * h * w;
    let out_stride = c_out * cols;
    let weights = params.weights.data();
    let bias = params.bias.data();

    out.data_mut()
        .par_chunks_mut(out_stride * CHUNK_SAMPLES)
        .zip(input.data().par_chunks(in_stride * CHUNK_SAMPLES))
        .for_each(|(out_chunk, in_chunk)| {
            let mut col = vec![T::zero(); col_rows * cols];
            for (out_s, in_s) in out_chunk
                .chunks_mut(out_stride)
                .zip(in_chunk.chunks(in_stride))
            {
                im2col_sample(in_s, c_in, h, w, k, params.stride, params.padding, h_out, w_out, &mut col);
                matmul(weights, &col, c_out, col_rows, cols, out_s);
                for (o, out_plane) in out_s.chunks_mut(cols).enumerate() {
                    let b = bias[o];
                    for v in out_plane {
                        *v += b;
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of a scalar loss with respect to conv weights and bias, given
/// the upstream gradient on the conv output. Sums over the batch; per-batch
/// averaging is the loss function's job.
pub fn conv2d_weight_grad<T: Scalar>(
    input: &Tensor<T>,
    upstream: &Tensor<T>,
    params: &ConvParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, c_in, h, w) = input.dims4()?;
    let (ub, c_out, h_out, w_out) = upstream.dims4()?;
    let (eh, ew) = params.out_extent(h, w)?;
    if c_in != params.in_channels()
        || ub != batch
        || c_out != params.out_channels()
        || (h_out, w_out) != (eh, ew)
    {
        return Err(Error::config(format!(
            "weight-grad shapes inconsistent: input {:?}, upstream {:?}, weights {:?}",
            input.shape(),
            upstream.shape(),
            params.weights.shape()
        )));
    }
    let k = params.kernel();
    let col_rows = c_in * k * k;
    let cols = h_out * w_out;
    let in_stride = c_in * h * w;
    let up_stride = c_out * cols;

    // Per-chunk partial sums, folded in chunk order: bit-stable for any
    // worker count.
    let partials: Vec<(Vec<T>, Vec<T>)> = input
        .data()
        .par_chunks(in_stride * CHUNK_SAMPLES)
        .zip(upstream.data().par_chunks(up_stride * CHUNK_SAMPLES))
        .map(|(in_chunk, up_chunk)| {
            let mut col = vec![T::zero(); col_rows * cols];
            let mut dw = vec![T::zero(); c_out * col_rows];
            let mut db = vec![T::zero(); c_out];
            for (in_s, up_s) in in_chunk.chunks(in_stride).zip(up_chunk.chunks(up_stride)) {
                im2col_sample(in_s, c_in, h, w, k, params.stride, params.padding, h_out, w_out, &mut col);
                // dW += upstream [C_out, cols] x col^T [cols, col_rows]
                T::gemm(
                    c_out, cols, col_rows,
                    T::one(),
                    up_s, cols as isize, 1,
                    &col, 1, cols as isize,
                    T::one(),
                    &mut dw, col_rows as isize, 1,
                );
                for (o, up_plane) in up_s.chunks(cols).enumerate() {
                    db[o] += up_plane.iter().copied().sum::<T>();
                }
            }
            (dw, db)
        })
        .collect();

    let mut dw = vec![T::zero(); c_out * col_rows];
    let mut db = vec![T::zero(); c_out];
    for (pw, pb) in &partials {
        for (acc, v) in dw.iter_mut().zip(pw) {
            *acc += *v;
        }
        for (acc, v) in db.iter_mut().zip(pb) {
            *acc += *v;
        }
    }
    Ok((
        Tensor::from_vec(&[c_out, c_in, k, k], dw)?,
        Tensor::from_vec(&[c_out], db)?,
    ))
}

/// Rectifier plus its mask (the Jacobian diagonal). The derivative at
/// exactly zero is taken as zero.
pub fn relu<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let mut out = input.clone();
    let mut mask = Tensor::zeros(input.shape());
    out.data_mut()
        .par_iter_mut()
        .zip(mask.data_mut().par_iter_mut())
        .for_each(|(v, m)| {
            if *v > T::zero() {
                *m = T::one();
            } else {
                *v = T::zero();
            }
        });
    (out, mask)
}

/// Per-channel spatial mean: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, c, h, w) = input.dims4()?;
    let area = T::from_f64((h * w) as f64);
    let mut out = Tensor::zeros(&[batch, c]);
    out.data_mut()
        .iter_mut()
        .zip(input.data().chunks(h * w))
        .for_each(|(o, plane)| {
            *o = plane.iter().copied().sum::<T>() / area;
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    /// Direct six-loop cross-correlation, the independent oracle.
    fn conv_naive(input: &Tensor<f64>, params: &ConvParams<f64>) -> Tensor<f64> {
        let (batch, c_in, h, w) = input.dims4().unwrap();
        let c_out = params.out_channels();
        let k = params.kernel();
        let (h_out, w_out) = params.out_extent(h, w).unwrap();
        let mut out = Tensor::zeros(&[batch, c_out, h_out, w_out]);
        let x = input.data();
        let wt = params.weights.data();
        for b in 0..batch {
            for o in 0..c_out {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = params.bias.data()[o];
                        for c in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * params.stride + ky) as isize - params.padding as isize;
                                    let ix = (ox * params.stride + kx) as isize - params.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((b * c_in + c) * h + iy as usize) * w + ix as usize;
                                    let wi = ((o * c_in + c) * k + ky) * k + kx;
                                    acc += x[xi] * wt[wi];
                                }
                            }
                        }
                        let oi = ((b * c_out + o) * h_out + oy) * w_out + ox;
                        out.data_mut()[oi] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    fn rand_params(c_out: usize, c_in: usize, k: usize, stride: usize, pad: usize, seed: u64) -> ConvParams<f64> {
        let mut rng = rng_from_seed(seed);
        ConvParams::new(
            Tensor::randn(&[c_out, c_in, k, k], 0.5, &mut rng),
            Tensor::randn(&[c_out], 0.5, &mut rng),
            stride,
            pad,
        )
        .unwrap()
    }

    #[test]
    fn conv_zero_input_zero_bias_gives_zero() {
        let input = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let params = ConvParams::new(
            rand_tensor(&[2, 1, 3, 3], 1),
            Tensor::zeros(&[2]),
            1,
            1,
        )
        .unwrap();
        let out = conv2d_forward(&input, &params).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_scalar_case() {
        let input = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let params = ConvParams::new(
            Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap(),
            Tensor::from_vec(&[1], vec![0.5]).unwrap(),
            1,
            0,
        )
        .unwrap();
        let out = conv2d_forward(&input, &params).unwrap();
        assert_eq!(out.data(), &[3.0 * 2.0 + 0.5]);
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        for (h, stride, pad) in [(8, 1, 1), (8, 1, 0), (9, 2, 1), (9, 2, 0)] {
            let input = rand_tensor(&[2, 3, h, h], 7);
            let params = rand_params(4, 3, 3, stride, pad, 11);
            let fast = conv2d_forward(&input, &params).unwrap();
            let slow = conv_naive(&input, &params);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                let rel = (a - b).abs() / b.abs().max(1.0);
                assert!(rel <= 1e-6, "fast {a} vs naive {b}");
            }
        }
    }

    #[test]
    fn conv_linearity_in_input_with_zero_bias() {
        let x = rand_tensor(&[1, 2, 6, 6], 3);
        let y = rand_tensor(&[1, 2, 6, 6], 4);
        let mut params = rand_params(3, 2, 3, 1, 1, 5);
        params.bias = Tensor::zeros(&[3]);
        let mut combo = x.clone();
        for (c, (a, b)) in combo.data_mut().iter_mut().zip(x.data().iter().zip(y.data())) {
            *c = 2.0 * a + 0.5 * b;
        }
        let lhs = conv2d_forward(&combo, &params).unwrap();
        let mut rhs = conv2d_forward(&x, &params).unwrap();
        let ry = conv2d_forward(&y, &params).unwrap();
        for (r, v) in rhs.data_mut().iter_mut().zip(ry.data()) {
            *r = 2.0 * *r + 0.5 * v;
        }
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn weight_grad_zero_upstream() {
        let input = rand_tensor(&[1, 2, 4, 4], 9);
        let params = rand_params(3, 2, 3, 1, 1, 10);
        let upstream = Tensor::zeros(&[1, 3, 4, 4]);
        let (dw, db) = conv2d_weight_grad(&input, &upstream, &params).unwrap();
        assert!(dw.data().iter().all(|&v| v == 0.0));
        assert!(db.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_grad_scalar_case() {
        let input = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let params = ConvParams::new(
            Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap(),
            Tensor::from_vec(&[1], vec![0.0]).unwrap(),
            1,
            0,
        )
        .unwrap();
        let upstream = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let (dw, db) = conv2d_weight_grad(&input, &upstream, &params).unwrap();
        assert_eq!(dw.data(), &[5.0 * 3.0]);
        assert_eq!(db.data(), &[5.0]);
    }

    #[test]
    fn weight_grad_matches_finite_differences() {
        // d/dtheta sum(upstream * conv(x; theta)) vs central differences.
        let input = rand_tensor(&[2, 2, 8, 8], 21);
        let params = rand_params(4, 2, 3, 1, 1, 22);
        let upstream = rand_tensor(&[2, 4, 8, 8], 23);
        let (dw, db) = conv2d_weight_grad(&input, &upstream, &params).unwrap();

        let objective = |p: &ConvParams<f64>| -> f64 {
            let out = conv2d_forward(&input, p).unwrap();
            out.data()
                .iter()
                .zip(upstream.data())
                .map(|(a, u)| a * u)
                .sum()
        };
        let h = 1e-6;
        for idx in 0..params.weights.len() {
            let mut plus = params.clone();
            plus.weights.data_mut()[idx] += h;
            let mut minus = params.clone();
            minus.weights.data_mut()[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = dw.data()[idx];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-5, "weight {idx}: fd {fd} vs analytic {an}");
        }
        for idx in 0..params.bias.len() {
            let mut plus = params.clone();
            plus.bias.data_mut()[idx] += h;
            let mut minus = params.clone();
            minus.bias.data_mut()[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = db.data()[idx];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-5, "bias {idx}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn relu_sign_cases() {
        let t = Tensor::from_vec(&[1, 1, 1, 3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        let (out, mask) = relu(&t);
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(mask.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_idempotent_and_mask_identity() {
        let t = rand_tensor(&[2, 3, 4, 4], 31);
        let (once, mask) = relu(&t);
        let (twice, _) = relu(&once);
        assert_eq!(once.data(), twice.data());
        for ((o, m), x) in once.data().iter().zip(mask.data()).zip(t.data()) {
            assert_eq!(*o, m * x);
        }
    }

    #[test]
    fn gap_constant_and_degenerate() {
        let t = Tensor::<f32>::filled(&[2, 3, 4, 4], 2.5);
        let g = global_avg_pool(&t).unwrap();
        assert_eq!(g.shape(), &[2, 3]);
        assert!(g.data().iter().all(|&v| v == 2.5));

        let one = Tensor::from_vec(&[1, 2, 1, 1], vec![4.0f32, -1.0]).unwrap();
        let g1 = global_avg_pool(&one).unwrap();
        assert_eq!(g1.data(), &[4.0, -1.0]);
    }

    #[test]
    fn gap_matches_loop_mean() {
        let t = rand_tensor(&[2, 3, 4, 4], 41);
        let g = global_avg_pool(&t).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for h in 0..4 {
                    for w in 0..4 {
                        acc += t.data()[((b * 3 + c) * 4 + h) * 4 + w];
                    }
                }
                let expect = acc / 16.0;
                let got = g.data()[b * 3 + c];
                assert!((got - expect).abs() <= 1e-6 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let err = ConvParams::new(
            Tensor::<f32>::zeros(&[1, 1, 2, 2]),
            Tensor::zeros(&[1]),
            1,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn geometry_mismatch_rejected() {
        // (6 - 3) is not divisible by stride 2.
        let input = Tensor::<f32>::zeros(&[1, 1, 6, 6]);
        let params = ConvParams::new(
            Tensor::zeros(&[1, 1, 3, 3]),
            Tensor::zeros(&[1]),
            2,
            0,
        )
        .unwrap();
        assert!(conv2d_forward(&input, &params).is_err());
    }
}
