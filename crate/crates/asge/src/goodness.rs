//! Spatial goodness: per-patch mean squared activation (energy) of a feature
//! map, the layer-local supervision signal. Each `H x W` map is evenly tiled
//! into `P x P` patches; the patch energies of all channels concatenate into
//! one goodness vector per sample, ordered channel-major, then patch row,
//! then patch column. That ordering is load-bearing: projection matrices and
//! checkpoints depend on it.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Flattened per-sample patch-energy vector, `[B, C*P*P]`.
pub type GoodnessVector<T = f32> = Tensor<T>;

/// Even tiling of a `C x H x W` feature map into `P x P` patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    channels: usize,
    patches: usize,
    patch_h: usize,
    patch_w: usize,
}

impl PartitionPlan {
    pub fn new(channels: usize, h: usize, w: usize, patches: usize) -> Result<Self> {
        if patches == 0 || patches > h.min(w) {
            return Err(Error::config(format!(
                "partition factor {patches} out of range for {h}x{w} map"
            )));
        }
        if h % patches != 0 || w % patches != 0 {
            return Err(Error::config(format!(
                "partition factor {patches} does not evenly tile {h}x{w}"
            )));
        }
        Ok(PartitionPlan {
            channels,
            patches,
            patch_h: h / patches,
            patch_w: w / patches,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn patch_extent(&self) -> (usize, usize) {
        (self.patch_h, self.patch_w)
    }

    pub fn map_extent(&self) -> (usize, usize) {
        (self.patch_h * self.patches, self.patch_w * self.patches)
    }

    /// Length of the per-sample goodness vector, `C * P * P`.
    pub fn goodness_dim(&self) -> usize {
        self.channels * self.patches * self.patches
    }

    fn check_features<T: Scalar>(&self, features: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = features.dims4()?;
        if c != self.channels || (h, w) != self.map_extent() {
            return Err(Error::config(format!(
                "features {:?} do not match plan (C={}, {}x{})",
                features.shape(),
                self.channels,
                self.patch_h * self.patches,
                self.patch_w * self.patches
            )));
        }
        Ok((b, h, w))
    }
}

/// Patches per spatial axis for a layer, scaled inversely with its channel
/// count: `min(max(1, floor(alpha * c_last / c)), h, w)`, then reduced to the
/// largest value that still evenly tiles `h x w`.
pub fn partition_factor(alpha: f64, c: usize, c_last: usize, h: usize, w: usize) -> usize {
    debug_assert!(alpha >= 0.0);
    let raw = (alpha * c_last as f64 / c as f64).floor();
    let clamped = (raw.max(1.0) as usize).min(h).min(w);
    (1..=clamped)
        .rev()
        .find(|p| h % p == 0 && w % p == 0)
        .unwrap_or(1)
}

/// Patch energies of a post-activation feature map, flattened to
/// `[B, C*P*P]` in the fixed (channel, patch row, patch column) order.
pub fn spatial_goodness<T: Scalar>(
    features: &Tensor<T>,
    plan: &PartitionPlan,
) -> Result<GoodnessVector<T>> {
    let (batch, h, w) = plan.check_features(features)?;
    let p = plan.patches;
    let (ph, pw) = (plan.patch_h, plan.patch_w);
    let area = T::from_f64((ph * pw) as f64);
    let dim = plan.goodness_dim();
    let mut out = Tensor::zeros(&[batch, dim]);

    out.data_mut()
        .par_chunks_mut(dim)
        .zip(features.data().par_chunks(plan.channels * h * w))
        .for_each(|(g, sample)| {
            for c in 0..plan.channels {
                let plane = &sample[c * h * w..(c + 1) * h * w];
                for pi in 0..p {
                    for pj in 0..p {
                        let mut acc = T::zero();
                        for dy in 0..ph {
                            let row = (pi * ph + dy) * w + pj * pw;
                            for v in &plane[row..row + pw] {
                                acc += *v * *v;
                            }
                        }
                        g[(c * p + pi) * p + pj] = acc / area;
                    }
                }
            }
        });
    Ok(out)
}

/// Pulls an upstream gradient on the goodness vector back to the feature
/// map: at a pixel inside patch `(i, j)` of channel `c`, the contribution is
/// `upstream[c,i,j] * 2 * feature / patch_area`.
pub fn goodness_jacobian_apply<T: Scalar>(
    features: &Tensor<T>,
    plan: &PartitionPlan,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, h, w) = plan.check_features(features)?;
    let dim = plan.goodness_dim();
    if upstream.shape() != [batch, dim] {
        return Err(Error::config(format!(
            "upstream shape {:?} does not match goodness [{batch}, {dim}]",
            upstream.shape()
        )));
    }
    let p = plan.patches;
    let (ph, pw) = (plan.patch_h, plan.patch_w);
    let two_over_area = T::from_f64(2.0 / (ph * pw) as f64);
    let mut out = Tensor::zeros(features.shape());
    let sample_stride = plan.channels * h * w;

    out.data_mut()
        .par_chunks_mut(sample_stride)
        .zip(features.data().par_chunks(sample_stride))
        .zip(upstream.data().par_chunks(dim))
        .for_each(|((dst, sample), up)| {
            for c in 0..plan.channels {
                let base = c * h * w;
                for pi in 0..p {
                    for pj in 0..p {
                        let u = up[(c * p + pi) * p + pj] * two_over_area;
                        for dy in 0..ph {
                            let row = base + (pi * ph + dy) * w + pj * pw;
                            for (d, f) in dst[row..row + pw]
                                .iter_mut()
                                .zip(&sample[row..row + pw])
                            {
                                *d = u * *f;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}
