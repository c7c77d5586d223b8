//! Compares patch-energy distributions before and after downsampling with
//! each pooling flavor. RMS pooling is the energy-preserving one: its
//! goodness distribution tracks the original, while average pooling
//! suppresses energy and max pooling inflates it.
//!
//!     cargo run --example goodness_distributions

use asge::data::{synthetic_textures, SplitTag};
use asge::goodness::{partition_factor, spatial_goodness, PartitionPlan};
use asge::layers::{pool, PoolKind, PoolSpec};
use asge::tensor::{conv2d_forward, relu, ConvParams, Tensor};

fn summarize(name: &str, values: &[f32]) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let mean = values.iter().sum::<f32>() / values.len() as f32;
    let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p) as usize];
    println!(
        "{name:<8} mean {mean:>8.4}  p50 {:>8.4}  p90 {:>8.4}  max {:>8.4}",
        q(0.5),
        q(0.9),
        sorted[sorted.len() - 1]
    );
}

fn main() -> asge::Result<()> {
    // Feature maps from a random conv over the synthetic textures stand in
    // for a trained layer's activations.
    let data = synthetic_textures(256, 9, SplitTag::Train);
    let mut rng = asge::rng::rng_from_seed(11);
    let conv = ConvParams::new(
        Tensor::randn(&[16, 1, 3, 3], 0.5, &mut rng),
        Tensor::zeros(&[16]),
        1,
        1,
    )?;
    let pre = conv2d_forward(&data.images, &conv)?;
    let (act, _) = relu(&pre);

    let plan = PartitionPlan::new(16, 8, 8, partition_factor(1.0, 16, 16, 8, 8))?;
    let origin = spatial_goodness(&act, &plan)?;
    summarize("origin", origin.data());

    for kind in [PoolKind::Rms, PoolKind::Avg, PoolKind::Max] {
        let pooled = pool(&act, &PoolSpec::new(kind))?;
        let (_, c, h, w) = pooled.dims4()?;
        let p = partition_factor(1.0, c, c, h, w);
        let g = spatial_goodness(&pooled, &PartitionPlan::new(c, h, w, p)?)?;
        let name = match kind {
            PoolKind::Rms => "rms",
            PoolKind::Avg => "avg",
            PoolKind::Max => "max",
        };
        summarize(name, g.data());
    }
    println!("\nrms should track origin; avg sits below, max above.");
    Ok(())
}
