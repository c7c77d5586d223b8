//! Shows how the channel-aware partition factor assigns patches per layer:
//! wide shallow layers get fine tilings, narrow deep layers coarse ones,
//! always clamped to tile the map evenly.
//!
//!     cargo run --example partition_plans

use asge::goodness::partition_factor;
use asge::layers::PoolKind;
use asge::network::ArchSpec;

fn main() {
    // The classic channel table: final-layer width 512, maps wide enough
    // that no clamping interferes.
    println!("alpha    C=128  C=256  C=512");
    for alpha in [0.0, 0.5, 1.0, 1.5, 2.0] {
        let row: Vec<usize> = [128, 256, 512]
            .iter()
            .map(|&c| partition_factor(alpha, c, 512, 48, 48))
            .collect();
        println!("{alpha:<8} {:<6} {:<6} {:<6}", row[0], row[1], row[2]);
    }

    // The same factors materialized through a real stack trace on 32x32
    // input, where pooling shrinks the maps as channels widen.
    let spec = ArchSpec::vgg8([3, 32, 32], 10, PoolKind::Rms);
    let geometry = spec.trace().expect("default stack is valid");
    println!("\nlayer  channels  map      P  goodness dim");
    for (i, g) in geometry.iter().enumerate() {
        println!(
            "{:<6} {:<9} {:>3}x{:<4} {:<2} {}",
            i + 1,
            g.out_channels,
            g.conv_h,
            g.conv_w,
            g.partition,
            g.out_channels * g.partition * g.partition
        );
    }
}
