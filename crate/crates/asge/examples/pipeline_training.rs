//! Layer-pipelined training: one worker per layer connected by bounded
//! queues, each stage training on batch b while the next stage still works
//! on batch b-1. Because layers forward their pre-update activations, the
//! parameter trajectory is bit-identical to sequential training; this
//! example verifies that and reports wall-clock for both schedules.
//!
//!     cargo run --release --example pipeline_training

use std::time::Instant;

use asge::data::{synthetic_textures, AugmentationPolicy, SplitTag};
use asge::layers::{PoolKind, PoolSpec};
use asge::network::{build_network, ArchSpec, LayerSpec, Network, Strategy};
use asge::trainer::{OptimizerHyper, Schedule, TrainOptions, TrainSession};

fn checksum(network: &Network) -> u64 {
    let mut acc = 0u64;
    for layer in &network.layers {
        for v in layer.conv.weights.data().iter().chain(layer.conv.bias.data()) {
            acc = acc.rotate_left(7) ^ u64::from(v.to_bits());
        }
    }
    acc
}

fn run(pipeline: bool) -> asge::Result<(u64, f64)> {
    let arch = ArchSpec {
        input_shape: [1, 8, 8],
        n_classes: 4,
        alpha: 1.0,
        strategy: Strategy::Fusion,
        layers: vec![
            LayerSpec::channels(8).with_pool(PoolSpec::new(PoolKind::Rms)),
            LayerSpec::channels(8),
            LayerSpec::channels(16),
            LayerSpec::channels(16),
        ],
    };
    let hyper = OptimizerHyper::adamw(0.001);
    let network = build_network(&arch, 3, hyper)?;
    let train = synthetic_textures(2048, 1, SplitTag::Train);
    let val = synthetic_textures(128, 2, SplitTag::Val);
    let options = TrainOptions {
        seed: 3,
        epochs: 2,
        batch_size: 32,
        optimizer: hyper,
        schedule: Schedule::new(0.01, 1e-4, 2)?,
        augmentation: AugmentationPolicy::disabled(),
        deterministic: true,
        pipeline,
        queue_depth: 2,
    };
    let mut session = TrainSession::new(network, train, val, options)?;
    let started = Instant::now();
    session.run(|_, _| Ok(()))?;
    Ok((checksum(&session.network), started.elapsed().as_secs_f64()))
}

fn main() -> asge::Result<()> {
    let (seq_sum, seq_time) = run(false)?;
    let (pipe_sum, pipe_time) = run(true)?;
    println!("sequential: {seq_time:.2}s  checksum {seq_sum:#018x}");
    println!("pipelined:  {pipe_time:.2}s  checksum {pipe_sum:#018x}");
    assert_eq!(seq_sum, pipe_sum, "trajectories must be bit-identical");
    println!("parameter trajectories are bit-identical across schedules");
    println!("(speedups need one core per stage; on few cores expect parity)");
    Ok(())
}
