//! Smallest end-to-end run: train a two-layer stack on the built-in
//! synthetic texture task, no downloaded data required.
//!
//!     cargo run --release --example quickstart_synthetic

use asge::data::{synthetic_textures, AugmentationPolicy, SplitTag};
use asge::layers::{PoolKind, PoolSpec};
use asge::network::{build_network, ArchSpec, LayerSpec, Strategy};
use asge::trainer::{OptimizerHyper, Schedule, TrainOptions, TrainSession};

fn main() -> asge::Result<()> {
    let arch = ArchSpec {
        input_shape: [1, 8, 8],
        n_classes: 4,
        alpha: 1.0,
        strategy: Strategy::Fusion,
        layers: vec![
            LayerSpec::channels(4).with_pool(PoolSpec::new(PoolKind::Rms)),
            LayerSpec::channels(8),
        ],
    };
    let seed = 42;
    let hyper = OptimizerHyper::adamw(0.001);
    let network = build_network(&arch, seed, hyper)?;

    let train = synthetic_textures(512, 1, SplitTag::Train);
    let val = synthetic_textures(128, 2, SplitTag::Val);
    let options = TrainOptions {
        seed,
        epochs: 6,
        batch_size: 32,
        optimizer: hyper,
        schedule: Schedule::new(0.01, 1e-4, 6)?,
        augmentation: AugmentationPolicy::disabled(),
        deterministic: true,
        pipeline: false,
        queue_depth: 2,
    };
    let mut session = TrainSession::new(network, train, val, options)?;
    let artifacts = session.run(|_, m| {
        println!(
            "epoch {}  lr {:.5}  per-layer val acc {:?}  classifier val acc {:.3}",
            m.epoch,
            m.lr,
            m.per_layer_val_acc
                .iter()
                .map(|a| format!("{a:.3}"))
                .collect::<Vec<_>>(),
            m.strategy_val_acc
        );
        Ok(())
    })?;
    println!(
        "best validation accuracy {:.3} at epoch {}",
        artifacts.best_val_acc, artifacts.best_epoch
    );
    Ok(())
}
