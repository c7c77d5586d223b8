//! Trains the same stack under each prediction strategy and compares
//! accuracy, classifier parameter counts, and (for the classifier-free
//! strategy) the recorded best layer with its early-exit behavior.
//!
//!     cargo run --release --example prediction_strategies

use asge::data::{synthetic_textures, AugmentationPolicy, SplitTag};
use asge::layers::{PoolKind, PoolSpec};
use asge::network::{build_network, ArchSpec, LayerSpec, Strategy};
use asge::trainer::session::predict_accuracy;
use asge::trainer::{OptimizerHyper, Schedule, TrainOptions, TrainSession};

fn main() -> asge::Result<()> {
    println!("strategy  val acc  test acc  classifier params  best layer");
    for strategy in [Strategy::Last, Strategy::Fusion, Strategy::Best] {
        let arch = ArchSpec {
            input_shape: [1, 8, 8],
            n_classes: 4,
            alpha: 1.0,
            strategy,
            layers: vec![
                LayerSpec::channels(4).with_pool(PoolSpec::new(PoolKind::Rms)),
                LayerSpec::channels(8),
                LayerSpec::channels(8),
            ],
        };
        let hyper = OptimizerHyper::adamw(0.001);
        let network = build_network(&arch, 5, hyper)?;
        let params = network
            .classifier
            .as_ref()
            .map(|c| c.param_count())
            .unwrap_or(0);

        let train = synthetic_textures(512, 1, SplitTag::Train);
        let val = synthetic_textures(128, 2, SplitTag::Val);
        let test = synthetic_textures(128, 3, SplitTag::Test);
        let options = TrainOptions {
            seed: 5,
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
        let artifacts = session.run(|_, _| Ok(()))?;
        let test_acc = predict_accuracy(&session.network, &test, 32)?;
        println!(
            "{:<9} {:<8.3} {:<9.3} {:<18} {}",
            format!("{strategy:?}").to_lowercase(),
            artifacts.best_val_acc,
            test_acc,
            params,
            session
                .network
                .best_layer
                .map(|l| (l + 1).to_string())
                .unwrap_or_else(|| "-".into()),
        );
    }
    Ok(())
}
