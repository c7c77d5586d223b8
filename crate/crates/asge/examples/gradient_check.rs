//! Verifies the hand-derived layer-local gradient chain against central
//! finite differences in double precision, parameter by parameter.
//!
//!     cargo run --release --example gradient_check

use asge::gradcheck::{default_spec, run_gradcheck};

fn main() -> asge::Result<()> {
    let spec = default_spec();
    println!(
        "checking a {}-layer stack on {:?} input, {} classes",
        spec.layers.len(),
        spec.input_shape,
        spec.n_classes
    );
    let report = run_gradcheck(&spec, 1, None)?;
    for layer in &report.layers {
        println!(
            "layer {}: {} parameters, max relative error {:.3e} (worst {})",
            layer.layer, layer.params_checked, layer.max_rel_err, layer.worst_param
        );
    }
    println!(
        "threshold {:.0e}: {}",
        report.threshold,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(())
}
