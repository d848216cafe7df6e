//! Finite-difference check of the detector's analytic gradients.
use spg_fuse::nnet::{gradient_check, random_input, GradCheckOptions, ModelConfig, ModelWeights};

fn main() -> spg_fuse::Result<()> {
    let cfg = ModelConfig::default();
    let w = ModelWeights::<f64>::init(&cfg, 0)?;
    println!("{} parameters", w.num_parameters());
    let x = random_input(&[1, 22, 16, 16], 1)?;
    let opts = GradCheckOptions {
        max_params: 2000,
        ..Default::default()
    };
    let r = gradient_check(&w, &x, &opts)?;
    println!(
        "checked {} (skipped {} at kinks), worst relative error {:.2e} at {}",
        r.checked, r.skipped, r.max_rel_err, r.worst_parameter
    );
    Ok(())
}
