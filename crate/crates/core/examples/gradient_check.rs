//! Compares the analytic NLL gradient with central finite differences.
//!
//! cargo run --release --example gradient_check [-- <dim>]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use trajmine::flow::{FlowConfig, FlowModel};
use trajmine::train::{check_indices, finite_diff_check, finite_diff_check_against, grad_nll};

fn main() -> trajmine::Result<()> {
    let d: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(16);
    let model = FlowModel::random(d, &FlowConfig::default(), 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<Vec<f64>> = (0..8).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();

    println!("{} parameters", model.param_count());
    for eps in [1e-3, 1e-4, 1e-5, 1e-6] {
        let r = finite_diff_check(&model, &batch, eps)?;
        println!("eps {eps:e}: max rel error {:.3e} at {} over {} params", r.max_rel_error, r.worst_param, r.checked);
    }

    let (_, grad) = grad_nll(&model, &batch)?;
    let mut flat = grad.flat_params();
    let k = *check_indices(flat.len()).last().expect("non-empty model");
    flat[k] *= 1.01;
    let r = finite_diff_check_against(&model, &batch, 1e-5, &flat)?;
    println!("with 1% error injected into {}: max rel error {:.3e} at {}", model.param_path(k), r.max_rel_error, r.worst_param);
    Ok(())
}
