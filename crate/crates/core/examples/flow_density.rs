//! Fits a flow to a two-component Gaussian mixture and compares its held-out
//! log-likelihood with the true mixture density.
//!
//! cargo run --release --example flow_density [-- <layers> <hidden> <epochs>]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use trajmine::flow::{FlowConfig, LN_2PI};
use trajmine::train::{train, TrainConfig};

fn mixture_log_density(p: &[f64]) -> f64 {
    let comp = |mx: f64| -LN_2PI - 0.5 * ((p[0] - mx).powi(2) + p[1].powi(2));
    let (a, b) = (comp(2.0), comp(-2.0));
    let m = a.max(b);
    m + (0.5 * (a - m).exp() + 0.5 * (b - m).exp()).ln()
}

fn draw(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mx = if i % 2 == 0 { 2.0 } else { -2.0 };
            let x: f64 = StandardNormal.sample(&mut rng);
            let y: f64 = StandardNormal.sample(&mut rng);
            vec![mx + x, y]
        })
        .collect()
}

fn main() -> trajmine::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let flow = FlowConfig { coupling_layers: *args.first().unwrap_or(&4), hidden: *args.get(1).unwrap_or(&64) };
    let cfg = TrainConfig { epochs: *args.get(2).unwrap_or(&200), seed: 11, ..TrainConfig::default() };

    let data = draw(5000, 1);
    let held_out = draw(2000, 2);
    let start = std::time::Instant::now();
    let (model, log) = train(&data, &flow, &cfg)?;
    println!(
        "trained {} epochs in {:.1?}, best epoch {}",
        log.epochs.len() - 1,
        start.elapsed(),
        log.best_epoch
    );

    let n = held_out.len() as f64;
    let flow_ll = held_out.iter().map(|p| model.log_prob(p)).sum::<trajmine::Result<f64>>()? / n;
    let true_ll = held_out.iter().map(|p| mixture_log_density(p)).sum::<f64>() / n;
    println!("held-out mean log-likelihood: flow {flow_ll:.4}, mixture {true_ll:.4}, gap {:.4}", true_ll - flow_ll);

    let steps = 400;
    let h = 16.0 / steps as f64;
    let mut mass = 0.0;
    for i in 0..=steps {
        for j in 0..=steps {
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 } * if j == 0 || j == steps { 0.5 } else { 1.0 };
            mass += w * model.log_prob(&[-8.0 + i as f64 * h, -8.0 + j as f64 * h])?.exp();
        }
    }
    println!("probability mass on [-8, 8]^2: {:.6}", mass * h * h);
    Ok(())
}
