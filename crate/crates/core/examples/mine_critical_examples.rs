//! Trains history and course flows in memory, scores every example and
//! reports what the mined subsets contain.
//!
//! cargo run --release --example mine_critical_examples [-- <n_examples> <lambda>]

use std::collections::BTreeSet;

use trajmine::data::window_examples_for;
use trajmine::eval::{coverage, delta_err, prediction_errors, rmse, subset_rmse, top_error_indices, ErrorMode, KalmanConfig};
use trajmine::features::{extract_all, PartitionScheme, Scope};
use trajmine::flow::FlowConfig;
use trajmine::mining::{mine_all, score_examples};
use trajmine::pipeline::fit_flow;
use trajmine::synth::gen_dataset;
use trajmine::train::TrainConfig;

fn main() -> trajmine::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1000);
    let lambda: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.5);

    let ds = gen_dataset(n, 0.05, 1)?;
    let targets: BTreeSet<i64> = ds.labels.iter().map(|l| l.vehicle_id).collect();
    let examples = window_examples_for(&ds.tracks, 50, Some(&targets))?;
    let scheme = PartitionScheme::FixSegNum(5);
    let fx = extract_all(&examples, &ds.tracks, Scope::X, scheme)?;
    let fz = extract_all(&examples, &ds.tracks, Scope::Z, scheme)?;

    let flow = FlowConfig::default();
    let (mx, lx) = fit_flow(&fx, &flow, &TrainConfig { seed: 1, ..TrainConfig::default() })?;
    let (mz, lz) = fit_flow(&fz, &flow, &TrainConfig { seed: 2, ..TrainConfig::default() })?;
    println!("history flow best epoch {}, course flow best epoch {}", lx.best_epoch, lz.best_epoch);

    let table = score_examples(&mx, &mz, &fx, &fz, lambda)?;
    let errors = prediction_errors(&examples, &KalmanConfig::default(), ErrorMode::Terminal)?;
    let full = rmse(&errors)?;
    let labels: Vec<_> = examples
        .iter()
        .map(|e| ds.labels.iter().find(|l| l.vehicle_id == e.target_id).expect("labelled target"))
        .collect();

    for r in [0.05, 0.1] {
        let m = mine_all(&table, r)?;
        let reference = top_error_indices(&errors, r)?;
        println!("r = {r}");
        for (name, set) in [("D_X", &m.d_x), ("D_Z", &m.d_z), ("D_Y|X", &m.d_yx)] {
            let rare = set.iter().filter(|&&i| labels[i].rare).count();
            println!(
                "  {name:<6} dErr {:+7.1}%  Cov_ref {:.2}  rare {rare}/{}",
                100.0 * delta_err(subset_rmse(&errors, set)?, full)?,
                coverage(set, &reference)?,
                set.len()
            );
        }
    }
    Ok(())
}
