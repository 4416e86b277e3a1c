//! Constant-velocity Kalman predictions on one scenario of each kind.
//!
//! cargo run --example kalman_baseline

use trajmine::eval::{example_error, kalman_cv_predict, ErrorMode, KalmanConfig};
use trajmine::synth::{gen_scenario, ScenarioKind, ScenarioSpec};
use trajmine::{FUTURE_FRAMES, HISTORY_FRAMES};

fn main() -> trajmine::Result<()> {
    let cfg = KalmanConfig::default();
    let kinds = [
        ScenarioKind::CarFollow,
        ScenarioKind::LaneChange,
        ScenarioKind::CancelledLaneChange,
        ScenarioKind::SuddenBrake,
        ScenarioKind::ExitAccelerate,
    ];
    println!("{:<22} {:>10} {:>12}", "scenario", "5 s error", "avg error");
    for kind in kinds {
        let sc = gen_scenario(&ScenarioSpec::new(kind, 5))?;
        let target = sc.tracks.iter().find(|t| t.vehicle_id == sc.target_id).expect("target track");
        let history = &target.points[..HISTORY_FRAMES];
        let truth: Vec<[f64; 2]> = target.points[HISTORY_FRAMES..HISTORY_FRAMES + FUTURE_FRAMES]
            .iter()
            .map(|p| [p.lateral, p.longitudinal])
            .collect();
        let pred = kalman_cv_predict(history, FUTURE_FRAMES, &cfg)?;
        println!(
            "{:<22} {:>9.2}m {:>11.2}m",
            format!("{kind:?}"),
            example_error(&pred, &truth, ErrorMode::Terminal)?,
            example_error(&pred, &truth, ErrorMode::HorizonAveraged)?
        );
    }
    Ok(())
}
