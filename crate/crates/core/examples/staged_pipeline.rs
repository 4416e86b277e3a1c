//! Runs every stage on a synthetic dataset and prints the headline metrics.
//!
//! cargo run --release --example staged_pipeline [-- <n_examples> <out_dir>]

use std::path::PathBuf;

use trajmine::io::read_bytes;
use trajmine::pipeline::{files, run_stage, EvalSummary, PipelineConfig, Stage, Stamped};

fn main() -> trajmine::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("trajmine_demo"));

    let mut cfg = PipelineConfig { out_dir: out.clone(), ..PipelineConfig::default() };
    cfg.synth.n_examples = n;
    let start = std::time::Instant::now();
    run_stage(Stage::All, &cfg)?;
    println!("pipeline finished in {:.1?}, artifacts in {}", start.elapsed(), out.display());

    let report: Stamped<EvalSummary> = serde_json::from_slice(&read_bytes(&out.join(files::EVAL_REPORT))?)?;
    let s = &report.body;
    for (k, rep) in s.reports.iter().enumerate() {
        print!("r={:<5} Err(D)={:.3}", rep.r, rep.err_full);
        for sub in &rep.subsets {
            print!("  {} {:+.1}% cov {:.2}", sub.name, 100.0 * sub.delta_err, sub.cov_ref);
        }
        println!("  random(20) {:+.1}%", 100.0 * s.random_mean_delta_err[k]);
    }
    if let Some(recall) = &s.rare_recall {
        for r in recall {
            println!(
                "r={:<5} rare fraction: D_X {:.3} D_Z {:.3} D_YX {:.3} random {:.3} overall {:.3}",
                r.r, r.d_x, r.d_z, r.d_yx, r.random, r.overall
            );
        }
    }
    Ok(())
}
