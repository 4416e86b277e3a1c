//! Partition-scheme and lambda sweep through the staged pipeline.
//!
//! cargo run --release --example ablation_sweep [-- <n_examples>]

use trajmine::pipeline::{files, run_stage, PipelineConfig, Stage};

fn main() -> trajmine::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(600);
    let mut cfg = PipelineConfig { out_dir: std::env::temp_dir().join("trajmine_ablation"), ..PipelineConfig::default() };
    cfg.synth.n_examples = n;
    cfg.training.epochs = 40;
    cfg.mining.r = vec![0.1];
    for stage in [Stage::Gen, Stage::Ingest, Stage::Ablate] {
        run_stage(stage, &cfg)?;
    }

    let path = cfg.out_dir.join(files::ABLATE_SUMMARY);
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(&path)?;
    println!("{:<14} {:>6} {:>10} {:>10} {:>10}", "scheme", "lambda", "dErr D_X", "dErr D_Z", "dErr D_YX");
    for rec in rdr.records() {
        let rec = rec?;
        let pct = |i: usize| 100.0 * rec[i].parse::<f64>().unwrap_or(f64::NAN);
        println!("{:<14} {:>6} {:>9.1}% {:>9.1}% {:>9.1}%", &rec[0], &rec[1], pct(7), pct(8), pct(9));
    }
    println!("per-cell reports under {}", cfg.out_dir.join(files::ABLATE_DIR).display());
    Ok(())
}
