//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own PASS/FAIL line; exits non-zero if any fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use trajmine::data::window_examples_for;
use trajmine::eval::{coverage, delta_err, random_baseline};
use trajmine::features::{extract_all, PartitionScheme, Scope, Standardizer, FEATURES_PER_SEGMENT};
use trajmine::flow::{FlowConfig, FlowModel, LN_2PI};
use trajmine::io::read_bytes;
use trajmine::mining::{mine_all, read_scores_csv, ScoreTable};
use trajmine::pipeline::{files, mined_file, run_stage, Labels, PipelineConfig, Stage, Stamped};
use trajmine::synth::gen_dataset;
use trajmine::train::{finite_diff_check, train, TrainConfig};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Check {
    ensure(elapsed < limit, format!("{detail}; {:.1?} (limit {limit:?})", elapsed))
}

fn random_normal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn perturbed_model(d: usize, seed: u64) -> FlowModel {
    let mut m = FlowModel::random(d, &FlowConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for s in &mut m.scaling.log_scale {
        *s = rng.random_range(0.1..0.6);
    }
    for l in &mut m.layers {
        for b in l.net.b1.iter_mut().chain(&mut l.net.b2).chain(&mut l.net.b3) {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    m
}

fn numeric_log_det(m: &FlowModel, v: &[f64]) -> f64 {
    let d = v.len();
    let h = 1e-5;
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut up = v.to_vec();
        let mut down = v.to_vec();
        up[j] += h;
        down[j] -= h;
        let (fu, _) = m.forward(&up).unwrap();
        let (fd, _) = m.forward(&down).unwrap();
        for i in 0..d {
            jac[(i, j)] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    jac.lu().determinant().abs().ln()
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut worst_det: f64 = 0.0;
    let mut worst_rt: f64 = 0.0;
    for (k, d) in [2usize, 4, 6].into_iter().enumerate() {
        let m = perturbed_model(d, 10 + k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        for i in 0..1000 {
            let v = random_normal(d, &mut rng);
            let (b, log_det) = m.forward(&v).map_err(|e| e.to_string())?;
            let back = m.inverse(&b).map_err(|e| e.to_string())?;
            let rt = v.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst_rt = worst_rt.max(rt);
            if i % 50 == 0 {
                let num = numeric_log_det(&m, &v);
                worst_det = worst_det.max((log_det - num).abs() / log_det.abs());
            }
        }
    }
    let detail = format!("max log-det rel error {worst_det:.2e}, max round-trip error {worst_rt:.2e}");
    ensure(worst_det < 1e-6 && worst_rt < 1e-9, detail).and_then(|d| within(start.elapsed(), Duration::from_secs(30), d))
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for d in [2usize, 16, 130] {
        let m = FlowModel::random(d, &FlowConfig::default(), d as u64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7 + d as u64);
        let batch: Vec<Vec<f64>> = (0..8).map(|_| random_normal(d, &mut rng)).collect();
        let rep = finite_diff_check(&m, &batch, 1e-5).map_err(|e| e.to_string())?;
        ok &= rep.max_rel_error < 1e-4;
        parts.push(format!("d={d}: {:.2e} over {} params ({})", rep.max_rel_error, rep.checked, rep.worst_param));
    }
    ensure(ok, parts.join(", ")).and_then(|d| within(start.elapsed(), Duration::from_secs(120), d))
}

fn mixture_log_density(p: &[f64]) -> f64 {
    let comp = |mx: f64| -LN_2PI - 0.5 * ((p[0] - mx).powi(2) + p[1].powi(2));
    let (a, b) = (comp(2.0), comp(-2.0));
    let m = a.max(b);
    m + (0.5 * (a - m).exp() + 0.5 * (b - m).exp()).ln()
}

fn mixture_sample(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mx = if rng.random_bool(0.5) { 2.0 } else { -2.0 };
            let x: f64 = StandardNormal.sample(&mut rng);
            let y: f64 = StandardNormal.sample(&mut rng);
            vec![mx + x, y]
        })
        .collect()
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let data = mixture_sample(5000, 1);
    let held_out = mixture_sample(2000, 2);
    let cfg = TrainConfig { seed: 11, ..TrainConfig::default() };
    let (model, _) = train(&data, &FlowConfig::default(), &cfg).map_err(|e| e.to_string())?;
    let n = held_out.len() as f64;
    let flow_ll: f64 = held_out.iter().map(|p| model.log_prob(p).unwrap()).sum::<f64>() / n;
    let true_ll: f64 = held_out.iter().map(|p| mixture_log_density(p)).sum::<f64>() / n;

    let steps = 400;
    let h = 16.0 / steps as f64;
    let mut mass = 0.0;
    for i in 0..=steps {
        for j in 0..=steps {
            let wi = if i == 0 || i == steps { 0.5 } else { 1.0 };
            let wj = if j == 0 || j == steps { 0.5 } else { 1.0 };
            mass += wi * wj * model.log_prob(&[-8.0 + i as f64 * h, -8.0 + j as f64 * h]).unwrap().exp();
        }
    }
    mass *= h * h;
    let gap = (true_ll - flow_ll).abs();
    let detail = format!("flow {flow_ll:.4} vs mixture {true_ll:.4} nats (gap {gap:.4}), mass {mass:.6}");
    ensure(gap < 0.1 && (mass - 1.0).abs() <= 1e-3, detail).and_then(|d| within(start.elapsed(), Duration::from_secs(300), d))
}

fn criterion_4() -> Check {
    let full = 4.496;
    // (Err, rounded change in percent) for D_X, D_Z, D_Y|X, random, reference at r = 20/15/10/5 %
    let table: [(f64, f64); 20] = [
        (5.398, 20.1), (6.620, 47.2), (6.697, 49.0), (4.410, -1.90), (6.679, 48.5),
        (5.643, 25.5), (7.165, 59.4), (7.333, 63.1), (4.318, -4.0), (7.011, 55.9),
        (5.470, 21.7), (7.919, 76.1), (8.017, 78.3), (4.301, -4.3), (7.834, 74.2),
        (6.500, 44.6), (9.233, 105.3), (9.356, 108.1), (4.303, -4.3), (8.934, 98.7),
    ];
    let mut worst: f64 = 0.0;
    for (err, rounded) in table {
        let pct = 100.0 * delta_err(err, full).map_err(|e| e.to_string())?;
        let oracle = 100.0 * (err - full) / full;
        if (pct - oracle).abs() > 1e-12 {
            return Err(format!("{err}: {pct} disagrees with direct arithmetic {oracle}"));
        }
        worst = worst.max((pct - rounded).abs());
    }
    let target: Vec<usize> = (0..100).collect();
    let mined: Vec<usize> = (71..200).collect();
    let cov = coverage(&mined, &target).map_err(|e| e.to_string())?;
    ensure(worst <= 0.15 && cov == 0.29, format!("max deviation {worst:.3} pp over 20 cells, coverage {cov}"))
}

struct Run {
    dir: PathBuf,
    elapsed: Duration,
    table: ScoreTable,
    errors: Vec<f64>,
    rare: Vec<bool>,
}

fn read_errors(path: &Path) -> Vec<f64> {
    trajmine::eval::read_errors_csv(read_bytes(path).unwrap().as_slice()).unwrap()
}

fn shared_run() -> &'static Result<Run, String> {
    static RUN: OnceLock<Result<Run, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("trajmine_acceptance_{}", std::process::id()));
        let mut cfg = PipelineConfig { out_dir: dir.clone(), ..PipelineConfig::default() };
        cfg.synth.n_examples = 2000;
        cfg.synth.rare_rate = 0.05;
        cfg.features.scheme = PartitionScheme::FixSegNum(5);
        cfg.mining.lambda = 0.5;
        cfg.mining.r = vec![0.05, 0.1, 0.15, 0.2];
        let start = Instant::now();
        run_stage(Stage::All, &cfg).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        let table = read_scores_csv(read_bytes(&dir.join(files::SCORES)).unwrap().as_slice(), 0.5).map_err(|e| e.to_string())?;
        let labels: Stamped<Labels> = serde_json::from_slice(&read_bytes(&dir.join(files::LABELS)).unwrap()).unwrap();
        Ok(Run { errors: read_errors(&dir.join(files::ERRORS)), rare: labels.body.rare.unwrap(), dir, elapsed, table })
    })
}

fn rmse_of(errors: &[f64], set: &[usize]) -> f64 {
    (set.iter().map(|&i| errors[i] * errors[i]).sum::<f64>() / set.len() as f64).sqrt()
}

/// Row flags from a mined CSV, column `in_dz` or `in_dyx`.
fn mined_column(path: &Path, column: &str) -> Vec<usize> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    let col = r.headers().unwrap().iter().position(|h| h == column).unwrap();
    r.records()
        .map(|rec| rec.unwrap())
        .filter(|rec| &rec[col] == "1")
        .map(|rec| rec[0].parse().unwrap())
        .collect()
}

fn criterion_5() -> Check {
    let run = shared_run().as_ref()?;
    let n = run.errors.len();
    let full = rmse_of(&run.errors, &(0..n).collect::<Vec<_>>());
    let d_yx = mined_column(&run.dir.join(mined_file(0.05)), "in_dyx");
    let gain = (rmse_of(&run.errors, &d_yx) - full) / full;
    let random: f64 = (0..20)
        .map(|s| (rmse_of(&run.errors, &random_baseline(n, 0.05, 1000 + s).unwrap()) - full) / full)
        .sum::<f64>()
        / 20.0;
    let detail = format!(
        "n={n}, |D_Y|X|={}, dErr {:+.1}% vs random mean {:+.2}% (x{:.1})",
        d_yx.len(),
        100.0 * gain,
        100.0 * random,
        gain / random.abs()
    );
    ensure(d_yx.len() == 100 && gain >= 0.5 && gain >= 3.0 * random.abs(), detail)
        .and_then(|d| within(run.elapsed, Duration::from_secs(900), d))
}

fn criterion_6() -> Check {
    let run = shared_run().as_ref()?;
    let n = run.rare.len();
    let frac = |set: &[usize]| set.iter().filter(|&&i| run.rare[i]).count() as f64 / set.len() as f64;
    let d_z = mined_column(&run.dir.join(mined_file(0.1)), "in_dz");
    let mined = frac(&d_z);
    let random = (0..20).map(|s| frac(&random_baseline(n, 0.1, 2000 + s).unwrap())).sum::<f64>() / 20.0;
    ensure(
        d_z.len() == n / 10 && mined >= 3.0 * random,
        format!("rare fraction in D_Z {mined:.3} vs size-matched random {random:.3} (x{:.1})", mined / random),
    )
}

fn criterion_7() -> Check {
    let run = shared_run().as_ref()?;
    let n = run.table.len();
    let mut prev: Option<[BTreeSet<usize>; 3]> = None;
    for r in [0.05, 0.1, 0.15, 0.2] {
        let m = mine_all(&run.table, r).map_err(|e| e.to_string())?;
        let k = (r * n as f64 + 1e-9).floor() as usize;
        if [&m.d_x, &m.d_z, &m.d_yx].iter().any(|s| s.len() != k) {
            return Err(format!("r={r}: subset sizes differ from {k}"));
        }
        let sets = [m.d_x, m.d_z, m.d_yx].map(|s| s.into_iter().collect::<BTreeSet<_>>());
        if let Some(p) = &prev {
            if p.iter().zip(&sets).any(|(a, b)| !a.is_subset(b)) {
                return Err(format!("nesting broken at r={r}"));
            }
        }
        prev = Some(sets);
    }
    let zero = mine_all(&run.table.with_lambda(0.0), 0.1).map_err(|e| e.to_string())?;
    if zero.d_yx != zero.d_z {
        return Err("lambda=0 hardness subset differs from course subset".into());
    }

    let ds = gen_dataset(300, 0.05, 5).map_err(|e| e.to_string())?;
    let ids: BTreeSet<i64> = ds.labels.iter().map(|l| l.vehicle_id).collect();
    let examples = window_examples_for(&ds.tracks, 50, Some(&ids)).map_err(|e| e.to_string())?;
    let grid = [
        (PartitionScheme::FixSegNum(1), 1, 1),
        (PartitionScheme::FixSegNum(3), 3, 3),
        (PartitionScheme::FixSegNum(5), 5, 5),
        (PartitionScheme::FixSegLen(0.6), 5, 14),
        (PartitionScheme::FixSegLen(1.0), 3, 8),
        (PartitionScheme::FixSegLen(1.4), 3, 6),
    ];
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for (scheme, mx, mz) in grid {
        for (scope, m) in [(Scope::X, mx), (Scope::Z, mz)] {
            let f = extract_all(&examples, &ds.tracks, scope, scheme).map_err(|e| e.to_string())?;
            if f.iter().any(|v| v.dim() != FEATURES_PER_SEGMENT * m) {
                return Err(format!("{scheme} {}: expected length {}", scope.name(), FEATURES_PER_SEGMENT * m));
            }
            let st = Standardizer::fit(&f).map_err(|e| e.to_string())?;
            let z: Vec<Vec<f64>> = f.iter().map(|v| st.apply(v).unwrap()).collect();
            for d in 0..f[0].dim() {
                let obs: Vec<f64> = f.iter().zip(&z).filter(|(v, _)| v.mask[d]).map(|(_, z)| z[d]).collect();
                let mean = obs.iter().sum::<f64>() / obs.len() as f64;
                let var = obs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / obs.len() as f64;
                worst_mean = worst_mean.max(mean.abs());
                if st.std[d] > trajmine::features::STD_FLOOR {
                    worst_std = worst_std.max((var.sqrt() - 1.0).abs());
                }
            }
        }
    }
    ensure(
        worst_mean <= 1e-9 && worst_std <= 1e-6,
        format!("cardinality, nesting, lambda=0 ok; 12 layouts ok; standardized |mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}"),
    )
}

fn criterion_8() -> Check {
    let base = std::env::temp_dir().join(format!("trajmine_determinism_{}", std::process::id()));
    let run = |name: &str| -> Result<PathBuf, String> {
        let dir = base.join(name);
        let mut cfg = PipelineConfig { out_dir: dir.clone(), seed: 42, ..PipelineConfig::default() };
        cfg.synth.n_examples = 400;
        cfg.training.epochs = 8;
        run_stage(Stage::All, &cfg).map_err(|e| e.to_string())?;
        Ok(dir)
    };
    let (a, b) = (run("a")?, run("b")?);
    let mut names: Vec<String> = vec![files::SCORES.into(), files::MINED_SUMMARY.into(), files::EVAL_REPORT.into(), files::ERRORS.into()];
    names.extend([0.05, 0.1, 0.15, 0.2].map(mined_file));
    let mut differing = Vec::new();
    for name in &names {
        if read_bytes(&a.join(name)).unwrap() != read_bytes(&b.join(name)).unwrap() {
            differing.push(name.clone());
        }
    }
    let _ = std::fs::remove_dir_all(&base);
    ensure(differing.is_empty(), format!("{} artifacts compared, differing: {differing:?}", names.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("1 flow exactness", criterion_1),
        ("2 gradient correctness", criterion_2),
        ("3 density recovery", criterion_3),
        ("4 error-change arithmetic", criterion_4),
        ("5 mining enrichment", criterion_5),
        ("6 rare-label recall", criterion_6),
        ("7 structural invariants", criterion_7),
        ("8 determinism", criterion_8),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    if let Ok(run) = shared_run() {
        let _ = std::fs::remove_dir_all(&run.dir);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
