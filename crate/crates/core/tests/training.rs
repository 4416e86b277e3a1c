use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use trajmine::flow::{FlowConfig, LN_2PI};
use trajmine::train::{finite_diff_check, nll, train, TrainConfig};

fn normal_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}

#[test]
fn standard_normal_reaches_its_entropy() {
    let data = normal_rows(5000, 2, 1);
    let held_out = normal_rows(4000, 2, 2);
    let (model, log) = train(&data, &FlowConfig::default(), &TrainConfig { seed: 3, ..TrainConfig::default() }).unwrap();
    let entropy = LN_2PI + 1.0;
    let got = nll(&model, &held_out).unwrap();
    assert!((got - entropy).abs() < 0.05, "held-out nll {got}, entropy {entropy}");
    assert!(log.best().unwrap().val_nll <= log.epochs[0].val_nll);
    assert!(log.gradient_check.unwrap().max_rel_error < 1e-4);
}

#[test]
fn gradient_stays_exact_after_an_epoch() {
    for d in [2usize, 16, 130] {
        let data = normal_rows(300, d, d as u64);
        let cfg = TrainConfig { epochs: 1, patience: 5, seed: 9, ..TrainConfig::default() };
        let (model, log) = train(&data, &FlowConfig::default(), &cfg).unwrap();
        assert_eq!(log.epochs.len(), 2);
        let rep = finite_diff_check(&model, &data[..8], 1e-5).unwrap();
        assert!(rep.max_rel_error < 1e-4, "d={d}: {rep:?}");
    }
}

#[test]
fn same_seed_same_parameter_file() {
    let data = normal_rows(400, 6, 4);
    let cfg = TrainConfig { epochs: 4, batch_size: 64, seed: 1, ..TrainConfig::default() };
    let flow = FlowConfig { coupling_layers: 2, hidden: 16 };
    let (a, _) = train(&data, &flow, &cfg).unwrap();
    let (b, _) = train(&data, &flow, &cfg).unwrap();
    assert_eq!(a.to_bytes("h").unwrap(), b.to_bytes("h").unwrap());
    let (c, _) = train(&data, &flow, &TrainConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(a.to_bytes("h").unwrap(), c.to_bytes("h").unwrap());
}
