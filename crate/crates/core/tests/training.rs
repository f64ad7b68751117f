mod oracles;

use semiseg_core::evaluation::{evaluate, f_measure};
use semiseg_core::sample::{is_valid_counts, SampleConfig};
use semiseg_core::training::*;

fn oracle_penalty(p: &[f64], q: &[f64]) -> f64 {
    let mut same = 0.0;
    for k in 0..p.len() {
        same += p[k] * q[k];
    }
    1.0 - same
}

#[test]
fn loss_values() {
    let u = [1.0 / 7.0; 7];
    assert!((constraint_penalty(&u, &u) - 6.0 / 7.0).abs() < 1e-12);
    let mut one = [0.0; 7];
    one[3] = 1.0;
    assert_eq!(constraint_penalty(&one, &one), 0.0);
    let ln2 = std::f64::consts::LN_2;
    assert!((supervised_loss(&[&[0.5, 0.3, 0.2]], &[Some(0)]).unwrap() - ln2).abs() < 1e-12);
}

#[test]
fn penalty_forms_agree() {
    let mut rng = oracles::rng(9);
    for _ in 0..200 {
        let raw: Vec<f64> = (0..14).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
        let norm = |v: &[f64]| -> Vec<f64> {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        };
        let (p, q) = (norm(&raw[..7]), norm(&raw[7..]));
        let expected = oracle_penalty(&p, &q);
        assert!((constraint_penalty(&p, &q) - expected).abs() < 1e-12);
        assert!((constraint_penalty_double_sum(&p, &q) - expected).abs() < 1e-12);
    }
}

fn toy() -> (Vec<Vec<f64>>, Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let arch = oracles::tiny_arch();
    let inputs = oracles::random_inputs(&mut oracles::rng(4), 24, &arch);
    let labeled: Vec<(usize, usize)> = (0..12).map(|i| (i, i % arch.classes)).collect();
    let constraints: Vec<(usize, usize)> = (12..23).map(|i| (i, i + 1)).collect();
    (inputs, labeled, constraints)
}

fn cfg(mode: TrainMode, gamma: f64) -> TrainConfig {
    TrainConfig { mode, gamma, m: 4, n: 6, max_steps: 60, learning_rate: 0.05, checkpoint_every: 20, seed: 3, ..TrainConfig::default() }
}

#[test]
fn semi_without_constraints_is_supervised() {
    let (inputs, labeled, _) = toy();
    let arch = oracles::tiny_arch();
    let data = TrainData { inputs: &inputs, labeled: &labeled, constraints: &[] };
    let sup = train(data, &cfg(TrainMode::Supervised, 1.0), &arch, None, None).unwrap();
    let semi = train(data, &cfg(TrainMode::Semi, 1.0), &arch, None, None).unwrap();
    assert_eq!(sup.params.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), semi.params.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    for (a, b) in sup.history.iter().zip(&semi.history) {
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
    for (a, b) in sup.checkpoints.iter().zip(&semi.checkpoints) {
        assert_eq!(a.params, b.params);
    }
}

#[test]
fn zero_gamma_ignores_constraint_values() {
    let (inputs, labeled, constraints) = toy();
    let arch = oracles::tiny_arch();
    let with = train(TrainData { inputs: &inputs, labeled: &labeled, constraints: &constraints }, &cfg(TrainMode::Semi, 0.0), &arch, None, None).unwrap();
    let mut other = constraints.clone();
    other.reverse();
    other[0] = (0, 23);
    let swapped = train(TrainData { inputs: &inputs, labeled: &labeled, constraints: &other }, &cfg(TrainMode::Semi, 0.0), &arch, None, None).unwrap();
    assert_eq!(with.params, swapped.params);
    assert!(with.history.iter().all(|h| h.l_c == 0.0));
}

#[test]
fn semi_without_labels_is_rejected() {
    let (inputs, _, constraints) = toy();
    let arch = oracles::tiny_arch();
    let data = TrainData { inputs: &inputs, labeled: &[], constraints: &constraints };
    assert!(matches!(train(data, &cfg(TrainMode::Semi, 1.0), &arch, None, None), Err(TrainError::ModeMismatch(_))));
    let init = semiseg_core::classifier::ClassifierParams::init(1, &arch).unwrap();
    assert!(train(data, &cfg(TrainMode::Unsupervised, 1.0), &arch, Some(&init), None).is_ok());
}

#[test]
fn f_measure_cases() {
    assert_eq!(f_measure(1.0, 1.0), 100.0);
    assert_eq!(f_measure(0.5, 0.5), 50.0);
    assert_eq!(f_measure(1.0, 0.0), 0.0);
    assert_eq!(f_measure(0.0, 0.0), 0.0);
}

#[test]
fn macro_f_matches_a_direct_count() {
    let mut rng = oracles::rng(12);
    let truths: Vec<usize> = (0..500).map(|_| rand::Rng::gen_range(&mut rng, 0..7)).collect();
    let preds: Vec<usize> = truths.iter().map(|&t| if rand::Rng::gen_bool(&mut rng, 0.7) { t } else { rand::Rng::gen_range(&mut rng, 0..7) }).collect();
    let report = evaluate(&preds, &truths, 7).unwrap();
    let mut fs = Vec::new();
    for k in 0..7 {
        let tp = preds.iter().zip(&truths).filter(|(p, t)| **p == k && **t == k).count() as f64;
        let pp = preds.iter().filter(|p| **p == k).count() as f64;
        let ap = truths.iter().filter(|t| **t == k).count() as f64;
        let f = 200.0 * tp / (pp + ap);
        assert!((report.per_class[k].f_measure - f).abs() < 1e-9);
        fs.push(f);
    }
    assert!((report.macro_f - fs[..6].iter().sum::<f64>() / 6.0).abs() < 1e-9);
    assert!((report.macro_f_with_unknown - fs.iter().sum::<f64>() / 7.0).abs() < 1e-9);
}

#[test]
fn validity_gate_cases() {
    let cfg = SampleConfig { sigma: 8.0, rho: 30.0, ..SampleConfig::default() };
    assert!(is_valid_counts(300, 5.0, &cfg).unwrap());
    assert!(!is_valid_counts(7, 0.1, &cfg).unwrap());
    assert!(!is_valid_counts(100, 10.0, &cfg).unwrap());
    assert!(!is_valid_counts(150, 5.0, &cfg).unwrap());
    assert!(!is_valid_counts(8, 0.1, &cfg).unwrap());
    assert!(is_valid_counts(9, 0.1, &cfg).unwrap());
    assert!(is_valid_counts(10, 0.0, &cfg).is_err());
}
