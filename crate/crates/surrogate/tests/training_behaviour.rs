mod common;

use thermo_core::{BoardGeometry, FieldSample};
use thermo_surrogate::checkpoint;
use thermo_surrogate::optim::OptimizerKind;
use thermo_surrogate::training::{metrics_from_predictions, uncertainty_terms};
use thermo_surrogate::{evaluate, train, Dataset, Error, ModelConfig, ModelKind, TrainConfig};

fn config(physics: bool, max_steps: Option<usize>) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 2000,
        optimizer: OptimizerKind::adam(3e-3),
        physics,
        balance: None,
        seed: 3,
        max_steps,
        val_every: 0,
    }
}

#[test]
fn log_variances_converge_to_half_log_losses() {
    let losses = [2.0, 8.0, 0.5];
    let mut s = [0.0; 3];
    for _ in 0..200 {
        let (_, _, ds) = uncertainty_terms(&losses, None, &s);
        s.iter_mut().zip(&ds).for_each(|(s, g)| *s -= 0.5 * g);
    }
    for (s, l) in s.iter().zip(losses) {
        assert!((s - (l / 2.0f64).ln()).abs() <= 1e-3, "s = {s}, want ln({l}/2)");
    }
}

#[test]
fn mta_unet_overfits_four_samples() {
    let (problem, samples) = common::samples(&BoardGeometry::reference_for_grid(32), 32, 4, 1);
    let ds = Dataset::new(&problem, &samples).unwrap();
    let cfg = TrainConfig {
        epochs: 400,
        physics: false,
        ..config(false, None)
    };
    let (_, h) = train(&ds, None, ModelKind::MtaUnet, ModelConfig::new(3, 8, 0), &cfg).unwrap();
    let first: f64 = h.first_step_data[0].iter().sum();
    let last: f64 = h.epochs.last().unwrap().data.iter().sum();
    assert!(last < 0.1 * first, "data loss {first} -> {last}");
}

#[test]
fn training_is_deterministic_given_seed() {
    let (problem, samples) = common::samples(&BoardGeometry::reference_for_grid(16), 16, 6, 2);
    let ds = Dataset::new(&problem, &samples).unwrap();
    let run = || train(&ds, None, ModelKind::MtaUnet, ModelConfig::new(2, 4, 1), &config(true, Some(6))).unwrap();
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(a.nets[0].params(), b.nets[0].params());
    assert_eq!(a.nets[0].running(), b.nets[0].running());
}

#[test]
fn first_step_data_losses_ignore_the_physics_switch() {
    let (problem, samples) = common::samples(&BoardGeometry::reference_for_grid(16), 16, 4, 5);
    let ds = Dataset::new(&problem, &samples).unwrap();
    let cfg_on = config(true, Some(1));
    let cfg_off = config(false, Some(1));
    let (_, on) = train(&ds, None, ModelKind::MtaUnet, ModelConfig::new(2, 4, 1), &cfg_on).unwrap();
    let (_, off) = train(&ds, None, ModelKind::MtaUnet, ModelConfig::new(2, 4, 1), &cfg_off).unwrap();
    assert_eq!(on.first_step_data, off.first_step_data);
    assert!(on.epochs[0].pde.unwrap() > 0.0);
    assert!(off.epochs[0].pde.is_none());
}

#[test]
fn single_task_networks_reject_the_physics_loss() {
    let (problem, samples) = common::samples(&BoardGeometry::reference_for_grid(16), 16, 2, 5);
    let ds = Dataset::new(&problem, &samples).unwrap();
    let err = train(&ds, None, ModelKind::StlUnet, ModelConfig::new(2, 4, 1), &config(true, Some(1))).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn metrics_ignore_hole_interior_predictions() {
    let (problem, samples) = common::samples(&BoardGeometry::reference_for_grid(24), 24, 3, 9);
    let jitter = |s: &FieldSample, k: f64| {
        let mut p = s.clone();
        for f in p.fields_mut().into_iter().skip(1) {
            f.values_mut().iter_mut().enumerate().for_each(|(i, v)| *v *= 1.0 + k * (i as f64).sin());
        }
        p
    };
    let preds: Vec<FieldSample> = samples.iter().map(|s| jitter(s, 0.01)).collect();
    let mut wild = preds.clone();
    let interior = problem.classes().hole_interior_mask();
    assert!(interior.iter().any(|&m| m));
    for p in &mut wild {
        for f in p.fields_mut().into_iter().skip(1) {
            for (v, &m) in f.values_mut().iter_mut().zip(&interior) {
                if m {
                    *v = 1e9;
                }
            }
        }
    }
    let a = metrics_from_predictions(problem.classes(), &samples, &preds).unwrap();
    let b = metrics_from_predictions(problem.classes(), &samples, &wild).unwrap();
    assert_eq!(a, b);
    assert!(a.fields.iter().all(|f| f.mae > 0.0 && f.mre > 0.0));
    let exact = metrics_from_predictions(problem.classes(), &samples, &samples).unwrap();
    assert!(exact.fields.iter().all(|f| f.mae == 0.0 && f.mre == 0.0));
}

#[test]
fn checkpoint_round_trip_keeps_evaluation_bitwise() {
    let (problem, samples) = common::samples(&BoardGeometry::reference_for_grid(16), 16, 6, 4);
    let (train_set, test_set) = samples.split_at(4);
    let ds = Dataset::new(&problem, train_set).unwrap();
    let test = Dataset::new(&problem, test_set).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::MtaUnet, ModelKind::StlUnet] {
        let (model, _) = train(&ds, None, kind, ModelConfig::new(2, 4, 1), &config(false, Some(3))).unwrap();
        let path = dir.path().join("model.mtaw");
        checkpoint::save(&path, &model).unwrap();
        let back = checkpoint::load(&path).unwrap();
        assert_eq!(evaluate(&model, &test).unwrap(), evaluate(&back, &test).unwrap());
        let (p, q) = (model.predict(&problem, test_set).unwrap(), back.predict(&problem, test_set).unwrap());
        for (a, b) in p.iter().zip(&q) {
            for (x, y) in a.fields().iter().zip(b.fields()) {
                assert!(x.values().iter().zip(y.values()).all(|(u, v)| u.to_bits() == v.to_bits()));
            }
        }
    }
}
