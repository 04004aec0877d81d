use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thermo_core::grf::GrfSampler;
use thermo_core::residual::{DiffRoute, PhysicsResidual};
use thermo_core::solver::{FieldSample, Problem};
use thermo_core::{build_grid, pde_loss, BoardGeometry, GrfConfig, MaterialParams, ResidualScales};

fn holed_problem(n: usize) -> Problem {
    let (_, classes) = build_grid(&BoardGeometry::reference_for_grid(n), n, n).unwrap();
    Problem::new(classes, MaterialParams::default()).unwrap()
}

fn labelled(p: &Problem, seed: u64) -> FieldSample {
    let t = GrfSampler::new(*p.grid(), GrfConfig::default()).unwrap().sample(seed);
    p.generate_sample(&t).unwrap()
}

fn scales(p: &Problem, s: &FieldSample) -> ResidualScales {
    ResidualScales::from_temperature(p.material(), s.t.max_abs(), p.grid().h)
}

fn perturbed(s: &FieldSample, rng: &mut ChaCha8Rng, rel: f64) -> FieldSample {
    let mut out = s.clone();
    for f in out.fields_mut().into_iter().skip(1) {
        let m = f.max_abs().max(1e-12);
        for v in f.values_mut() {
            *v += rel * m * rng.random_range(-1.0..1.0);
        }
    }
    out
}

#[test]
fn solver_output_has_negligible_scaled_residual() {
    let p = holed_problem(64);
    for seed in 0..3 {
        let s = labelled(&p, seed);
        let loss = pde_loss(&s, p.material(), p.classes(), &scales(&p, &s)).unwrap();
        assert!(loss <= 1e-12, "seed {seed}: {loss}");
    }
}

#[test]
fn hole_interior_values_do_not_affect_loss() {
    let p = holed_problem(32);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = perturbed(&labelled(&p, 1), &mut rng, 0.1);
    let sc = scales(&p, &s);
    let base = PhysicsResidual::new(&p).loss(&s, &sc);
    let mut junk = s.clone();
    let mask = p.classes().hole_interior_mask();
    for f in junk.fields_mut().into_iter().skip(1) {
        for (v, &inside) in f.values_mut().iter_mut().zip(&mask) {
            if inside {
                *v = 1e6;
            }
        }
    }
    assert_eq!(PhysicsResidual::new(&p).loss(&junk, &sc), base);
}

#[test]
fn kernel_route_gives_identical_loss() {
    let p = holed_problem(32);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = perturbed(&labelled(&p, 2), &mut rng, 0.05);
    let sc = scales(&p, &s);
    let a = PhysicsResidual::new(&p).loss(&s, &sc);
    let b = PhysicsResidual::new(&p).with_route(DiffRoute::Kernel).loss(&s, &sc);
    assert_eq!(a.to_bits(), b.to_bits());
}

fn check_gradient(p: &Problem, s: &FieldSample) {
    let sc = scales(p, s);
    let r = PhysicsResidual::new(p);
    let (loss, grads) = r.loss_and_grad(s, &sc);
    assert!((loss - r.loss(s, &sc)).abs() <= 1e-14 * loss.abs());
    let grads = grads.as_array();
    for (fi, g) in grads.iter().enumerate() {
        let field_scale = s.outputs()[fi].max_abs().max(1e-12);
        let step = 1e-4 * field_scale;
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..p.grid().len() {
            let mut plus = s.clone();
            plus.fields_mut()[fi + 1].values_mut()[k] += step;
            let mut minus = s.clone();
            minus.fields_mut()[fi + 1].values_mut()[k] -= step;
            let fd = (r.loss(&plus, &sc) - r.loss(&minus, &sc)) / (2.0 * step);
            let err = (fd - g[k]).abs() / g[k].abs().max(1e-3 * gmax).max(1e-300);
            assert!(err <= 1e-4, "field {fi} node {k}: fd {fd} vs {}", g[k]);
        }
    }
}

#[test]
fn analytic_gradient_matches_finite_differences_plain() {
    let (grid, classes) = build_grid(&BoardGeometry::plain(0.2), 8, 8).unwrap();
    let p = Problem::new(classes, MaterialParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = GrfSampler::new(grid, GrfConfig::default()).unwrap().sample(3);
    let mut s = FieldSample::zeros(grid);
    s.t = t;
    s.ux.values_mut().iter_mut().for_each(|v| *v = 1e-4 * rng.random_range(-1.0..1.0));
    s.uy.values_mut().iter_mut().for_each(|v| *v = 1e-4 * rng.random_range(-1.0..1.0));
    for f in [&mut s.sxx, &mut s.syy, &mut s.sxy] {
        f.values_mut().iter_mut().for_each(|v| *v = 50.0 * rng.random_range(-1.0..1.0));
    }
    check_gradient(&p, &s);
}

#[test]
fn analytic_gradient_matches_finite_differences_holed() {
    let p = holed_problem(16);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = perturbed(&labelled(&p, 4), &mut rng, 0.2);
    check_gradient(&p, &s);
}
