use nalgebra::{DMatrix, DVector};
use thermo_core::grf::GrfSampler;
use thermo_core::solver::{solve, solve_vector, solve_with, Pin, Problem, SolveOptions, SolverMethod};
use thermo_core::{build_grid, BoardGeometry, GrfConfig, MaterialParams, ScalarField};

fn holed_problem(n: usize) -> Problem {
    let (_, classes) = build_grid(&BoardGeometry::reference_for_grid(n), n, n).unwrap();
    Problem::new(classes, MaterialParams::default()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[test]
fn banded_solution_matches_dense_lu() {
    let p = holed_problem(20);
    let t = GrfSampler::new(*p.grid(), GrfConfig::default()).unwrap().sample(5);
    let system = p.assemble(&t).unwrap();
    let n = system.n();
    let dense = DMatrix::from_row_slice(n, n, &system.to_dense());
    let x_dense = dense.lu().solve(&DVector::from_column_slice(system.rhs())).unwrap();
    let x = solve_vector(&system, &SolveOptions::new(SolverMethod::BandedLu, 1e-12)).unwrap();
    let scale = max_abs(x_dense.as_slice());
    assert!(max_abs_diff(&x, x_dense.as_slice()) <= 1e-10 * scale);
}

#[test]
fn iterative_and_direct_agree_at_64() {
    let p = holed_problem(64);
    let t = GrfSampler::new(*p.grid(), GrfConfig::default()).unwrap().sample(9);
    let system = p.assemble(&t).unwrap();
    let direct = solve_vector(&system, &SolveOptions::new(SolverMethod::BandedLu, 1e-12)).unwrap();
    let gmres = solve_vector(&system, &SolveOptions::new(SolverMethod::GmresIlu, 1e-12)).unwrap();
    assert!(max_abs_diff(&direct, &gmres) <= 1e-8 * max_abs(&direct));
}

#[test]
fn displacement_is_linear_in_temperature() {
    let p = holed_problem(32);
    let sampler = GrfSampler::new(*p.grid(), GrfConfig::default()).unwrap();
    let (t1, t2) = (sampler.sample(1), sampler.sample(2));
    let (a, b) = (0.7, -1.3);
    let combo = ScalarField::new(
        *p.grid(),
        t1.values().iter().zip(t2.values()).map(|(x, y)| a * x + b * y).collect(),
    )
    .unwrap();
    let run = |t: &ScalarField| solve(&p.assemble(t).unwrap(), 1e-12).unwrap();
    let (u1, v1) = run(&t1);
    let (u2, v2) = run(&t2);
    let (uc, vc) = run(&combo);
    let lin = |f1: &ScalarField, f2: &ScalarField| -> Vec<f64> {
        f1.values().iter().zip(f2.values()).map(|(x, y)| a * x + b * y).collect()
    };
    let (ul, vl) = (lin(&u1, &u2), lin(&v1, &v2));
    assert!(max_abs_diff(uc.values(), &ul) <= 1e-10 * max_abs(&ul));
    assert!(max_abs_diff(vc.values(), &vl) <= 1e-10 * max_abs(&vl));
}

#[test]
fn mirror_symmetric_temperature_gives_mirrored_displacement() {
    let n = 40;
    let p = holed_problem(n);
    let g = *p.grid();
    let t = ScalarField::from_fn(g, |x, y| {
        let xm = x - 0.1;
        50.0 + 40.0 * (-(xm * xm) / 0.002).exp() + 30.0 * y
    });
    let s = p.generate_sample(&t).unwrap();
    let scale = s.ux.max_abs();
    for j in 0..n {
        for i in 0..n {
            let (k, km) = (g.index(i, j), g.index(n - 1 - i, j));
            assert!((s.ux.values()[k] + s.ux.values()[km]).abs() <= 1e-9 * scale);
            assert!((s.uy.values()[k] - s.uy.values()[km]).abs() <= 1e-9 * scale);
            assert!((s.sxx.values()[k] - s.sxx.values()[km]).abs() <= 1e-9 * s.sxx.max_abs());
        }
    }
}

#[test]
fn free_expansion_of_plain_board() {
    let n = 64;
    let (grid, classes) = build_grid(&BoardGeometry::plain(0.2), n, n).unwrap();
    let mat = MaterialParams::default();
    let p = Problem::new(classes, mat).unwrap();
    let t = ScalarField::constant(grid, 100.0);
    let system = p.assemble_pinned(&t, &Pin::rigid_modes(&grid)).unwrap();
    let (ux, uy) = solve_with(&system, &SolveOptions::new(SolverMethod::BandedLu, 1e-12)).unwrap();
    let (xc, yc) = (grid.x(n / 2), grid.y(n / 2));
    for j in 0..n {
        for i in 0..n {
            let k = grid.index(i, j);
            assert!((ux.values()[k] - mat.alpha * 100.0 * (grid.x(i) - xc)).abs() <= 1e-8);
            assert!((uy.values()[k] - mat.alpha * 100.0 * (grid.y(j) - yc)).abs() <= 1e-8);
        }
    }
    let (sxx, syy, sxy) = p.stresses(&ux, &uy, &t);
    let scale = mat.youngs * mat.alpha * 100.0;
    for f in [sxx, syy, sxy] {
        assert!(f.max_abs() / scale <= 1e-6);
    }
}
