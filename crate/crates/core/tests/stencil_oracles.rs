use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thermo_core::stencils::{apply_kernel, as_kernel, DiffOperator};
use thermo_core::{build_grid, diff, BoardGeometry, DiffKind, NodeClass, ScalarField};

fn max_interior_error(n: usize, kind: DiffKind) -> f64 {
    let board = BoardGeometry::plain(1.0);
    let (grid, classes) = build_grid(&board, n, n).unwrap();
    let pi = std::f64::consts::PI;
    let f = ScalarField::from_fn(grid, |x, y| (pi * x).sin() * (pi * y).sin());
    let exact = |x: f64, y: f64| match kind {
        DiffKind::Dx => pi * (pi * x).cos() * (pi * y).sin(),
        DiffKind::Dy => pi * (pi * x).sin() * (pi * y).cos(),
        DiffKind::Dxx | DiffKind::Dyy => -pi * pi * (pi * x).sin() * (pi * y).sin(),
        DiffKind::Dxy => pi * pi * (pi * x).cos() * (pi * y).cos(),
    };
    let d = diff(&f, kind, &classes).unwrap();
    let mut err: f64 = 0.0;
    for j in 0..n {
        for i in 0..n {
            let k = grid.index(i, j);
            err = err.max((d.values()[k] - exact(grid.x(i), grid.y(j))).abs());
        }
    }
    err
}

#[test]
fn manufactured_solution_converges_at_second_order() {
    for kind in DiffKind::ALL {
        let sizes = [33, 65, 129, 257];
        let errs: Vec<f64> = sizes.iter().map(|&n| max_interior_error(n, kind)).collect();
        // least-squares slope of log(err) against log(h)
        let pts: Vec<(f64, f64)> = sizes
            .iter()
            .zip(&errs)
            .map(|(&n, &e)| ((1.0 / (n - 1) as f64).ln(), e.ln()))
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope - 2.0).abs() <= 0.2, "{kind:?}: slope {slope}, errors {errs:?}");
    }
}

#[test]
fn linear_fields_are_exact_on_holed_board() {
    let (grid, classes) = build_grid(&BoardGeometry::reference_for_grid(40), 40, 40).unwrap();
    let f = ScalarField::from_fn(grid, |x, y| 3.0 - 2.0 * x + 7.5 * y);
    let dx = diff(&f, DiffKind::Dx, &classes).unwrap();
    let dy = diff(&f, DiffKind::Dy, &classes).unwrap();
    for k in 0..grid.len() {
        if classes.class(k).is_hole_interior() {
            assert_eq!((dx.values()[k], dy.values()[k]), (0.0, 0.0));
        } else {
            assert!((dx.values()[k] + 2.0).abs() <= 1e-12 * 2.0, "dx at {k}");
            assert!((dy.values()[k] - 7.5).abs() <= 1e-12 * 7.5, "dy at {k}");
        }
    }
}

#[test]
fn kernel_route_is_bitwise_equal_on_random_fields() {
    let (grid, classes) = build_grid(&BoardGeometry::reference_for_grid(32), 32, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ops: Vec<DiffOperator> = DiffKind::ALL
        .iter()
        .map(|&k| DiffOperator::new(k, &classes).unwrap())
        .collect();
    for _ in 0..100 {
        let values: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = ScalarField::new(grid, values).unwrap();
        for (op, &kind) in ops.iter().zip(&DiffKind::ALL) {
            let a = op.apply_field(&f);
            let b = apply_kernel(&f, &as_kernel(kind), &classes).unwrap();
            assert!(a
                .values()
                .iter()
                .zip(b.values())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quadratics_exact_at_interior(c in prop::array::uniform6(-5.0f64..5.0)) {
        let (grid, classes) = build_grid(&BoardGeometry::reference_for_grid(32), 32, 32).unwrap();
        let f = ScalarField::from_fn(grid, |x, y| {
            c[0] + c[1] * x + c[2] * y + c[3] * x * x + c[4] * x * y + c[5] * y * y
        });
        let expect = [
            (DiffKind::Dxx, 2.0 * c[3]),
            (DiffKind::Dyy, 2.0 * c[5]),
            (DiffKind::Dxy, c[4]),
        ];
        for (kind, want) in expect {
            let d = diff(&f, kind, &classes).unwrap();
            for k in 0..grid.len() {
                if classes.class(k) == NodeClass::Interior {
                    // cancellation: rounding error grows like eps |f| / h^2
                    let tol = 64.0 * f64::EPSILON * f.max_abs() / (grid.h * grid.h) + 1e-12 * want.abs();
                    prop_assert!((d.values()[k] - want).abs() <= tol,
                        "{:?} at {}: {} vs {}", kind, k, d.values()[k], want);
                }
            }
        }
    }

    #[test]
    fn operators_are_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (grid, classes) = build_grid(&BoardGeometry::reference_for_grid(24), 24, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let combo: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        for kind in DiffKind::ALL {
            let op = DiffOperator::new(kind, &classes).unwrap();
            let (df, dg, dc) = (op.apply(&f), op.apply(&g), op.apply(&combo));
            let tol = 1e-12 * 16.0 * (a.abs() + b.abs() + 1.0) / op.denom();
            for k in 0..grid.len() {
                let want = a * df[k] + b * dg[k];
                prop_assert!((dc[k] - want).abs() <= tol);
            }
        }
    }
}
