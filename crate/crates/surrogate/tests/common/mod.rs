#![allow(dead_code)]

use thermo_core::grf::GrfSampler;
use thermo_core::solver::Problem;
use thermo_core::{build_grid, BoardGeometry, FieldSample, GrfConfig, MaterialParams};

/// Solver-labelled GRF samples on an `n x n` grid.
pub fn samples(board: &BoardGeometry, n: usize, count: usize, seed: u64) -> (Problem, Vec<FieldSample>) {
    let (grid, classes) = build_grid(board, n, n).unwrap();
    let problem = Problem::new(classes, MaterialParams::default()).unwrap();
    let sampler = GrfSampler::new(grid, GrfConfig::for_length(board.length)).unwrap();
    let out = (0..count)
        .map(|k| problem.generate_sample(&sampler.sample(seed + k as u64)).unwrap())
        .collect();
    (problem, out)
}
