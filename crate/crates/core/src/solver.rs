//! Finite-difference plane-stress thermoelastic solver.
//!
//! Unknowns are interleaved per node (`u_x` at `2k`, `u_y` at `2k + 1`).
//! Interior rows carry the displacement-form equilibrium equations, outer
//! edge rows the traction-free conditions with the node's direction cosines,
//! and hole rows clamp both components to zero. Interior rows are scaled by
//! `h^2` and edge rows by `h` so every row has O(1) coefficients.

use serde::{Deserialize, Serialize};

use crate::geometry::{GridSpec, MaterialParams, NodeClass, NodeClassField};
use crate::stencils::{DiffOperator, ScalarField, StencilSet};
use crate::{Error, Result};

/// One ground-truth record: the temperature change plus the five responses.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub t: ScalarField,
    pub ux: ScalarField,
    pub uy: ScalarField,
    pub sxx: ScalarField,
    pub syy: ScalarField,
    pub sxy: ScalarField,
}

/// Field names in storage order.
pub const FIELD_NAMES: [&str; 6] = ["T", "ux", "uy", "sxx", "syy", "sxy"];
/// Output field names in storage order.
pub const OUTPUT_NAMES: [&str; 5] = ["ux", "uy", "sxx", "syy", "sxy"];

impl FieldSample {
    pub fn zeros(grid: GridSpec) -> Self {
        let z = ScalarField::zeros(grid);
        Self {
            t: z.clone(),
            ux: z.clone(),
            uy: z.clone(),
            sxx: z.clone(),
            syy: z.clone(),
            sxy: z,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        self.t.grid()
    }

    /// `[T, ux, uy, sxx, syy, sxy]`.
    pub fn fields(&self) -> [&ScalarField; 6] {
        [&self.t, &self.ux, &self.uy, &self.sxx, &self.syy, &self.sxy]
    }

    pub fn fields_mut(&mut self) -> [&mut ScalarField; 6] {
        [
            &mut self.t,
            &mut self.ux,
            &mut self.uy,
            &mut self.sxx,
            &mut self.syy,
            &mut self.sxy,
        ]
    }

    pub fn outputs(&self) -> [&ScalarField; 5] {
        [&self.ux, &self.uy, &self.sxx, &self.syy, &self.sxy]
    }

    pub fn from_fields(fields: [ScalarField; 6]) -> Result<Self> {
        let grid = *fields[0].grid();
        if fields.iter().any(|f| *f.grid() != grid) {
            return Err(Error::Shape("sample fields live on different grids".into()));
        }
        let [t, ux, uy, sxx, syy, sxy] = fields;
        Ok(Self {
            t,
            ux,
            uy,
            sxx,
            syy,
            sxy,
        })
    }

    /// Zeroes the five outputs at hole-interior nodes. The temperature stays.
    pub fn zero_hole_interior(&mut self, classes: &NodeClassField) {
        for (k, c) in classes.classes().iter().enumerate() {
            if c.is_hole_interior() {
                for f in &mut self.fields_mut()[1..] {
                    f.values_mut()[k] = 0.0;
                }
            }
        }
    }
}

/// Which displacement component a pin fixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Ux,
    Uy,
}

/// Replaces the equation of `component` at node `(i, j)` with `u = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pin {
    pub i: usize,
    pub j: usize,
    pub component: Component,
}

impl Pin {
    /// Pins removing the three rigid modes of an unclamped board: both
    /// components at the center node and `u_x` one node above it.
    pub fn rigid_modes(grid: &GridSpec) -> [Pin; 3] {
        let (i, j) = (grid.nx / 2, grid.ny / 2);
        [
            Pin { i, j, component: Component::Ux },
            Pin { i, j, component: Component::Uy },
            Pin { i, j: j + 1, component: Component::Ux },
        ]
    }
}

/// Sparse square system in compressed rows.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    grid: GridSpec,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    rhs: Vec<f64>,
}

impl LinearSystem {
    pub fn n(&self) -> usize {
        self.rhs.len()
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().cloned().zip(self.vals[span].iter().cloned())
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    /// `||A x - b|| / ||b||`, or `||A x||` when `b = 0`.
    pub fn relative_residual(&self, x: &[f64]) -> f64 {
        let ax = self.matvec(x);
        let r = norm(&ax.iter().zip(&self.rhs).map(|(a, b)| a - b).collect::<Vec<_>>());
        let b = norm(&self.rhs);
        if b > 0.0 {
            r / b
        } else {
            r
        }
    }

    /// Dense row-major copy, for small verification problems.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n();
        let mut a = vec![0.0; n * n];
        for r in 0..n {
            for (c, v) in self.row(r) {
                a[r * n + c] += v;
            }
        }
        a
    }

    fn bandwidths(&self) -> (usize, usize) {
        let (mut kl, mut ku) = (0, 0);
        for r in 0..self.n() {
            for (c, _) in self.row(r) {
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Grid, classification, material, and stencils of one board.
#[derive(Debug, Clone)]
pub struct Problem {
    classes: NodeClassField,
    mat: MaterialParams,
    ops: StencilSet,
}

impl Problem {
    pub fn new(classes: NodeClassField, mat: MaterialParams) -> Result<Self> {
        mat.validate()?;
        let ops = StencilSet::new(&classes)?;
        Ok(Self { classes, mat, ops })
    }

    pub fn grid(&self) -> &GridSpec {
        self.classes.grid()
    }

    pub fn classes(&self) -> &NodeClassField {
        &self.classes
    }

    pub fn material(&self) -> &MaterialParams {
        &self.mat
    }

    pub fn stencils(&self) -> &StencilSet {
        &self.ops
    }

    pub fn assemble(&self, t: &ScalarField) -> Result<LinearSystem> {
        self.assemble_pinned(t, &[])
    }

    pub fn assemble_pinned(&self, t: &ScalarField, pins: &[Pin]) -> Result<LinearSystem> {
        let grid = *self.grid();
        if t.grid() != &grid {
            return Err(Error::Shape("temperature grid differs from problem grid".into()));
        }
        let mu = self.mat.poisson;
        let thermal = (1.0 + mu) * self.mat.alpha;
        let shear = (1.0 - mu) / 2.0;
        let mixed = (1.0 + mu) / 2.0;
        let h = grid.h;
        let ops = &self.ops;
        let dt_dx = ops.dx.apply(t.values());
        let dt_dy = ops.dy.apply(t.values());

        let n = 2 * grid.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut rhs = Vec::with_capacity(n);
        row_ptr.push(0);
        let mut row: Vec<(usize, f64)> = Vec::new();

        let pinned = |k: usize, comp: Component| {
            let (i, j) = grid.coords(k);
            pins.iter().any(|p| p.i == i && p.j == j && p.component == comp)
        };
        let push = |op: &DiffOperator, k: usize, scale: f64, offset: usize, row: &mut Vec<(usize, f64)>| {
            for (c, w) in op.row(k) {
                row.push((2 * c + offset, scale * w));
            }
        };

        for k in 0..grid.len() {
            for comp in [Component::Ux, Component::Uy] {
                row.clear();
                let b;
                if pinned(k, comp) {
                    row.push((2 * k + comp as usize, 1.0));
                    b = 0.0;
                } else {
                    match (self.classes.class(k), comp) {
                        (NodeClass::Interior, Component::Ux) => {
                            let s = h * h;
                            push(&ops.dxx, k, s, 0, &mut row);
                            push(&ops.dyy, k, s * shear, 0, &mut row);
                            push(&ops.dxy, k, s * mixed, 1, &mut row);
                            b = s * thermal * dt_dx[k];
                        }
                        (NodeClass::Interior, Component::Uy) => {
                            let s = h * h;
                            push(&ops.dyy, k, s, 1, &mut row);
                            push(&ops.dxx, k, s * shear, 1, &mut row);
                            push(&ops.dxy, k, s * mixed, 0, &mut row);
                            b = s * thermal * dt_dy[k];
                        }
                        (NodeClass::OuterBoundary { l, m }, Component::Ux) => {
                            let s = h;
                            push(&ops.dx, k, s * l, 0, &mut row);
                            push(&ops.dy, k, s * l * mu, 1, &mut row);
                            push(&ops.dy, k, s * m * shear, 0, &mut row);
                            push(&ops.dx, k, s * m * shear, 1, &mut row);
                            b = s * l * thermal * t.values()[k];
                        }
                        (NodeClass::OuterBoundary { l, m }, Component::Uy) => {
                            let s = h;
                            push(&ops.dy, k, s * m, 1, &mut row);
                            push(&ops.dx, k, s * m * mu, 0, &mut row);
                            push(&ops.dx, k, s * l * shear, 1, &mut row);
                            push(&ops.dy, k, s * l * shear, 0, &mut row);
                            b = s * m * thermal * t.values()[k];
                        }
                        (NodeClass::HoleBoundary | NodeClass::HoleInterior, c) => {
                            row.push((2 * k + c as usize, 1.0));
                            b = 0.0;
                        }
                    }
                }
                row.sort_by_key(|e| e.0);
                let start = cols.len();
                for &(c, v) in row.iter() {
                    if cols.len() > start && *cols.last().unwrap() == c {
                        *vals.last_mut().unwrap() += v;
                    } else {
                        cols.push(c);
                        vals.push(v);
                    }
                }
                row_ptr.push(cols.len());
                rhs.push(b);
            }
        }
        Ok(LinearSystem {
            grid,
            row_ptr,
            cols,
            vals,
            rhs,
        })
    }

    /// Stresses from displacements and temperature; zero inside holes.
    pub fn stresses(
        &self,
        ux: &ScalarField,
        uy: &ScalarField,
        t: &ScalarField,
    ) -> (ScalarField, ScalarField, ScalarField) {
        let grid = *self.grid();
        let MaterialParams {
            youngs: e,
            poisson: mu,
            alpha,
            ..
        } = self.mat;
        let dux_dx = self.ops.dx.apply(ux.values());
        let dux_dy = self.ops.dy.apply(ux.values());
        let duy_dx = self.ops.dx.apply(uy.values());
        let duy_dy = self.ops.dy.apply(uy.values());
        let normal = e / (1.0 - mu * mu);
        let thermal = e * alpha / (1.0 - mu);
        let shear = e / (2.0 * (1.0 + mu));
        let mut sxx = vec![0.0; grid.len()];
        let mut syy = vec![0.0; grid.len()];
        let mut sxy = vec![0.0; grid.len()];
        for k in 0..grid.len() {
            if self.classes.class(k).is_hole_interior() {
                continue;
            }
            let tk = t.values()[k];
            sxx[k] = normal * (dux_dx[k] + mu * duy_dy[k]) - thermal * tk;
            syy[k] = normal * (duy_dy[k] + mu * dux_dx[k]) - thermal * tk;
            sxy[k] = shear * (duy_dx[k] + dux_dy[k]);
        }
        let f = |v| ScalarField::new(grid, v).expect("grid-sized");
        (f(sxx), f(syy), f(sxy))
    }

    /// Assemble, solve to `1e-10`, and evaluate stresses for one temperature
    /// field. Boards without clamped holes get their rigid modes pinned.
    pub fn generate_sample(&self, t: &ScalarField) -> Result<FieldSample> {
        let system = if self.classes.counts().2 == 0 {
            self.assemble_pinned(t, &Pin::rigid_modes(self.grid()))?
        } else {
            self.assemble(t)?
        };
        let (ux, uy) = solve(&system, GENERATION_TOL)?;
        let (sxx, syy, sxy) = self.stresses(&ux, &uy, t);
        let mut sample = FieldSample {
            t: t.clone(),
            ux,
            uy,
            sxx,
            syy,
            sxy,
        };
        sample.zero_hole_interior(&self.classes);
        Ok(sample)
    }
}

/// Relative residual demanded of ground-truth solves.
pub const GENERATION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverMethod {
    /// Banded LU with partial pivoting.
    BandedLu,
    /// Restarted GMRES, right-preconditioned by ILU(0).
    GmresIlu,
    /// Restarted GMRES, right-preconditioned by the diagonal.
    GmresJacobi,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub method: SolverMethod,
    pub tol: f64,
    pub restart: usize,
    pub max_iterations: usize,
}

impl SolveOptions {
    pub fn new(method: SolverMethod, tol: f64) -> Self {
        Self {
            method,
            tol,
            restart: 200,
            max_iterations: 20_000,
        }
    }
}

/// Solves with the banded direct method and splits the result into fields.
pub fn solve(system: &LinearSystem, tol: f64) -> Result<(ScalarField, ScalarField)> {
    solve_with(system, &SolveOptions::new(SolverMethod::BandedLu, tol))
}

pub fn solve_with(system: &LinearSystem, opts: &SolveOptions) -> Result<(ScalarField, ScalarField)> {
    if !(opts.tol > 0.0 && opts.tol <= 1e-6) {
        return Err(Error::Config(format!(
            "solver tolerance must lie in (0, 1e-6], got {}",
            opts.tol
        )));
    }
    let x = solve_vector(system, opts)?;
    split(system.grid(), &x)
}

fn split(grid: &GridSpec, x: &[f64]) -> Result<(ScalarField, ScalarField)> {
    let ux = x.iter().step_by(2).cloned().collect();
    let uy = x.iter().skip(1).step_by(2).cloned().collect();
    Ok((ScalarField::new(*grid, ux)?, ScalarField::new(*grid, uy)?))
}

/// Raw solution vector in interleaved unknown order.
pub fn solve_vector(system: &LinearSystem, opts: &SolveOptions) -> Result<Vec<f64>> {
    let n = system.n();
    if system.rhs.iter().all(|&b| b == 0.0) {
        return Ok(vec![0.0; n]);
    }
    match opts.method {
        SolverMethod::BandedLu => {
            let lu = BandedLu::factor(system)?;
            let mut x = lu.solve(&system.rhs);
            let b_norm = norm(&system.rhs);
            let mut res = system.relative_residual(&x);
            for _ in 0..3 {
                if res <= opts.tol {
                    break;
                }
                let ax = system.matvec(&x);
                let r: Vec<f64> = system.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
                let dx = lu.solve(&r);
                for (xi, d) in x.iter_mut().zip(&dx) {
                    *xi += d;
                }
                res = norm(
                    &system
                        .matvec(&x)
                        .iter()
                        .zip(&system.rhs)
                        .map(|(a, b)| a - b)
                        .collect::<Vec<_>>(),
                ) / b_norm;
            }
            if res > opts.tol {
                return Err(Error::NotConverged {
                    iterations: 0,
                    residual: res,
                });
            }
            Ok(x)
        }
        SolverMethod::GmresIlu => {
            let pc = Ilu0::new(system)?;
            gmres(system, opts, |r| pc.apply(r))
        }
        SolverMethod::GmresJacobi => {
            let inv_diag = diagonal(system)?
                .into_iter()
                .map(|d| 1.0 / d)
                .collect::<Vec<_>>();
            gmres(system, opts, |r| r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect())
        }
    }
}

fn diagonal(system: &LinearSystem) -> Result<Vec<f64>> {
    (0..system.n())
        .map(|r| {
            let d: f64 = system.row(r).filter(|&(c, _)| c == r).map(|(_, v)| v).sum();
            if d == 0.0 {
                Err(Error::Singular { row: r, pivot: 0.0 })
            } else {
                Ok(d)
            }
        })
        .collect()
}

/// Band LU with row partial pivoting. Row `r` stores columns
/// `r - kl ..= r + kl + ku` to leave room for pivoting fill.
struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    ab: Vec<f64>,
    piv: Vec<usize>,
}

impl BandedLu {
    #[inline]
    fn at(&self, r: usize, c: usize) -> usize {
        r * self.width + (c + self.kl - r)
    }

    fn factor(system: &LinearSystem) -> Result<Self> {
        let n = system.n();
        let (kl, ku) = system.bandwidths();
        let width = 2 * kl + ku + 1;
        let mut lu = Self {
            n,
            kl,
            ku,
            width,
            ab: vec![0.0; n * width],
            piv: vec![0; n],
        };
        let mut amax: f64 = 0.0;
        for r in 0..n {
            for (c, v) in system.row(r) {
                let idx = lu.at(r, c);
                lu.ab[idx] += v;
                amax = amax.max(v.abs());
            }
        }
        let threshold = n as f64 * f64::EPSILON * amax;
        let reach = kl + ku;
        for c in 0..n {
            let last = (c + kl).min(n - 1);
            let mut p = c;
            let mut best = lu.ab[lu.at(c, c)].abs();
            for r in c + 1..=last {
                let v = lu.ab[lu.at(r, c)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best <= threshold {
                return Err(Error::Singular { row: c, pivot: best });
            }
            lu.piv[c] = p;
            let right = (c + reach).min(n - 1);
            if p != c {
                for cc in c..=right {
                    let (a, b) = (lu.at(c, cc), lu.at(p, cc));
                    lu.ab.swap(a, b);
                }
            }
            let pivot = lu.ab[lu.at(c, c)];
            let prow = lu.at(c, c);
            for r in c + 1..=last {
                let idx = lu.at(r, c);
                let factor = lu.ab[idx] / pivot;
                lu.ab[idx] = factor;
                if factor == 0.0 {
                    continue;
                }
                let base = lu.at(r, c);
                let len = right - c;
                let (head, tail) = lu.ab.split_at_mut(base);
                let src = &head[prow + 1..prow + 1 + len];
                for (dst, s) in tail[1..1 + len].iter_mut().zip(src) {
                    *dst -= factor * s;
                }
            }
        }
        Ok(lu)
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for c in 0..n {
            let p = self.piv[c];
            if p != c {
                x.swap(c, p);
            }
            let xc = x[c];
            if xc != 0.0 {
                for r in c + 1..=(c + self.kl).min(n - 1) {
                    x[r] -= self.ab[self.at(r, c)] * xc;
                }
            }
        }
        let reach = self.kl + self.ku;
        for r in (0..n).rev() {
            let mut acc = x[r];
            for c in r + 1..=(r + reach).min(n - 1) {
                acc -= self.ab[self.at(r, c)] * x[c];
            }
            x[r] = acc / self.ab[self.at(r, r)];
        }
        x
    }
}

/// Incomplete LU with the sparsity of `A`.
struct Ilu0 {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<usize>,
}

impl Ilu0 {
    fn new(system: &LinearSystem) -> Result<Self> {
        let n = system.n();
        let row_ptr = system.row_ptr.clone();
        let cols = system.cols.clone();
        let mut vals = system.vals.clone();
        let mut diag = vec![usize::MAX; n];
        for r in 0..n {
            for idx in row_ptr[r]..row_ptr[r + 1] {
                if cols[idx] == r {
                    diag[r] = idx;
                }
            }
            if diag[r] == usize::MAX {
                return Err(Error::Singular { row: r, pivot: 0.0 });
            }
        }
        let mut pos = vec![usize::MAX; n];
        for r in 0..n {
            for idx in row_ptr[r]..row_ptr[r + 1] {
                pos[cols[idx]] = idx;
            }
            for idx in row_ptr[r]..row_ptr[r + 1] {
                let k = cols[idx];
                if k >= r {
                    break;
                }
                let piv = vals[diag[k]];
                if piv == 0.0 {
                    return Err(Error::Singular { row: k, pivot: 0.0 });
                }
                let factor = vals[idx] / piv;
                vals[idx] = factor;
                for kidx in diag[k] + 1..row_ptr[k + 1] {
                    let p = pos[cols[kidx]];
                    if p != usize::MAX {
                        vals[p] -= factor * vals[kidx];
                    }
                }
            }
            for idx in row_ptr[r]..row_ptr[r + 1] {
                pos[cols[idx]] = usize::MAX;
            }
        }
        Ok(Self {
            row_ptr,
            cols,
            vals,
            diag,
        })
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let n = r.len();
        let mut y = r.to_vec();
        for i in 0..n {
            let mut acc = y[i];
            for idx in self.row_ptr[i]..self.diag[i] {
                acc -= self.vals[idx] * y[self.cols[idx]];
            }
            y[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = y[i];
            for idx in self.diag[i] + 1..self.row_ptr[i + 1] {
                acc -= self.vals[idx] * y[self.cols[idx]];
            }
            y[i] = acc / self.vals[self.diag[i]];
        }
        y
    }
}

/// Right-preconditioned restarted GMRES with modified Gram-Schmidt.
fn gmres(
    system: &LinearSystem,
    opts: &SolveOptions,
    precond: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let n = system.n();
    let m = opts.restart.max(1);
    let b_norm = norm(&system.rhs);
    let mut x = vec![0.0; n];
    let mut iterations = 0;
    let mut res = 1.0;
    while iterations < opts.max_iterations {
        let ax = system.matvec(&x);
        let r: Vec<f64> = system.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let beta = norm(&r);
        res = beta / b_norm;
        if res <= opts.tol {
            return Ok(x);
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|e| e / beta).collect()];
        let mut hess = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut steps = 0;
        for j in 0..m {
            let z = precond(&v[j]);
            let mut w = system.matvec(&z);
            for i in 0..=j {
                let hij: f64 = w.iter().zip(&v[i]).map(|(a, b)| a * b).sum();
                hess[i][j] = hij;
                for (wk, vk) in w.iter_mut().zip(&v[i]) {
                    *wk -= hij * vk;
                }
            }
            let wn = norm(&w);
            hess[j + 1][j] = wn;
            for i in 0..j {
                let t = cs[i] * hess[i][j] + sn[i] * hess[i + 1][j];
                hess[i + 1][j] = -sn[i] * hess[i][j] + cs[i] * hess[i + 1][j];
                hess[i][j] = t;
            }
            let d = hess[j][j].hypot(hess[j + 1][j]);
            cs[j] = hess[j][j] / d;
            sn[j] = hess[j + 1][j] / d;
            hess[j][j] = d;
            hess[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            steps = j + 1;
            iterations += 1;
            res = g[j + 1].abs() / b_norm;
            if res <= 0.1 * opts.tol || wn == 0.0 || iterations >= opts.max_iterations {
                break;
            }
            v.push(w.iter().map(|e| e / wn).collect());
        }
        let mut y = vec![0.0; steps];
        for i in (0..steps).rev() {
            let mut acc = g[i];
            for k in i + 1..steps {
                acc -= hess[i][k] * y[k];
            }
            y[i] = acc / hess[i][i];
        }
        let mut update = vec![0.0; n];
        for (yi, vi) in y.iter().zip(&v) {
            for (u, e) in update.iter_mut().zip(vi) {
                *u += yi * e;
            }
        }
        let dz = precond(&update);
        for (xi, d) in x.iter_mut().zip(&dz) {
            *xi += d;
        }
    }
    let final_res = system.relative_residual(&x);
    if final_res <= opts.tol {
        return Ok(x);
    }
    Err(Error::NotConverged {
        iterations,
        residual: res.max(final_res),
    })
}

/// Builds the system for `t` on `classes`.
pub fn assemble(
    classes: &NodeClassField,
    mat: &MaterialParams,
    t: &ScalarField,
) -> Result<LinearSystem> {
    Problem::new(classes.clone(), *mat)?.assemble(t)
}

/// Stresses of `(ux, uy)` under temperature `t`.
pub fn stresses(
    ux: &ScalarField,
    uy: &ScalarField,
    t: &ScalarField,
    mat: &MaterialParams,
    classes: &NodeClassField,
) -> Result<(ScalarField, ScalarField, ScalarField)> {
    Ok(Problem::new(classes.clone(), *mat)?.stresses(ux, uy, t))
}

/// One ground-truth sample for temperature `t`.
pub fn generate_sample(
    classes: &NodeClassField,
    mat: &MaterialParams,
    t: &ScalarField,
) -> Result<FieldSample> {
    Problem::new(classes.clone(), *mat)?.generate_sample(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, BoardGeometry};

    fn problem(board: &BoardGeometry, n: usize) -> Problem {
        let (_, classes) = build_grid(board, n, n).unwrap();
        Problem::new(classes, MaterialParams::default()).unwrap()
    }

    #[test]
    fn zero_temperature_gives_zero_rhs_and_sample() {
        let p = problem(&BoardGeometry::reference_for_grid(24), 24);
        let t = ScalarField::zeros(*p.grid());
        let sys = p.assemble(&t).unwrap();
        assert!(sys.rhs().iter().all(|&b| b == 0.0));
        let s = p.generate_sample(&t).unwrap();
        for f in s.fields() {
            assert!(f.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn system_size_counts_two_unknowns_per_node() {
        let p = problem(&BoardGeometry::plain(0.2), 5);
        let sys = p.assemble(&ScalarField::zeros(*p.grid())).unwrap();
        assert_eq!(sys.n(), 50);
    }

    #[test]
    fn interior_row_matches_stencil_kernels() {
        use crate::stencils::{as_kernel, DiffKind};
        let p = problem(&BoardGeometry::plain(0.2), 9);
        let g = *p.grid();
        let sys = p.assemble(&ScalarField::zeros(g)).unwrap();
        let mu = p.material().poisson;
        let k = g.index(4, 4);
        let row: Vec<(usize, f64)> = sys.row(2 * k).collect();
        let coeff = |c: usize| row.iter().find(|e| e.0 == c).map(|e| e.1).unwrap_or(0.0);
        let dxx = as_kernel(DiffKind::Dxx).interior;
        let dyy = as_kernel(DiffKind::Dyy).interior;
        let dxy = as_kernel(DiffKind::Dxy).interior;
        for dj in 0..3 {
            for di in 0..3 {
                let node = g.index(3 + di, 3 + dj);
                let expect_ux = dxx[dj][di] + (1.0 - mu) / 2.0 * dyy[dj][di];
                let expect_uy = (1.0 + mu) / 2.0 * dxy[dj][di] / 4.0;
                assert!((coeff(2 * node) - expect_ux).abs() < 1e-12);
                assert!((coeff(2 * node + 1) - expect_uy).abs() < 1e-12);
            }
        }
        // center: -2 (1 + (1 - mu) / 2)
        assert!((coeff(2 * k) + 2.0 * (1.0 + (1.0 - mu) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn uniform_stress_formula() {
        let p = problem(&BoardGeometry::reference_for_grid(16), 16);
        let g = *p.grid();
        let z = ScalarField::zeros(g);
        let t = ScalarField::constant(g, 100.0);
        let (sxx, syy, sxy) = p.stresses(&z, &z, &t);
        for k in 0..g.len() {
            if p.classes().class(k).is_hole_interior() {
                assert_eq!(sxx.values()[k], 0.0);
                continue;
            }
            assert!((sxx.values()[k] + 62.5).abs() < 1e-10);
            assert!((syy.values()[k] + 62.5).abs() < 1e-10);
            assert_eq!(sxy.values()[k], 0.0);
        }
    }

    #[test]
    fn unclamped_board_without_pins_is_singular() {
        let p = problem(&BoardGeometry::plain(0.2), 12);
        let t = ScalarField::constant(*p.grid(), 100.0);
        let sys = p.assemble(&t).unwrap();
        assert!(solve(&sys, 1e-10).is_err());
    }

    #[test]
    fn free_expansion_is_recovered() {
        let p = problem(&BoardGeometry::plain(0.2), 21);
        let g = *p.grid();
        let t = ScalarField::constant(g, 100.0);
        let pins = Pin::rigid_modes(&g);
        let sys = p.assemble_pinned(&t, &pins).unwrap();
        let (ux, uy) = solve(&sys, 1e-10).unwrap();
        let (xc, yc) = (g.x(pins[0].i), g.y(pins[0].j));
        let a = p.material().alpha * 100.0;
        for k in 0..g.len() {
            let (i, j) = g.coords(k);
            assert!((ux.values()[k] - a * (g.x(i) - xc)).abs() < 1e-12);
            assert!((uy.values()[k] - a * (g.y(j) - yc)).abs() < 1e-12);
        }
        let (sxx, syy, sxy) = p.stresses(&ux, &uy, &t);
        let scale = 50e3 * 1e-5 * 100.0;
        for f in [sxx, syy, sxy] {
            assert!(f.max_abs() <= 1e-8 * scale, "{}", f.max_abs());
        }
    }

    #[test]
    fn iterative_methods_agree_with_direct() {
        let p = problem(&BoardGeometry::reference_for_grid(24), 24);
        let g = *p.grid();
        let t = ScalarField::from_fn(g, |x, y| 50.0 + 40.0 * (20.0 * x).sin() * (13.0 * y).cos());
        let sys = p.assemble(&t).unwrap();
        let direct = solve_vector(&sys, &SolveOptions::new(SolverMethod::BandedLu, 1e-12)).unwrap();
        let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for method in [SolverMethod::GmresIlu, SolverMethod::GmresJacobi] {
            let x = solve_vector(&sys, &SolveOptions::new(method, 1e-13)).unwrap();
            let err = x.iter().zip(&direct).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-8 * scale, "{method:?}: {err:e} vs {scale:e}");
        }
    }

    #[test]
    fn tolerance_range_is_checked() {
        let p = problem(&BoardGeometry::reference_for_grid(16), 16);
        let sys = p.assemble(&ScalarField::constant(*p.grid(), 1.0)).unwrap();
        assert!(solve(&sys, 1e-3).is_err());
        assert!(solve(&sys, 0.0).is_err());
    }
}
