//! Physics residuals of predicted fields and the scaled physics loss.
//!
//! The residuals use the very operators the solver assembles, so a solver
//! sample has residuals at round-off level. The loss is a quadratic form in
//! the predicted fields; [`PhysicsResidual::loss_and_grad`] returns its exact
//! gradient through the operator adjoints.

use crate::geometry::{MaterialParams, NodeClass, NodeClassField};
use crate::solver::{FieldSample, Problem};
use crate::stencils::{apply_kernel, as_kernel, DiffKind, ScalarField};
use crate::Result;

/// Characteristic magnitudes dividing each residual family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualScales {
    /// Equilibrium residuals.
    pub u: f64,
    /// Constitutive residuals.
    pub stress: f64,
    /// Boundary residuals (traction and clamp).
    pub boundary: f64,
}

impl ResidualScales {
    /// Scales for temperatures of magnitude `t_char` on spacing `h`.
    pub fn from_temperature(mat: &MaterialParams, t_char: f64, h: f64) -> Self {
        let strain = (1.0 + mat.poisson) * mat.alpha * t_char;
        Self {
            u: strain / h,
            stress: mat.youngs * mat.alpha * t_char / (1.0 - mat.poisson),
            boundary: strain,
        }
    }

    pub fn unit() -> Self {
        Self {
            u: 1.0,
            stress: 1.0,
            boundary: 1.0,
        }
    }
}

/// Residual fields, zero outside their masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBundle {
    pub r_ux: ScalarField,
    pub r_uy: ScalarField,
    pub r_sxx: ScalarField,
    pub r_syy: ScalarField,
    pub r_sxy: ScalarField,
    pub r_bc_x: ScalarField,
    pub r_bc_y: ScalarField,
}

/// How derivatives are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiffRoute {
    #[default]
    Operator,
    /// 3x3 convolution kernels with boundary corrections.
    Kernel,
}

/// Gradient of the physics loss with respect to the five predicted outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub ux: Vec<f64>,
    pub uy: Vec<f64>,
    pub sxx: Vec<f64>,
    pub syy: Vec<f64>,
    pub sxy: Vec<f64>,
}

impl OutputGrads {
    pub fn as_array(&self) -> [&Vec<f64>; 5] {
        [&self.ux, &self.uy, &self.sxx, &self.syy, &self.sxy]
    }
}

struct Derivs {
    ux: [Vec<f64>; 5],
    uy: [Vec<f64>; 5],
    t_dx: Vec<f64>,
    t_dy: Vec<f64>,
}

const DX: usize = 0;
const DY: usize = 1;
const DXX: usize = 2;
const DYY: usize = 3;
const DXY: usize = 4;

/// Residual evaluator bound to one problem definition.
#[derive(Debug, Clone, Copy)]
pub struct PhysicsResidual<'a> {
    problem: &'a Problem,
    route: DiffRoute,
}

impl<'a> PhysicsResidual<'a> {
    pub fn new(problem: &'a Problem) -> Self {
        Self {
            problem,
            route: DiffRoute::Operator,
        }
    }

    pub fn with_route(mut self, route: DiffRoute) -> Self {
        self.route = route;
        self
    }

    fn classes(&self) -> &NodeClassField {
        self.problem.classes()
    }

    fn d(&self, kind: DiffKind, f: &ScalarField) -> Vec<f64> {
        match self.route {
            DiffRoute::Operator => self.problem.stencils().get(kind).apply(f.values()),
            DiffRoute::Kernel => apply_kernel(f, &as_kernel(kind), self.classes())
                .expect("field on problem grid")
                .into_values(),
        }
    }

    fn derivs(&self, pred: &FieldSample) -> Derivs {
        let all = |f: &ScalarField| DiffKind::ALL.map(|k| self.d(k, f));
        Derivs {
            ux: all(&pred.ux),
            uy: all(&pred.uy),
            t_dx: self.d(DiffKind::Dx, &pred.t),
            t_dy: self.d(DiffKind::Dy, &pred.t),
        }
    }

    fn raw(&self, pred: &FieldSample, d: &Derivs) -> [Vec<f64>; 7] {
        let n = pred.grid().len();
        let MaterialParams {
            youngs: e,
            poisson: mu,
            alpha,
            ..
        } = *self.problem.material();
        let th = (1.0 + mu) * alpha;
        let c1 = (1.0 - mu) / 2.0;
        let c2 = (1.0 + mu) / 2.0;
        let a = e / (1.0 - mu * mu);
        let b = e * alpha / (1.0 - mu);
        let gs = e / (2.0 * (1.0 + mu));
        let mut r: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
        let t = pred.t.values();
        for k in 0..n {
            match self.classes().class(k) {
                NodeClass::Interior => {
                    let (ux, uy) = (&d.ux, &d.uy);
                    r[0][k] = ux[DXX][k] + c1 * ux[DYY][k] + c2 * uy[DXY][k] - th * d.t_dx[k];
                    r[1][k] = uy[DYY][k] + c1 * uy[DXX][k] + c2 * ux[DXY][k] - th * d.t_dy[k];
                    r[2][k] = pred.sxx.values()[k] - (a * (ux[DX][k] + mu * uy[DY][k]) - b * t[k]);
                    r[3][k] = pred.syy.values()[k] - (a * (uy[DY][k] + mu * ux[DX][k]) - b * t[k]);
                    r[4][k] = pred.sxy.values()[k] - gs * (uy[DX][k] + ux[DY][k]);
                }
                NodeClass::OuterBoundary { l, m } => {
                    let (ux, uy) = (&d.ux, &d.uy);
                    let shear = c1 * (ux[DY][k] + uy[DX][k]);
                    r[5][k] = l * (ux[DX][k] + mu * uy[DY][k]) + m * shear - l * th * t[k];
                    r[6][k] = m * (uy[DY][k] + mu * ux[DX][k]) + l * shear - m * th * t[k];
                }
                NodeClass::HoleBoundary => {
                    r[5][k] = pred.ux.values()[k];
                    r[6][k] = pred.uy.values()[k];
                }
                NodeClass::HoleInterior => {}
            }
        }
        r
    }

    pub fn residuals(&self, pred: &FieldSample) -> ResidualBundle {
        let d = self.derivs(pred);
        let grid = *pred.grid();
        let [a, b, c, e, f, g, h] = self.raw(pred, &d).map(|v| ScalarField::new(grid, v).expect("grid-sized"));
        ResidualBundle {
            r_ux: a,
            r_uy: b,
            r_sxx: c,
            r_syy: e,
            r_sxy: f,
            r_bc_x: g,
            r_bc_y: h,
        }
    }

    fn node_counts(&self) -> (f64, f64) {
        let (interior, outer, ring, _) = self.classes().counts();
        (interior.max(1) as f64, (outer + ring).max(1) as f64)
    }

    fn weights(&self, scales: &ResidualScales) -> [f64; 7] {
        let (ni, nb) = self.node_counts();
        let wu = 1.0 / (scales.u * scales.u * ni);
        let ws = 1.0 / (scales.stress * scales.stress * ni);
        let wb = 1.0 / (scales.boundary * scales.boundary * nb);
        [wu, wu, ws, ws, ws, wb, wb]
    }

    /// Mean squared scaled residual over interior nodes plus the same over
    /// boundary nodes.
    pub fn loss(&self, pred: &FieldSample, scales: &ResidualScales) -> f64 {
        let r = self.raw(pred, &self.derivs(pred));
        let w = self.weights(scales);
        r.iter()
            .zip(w)
            .map(|(v, wi)| wi * v.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    pub fn loss_and_grad(&self, pred: &FieldSample, scales: &ResidualScales) -> (f64, OutputGrads) {
        let r = self.raw(pred, &self.derivs(pred));
        let w = self.weights(scales);
        let loss = r
            .iter()
            .zip(w)
            .map(|(v, wi)| wi * v.iter().map(|x| x * x).sum::<f64>())
            .sum();
        let g: Vec<Vec<f64>> = r
            .iter()
            .zip(w)
            .map(|(v, wi)| v.iter().map(|x| 2.0 * wi * x).collect())
            .collect();
        let MaterialParams {
            youngs: e,
            poisson: mu,
            ..
        } = *self.problem.material();
        let c1 = (1.0 - mu) / 2.0;
        let c2 = (1.0 + mu) / 2.0;
        let a = e / (1.0 - mu * mu);
        let gs = e / (2.0 * (1.0 + mu));
        let n = pred.grid().len();
        let ops = self.problem.stencils();

        let mut bx_l = vec![0.0; n];
        let mut bx_m = vec![0.0; n];
        let mut by_l = vec![0.0; n];
        let mut by_m = vec![0.0; n];
        let mut gux = vec![0.0; n];
        let mut guy = vec![0.0; n];
        for k in 0..n {
            match self.classes().class(k) {
                NodeClass::OuterBoundary { l, m } => {
                    bx_l[k] = l * g[5][k];
                    bx_m[k] = m * g[5][k];
                    by_l[k] = l * g[6][k];
                    by_m[k] = m * g[6][k];
                }
                NodeClass::HoleBoundary => {
                    gux[k] = g[5][k];
                    guy[k] = g[6][k];
                }
                _ => {}
            }
        }
        let (g_ux, g_uy, g_sxx, g_syy, g_sxy) = (&g[0], &g[1], &g[2], &g[3], &g[4]);

        ops.dxx.accumulate_transpose(g_ux, 1.0, &mut gux);
        ops.dyy.accumulate_transpose(g_ux, c1, &mut gux);
        ops.dxy.accumulate_transpose(g_uy, c2, &mut gux);
        ops.dx.accumulate_transpose(g_sxx, -a, &mut gux);
        ops.dx.accumulate_transpose(g_syy, -a * mu, &mut gux);
        ops.dy.accumulate_transpose(g_sxy, -gs, &mut gux);
        ops.dx.accumulate_transpose(&bx_l, 1.0, &mut gux);
        ops.dy.accumulate_transpose(&bx_m, c1, &mut gux);
        ops.dx.accumulate_transpose(&by_m, mu, &mut gux);
        ops.dy.accumulate_transpose(&by_l, c1, &mut gux);

        ops.dyy.accumulate_transpose(g_uy, 1.0, &mut guy);
        ops.dxx.accumulate_transpose(g_uy, c1, &mut guy);
        ops.dxy.accumulate_transpose(g_ux, c2, &mut guy);
        ops.dy.accumulate_transpose(g_sxx, -a * mu, &mut guy);
        ops.dy.accumulate_transpose(g_syy, -a, &mut guy);
        ops.dx.accumulate_transpose(g_sxy, -gs, &mut guy);
        ops.dy.accumulate_transpose(&bx_l, mu, &mut guy);
        ops.dx.accumulate_transpose(&bx_m, c1, &mut guy);
        ops.dy.accumulate_transpose(&by_m, 1.0, &mut guy);
        ops.dx.accumulate_transpose(&by_l, c1, &mut guy);

        let grads = OutputGrads {
            ux: gux,
            uy: guy,
            sxx: g[2].clone(),
            syy: g[3].clone(),
            sxy: g[4].clone(),
        };
        (loss, grads)
    }
}

pub fn equilibrium_residual(
    ux: &ScalarField,
    uy: &ScalarField,
    t: &ScalarField,
    mat: &MaterialParams,
    classes: &NodeClassField,
) -> Result<(ScalarField, ScalarField)> {
    let problem = Problem::new(classes.clone(), *mat)?;
    let mut pred = FieldSample::zeros(*classes.grid());
    pred.ux = ux.clone();
    pred.uy = uy.clone();
    pred.t = t.clone();
    let r = PhysicsResidual::new(&problem).residuals(&pred);
    Ok((r.r_ux, r.r_uy))
}

pub fn constitutive_residual(
    pred: &FieldSample,
    mat: &MaterialParams,
    classes: &NodeClassField,
) -> Result<(ScalarField, ScalarField, ScalarField)> {
    let problem = Problem::new(classes.clone(), *mat)?;
    let r = PhysicsResidual::new(&problem).residuals(pred);
    Ok((r.r_sxx, r.r_syy, r.r_sxy))
}

pub fn boundary_residual(
    pred: &FieldSample,
    mat: &MaterialParams,
    classes: &NodeClassField,
) -> Result<(ScalarField, ScalarField)> {
    let problem = Problem::new(classes.clone(), *mat)?;
    let r = PhysicsResidual::new(&problem).residuals(pred);
    Ok((r.r_bc_x, r.r_bc_y))
}

pub fn pde_loss(
    pred: &FieldSample,
    mat: &MaterialParams,
    classes: &NodeClassField,
    scales: &ResidualScales,
) -> Result<f64> {
    let problem = Problem::new(classes.clone(), *mat)?;
    Ok(PhysicsResidual::new(&problem).loss(pred, scales))
}
