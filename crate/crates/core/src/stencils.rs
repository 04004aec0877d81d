//! Finite-difference derivative operators on masked grids.
//!
//! Every derivative at a node is a small patch of integer weights over a
//! common denominator (`2h`, `h^2`, or `4h^2`). Each node picks its patch
//! from what its neighbors allow: central where both sides are usable,
//! second-order one-sided otherwise, first-order as a last resort. Nodes
//! inside holes are never read and always produce 0.
//!
//! The same patch selection backs two evaluation routes: [`DiffOperator`]
//! (compressed rows, also used for solver assembly and adjoints) and
//! [`apply_kernel`] (3x3 interior convolution plus boundary corrections).
//! Both accumulate identical products in identical order.

use crate::geometry::{GridSpec, NodeClassField};
use crate::{Error, Result};

/// Real values on a grid, row-major with flat index `j * nx + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "field has {} values, grid needs {}",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: GridSpec, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    /// Samples `f(x, y)` at every node.
    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let (i, j) = grid.coords(k);
                f(grid.x(i), grid.y(j))
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// Zeroes every node where `mask` is false.
    pub fn masked(mut self, mask: &[bool]) -> Self {
        for (v, &keep) in self.values.iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiffKind {
    Dx,
    Dy,
    Dxx,
    Dyy,
    Dxy,
}

impl DiffKind {
    pub const ALL: [DiffKind; 5] = [
        DiffKind::Dx,
        DiffKind::Dy,
        DiffKind::Dxx,
        DiffKind::Dyy,
        DiffKind::Dxy,
    ];

    /// Denominator shared by every patch of this kind, as a multiple of `h`.
    pub fn denominator(&self) -> Denominator {
        match self {
            DiffKind::Dx | DiffKind::Dy => Denominator::TwoH,
            DiffKind::Dxx | DiffKind::Dyy => Denominator::HSquared,
            DiffKind::Dxy => Denominator::FourHSquared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Denominator {
    TwoH,
    HSquared,
    FourHSquared,
}

impl Denominator {
    pub fn value(&self, h: f64) -> f64 {
        match self {
            Denominator::TwoH => 2.0 * h,
            Denominator::HSquared => h * h,
            Denominator::FourHSquared => 4.0 * h * h,
        }
    }
}

/// One-dimensional first-derivative rules, weights over `2h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstRule {
    Central,
    Forward,
    Backward,
    ForwardFirstOrder,
    BackwardFirstOrder,
}

impl FirstRule {
    const ORDER: [FirstRule; 5] = [
        FirstRule::Central,
        FirstRule::Forward,
        FirstRule::Backward,
        FirstRule::ForwardFirstOrder,
        FirstRule::BackwardFirstOrder,
    ];

    /// `(offset, weight)` pairs in ascending offset.
    pub fn taps(&self) -> &'static [(i64, f64)] {
        match self {
            FirstRule::Central => &[(-1, -1.0), (1, 1.0)],
            FirstRule::Forward => &[(0, -3.0), (1, 4.0), (2, -1.0)],
            FirstRule::Backward => &[(-2, 1.0), (-1, -4.0), (0, 3.0)],
            FirstRule::ForwardFirstOrder => &[(0, -2.0), (1, 2.0)],
            FirstRule::BackwardFirstOrder => &[(-1, -2.0), (0, 2.0)],
        }
    }
}

/// One-dimensional second-derivative rules, weights over `h^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondRule {
    Central,
    Forward,
    Backward,
    ForwardFirstOrder,
    BackwardFirstOrder,
}

impl SecondRule {
    const ORDER: [SecondRule; 5] = [
        SecondRule::Central,
        SecondRule::Forward,
        SecondRule::Backward,
        SecondRule::ForwardFirstOrder,
        SecondRule::BackwardFirstOrder,
    ];

    pub fn taps(&self) -> &'static [(i64, f64)] {
        match self {
            SecondRule::Central => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
            SecondRule::Forward => &[(0, 2.0), (1, -5.0), (2, 4.0), (3, -1.0)],
            SecondRule::Backward => &[(-3, -1.0), (-2, 4.0), (-1, -5.0), (0, 2.0)],
            SecondRule::ForwardFirstOrder => &[(0, 1.0), (1, -2.0), (2, 1.0)],
            SecondRule::BackwardFirstOrder => &[(-2, 1.0), (-1, -2.0), (0, 1.0)],
        }
    }
}

/// Which patch a node uses for a given derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    First(FirstRule),
    Second(SecondRule),
    /// Tensor product of an x rule and a y rule.
    Mixed(FirstRule, FirstRule),
}

impl Pattern {
    pub fn is_central(&self) -> bool {
        matches!(
            self,
            Pattern::First(FirstRule::Central)
                | Pattern::Second(SecondRule::Central)
                | Pattern::Mixed(FirstRule::Central, FirstRule::Central)
        )
    }
}

/// Dense rectangle of weights anchored at offset `(di0, dj0)` from the node.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub di0: i64,
    pub dj0: i64,
    pub width: usize,
    pub height: usize,
    /// Row-major, `height` rows of `width`.
    pub weights: Vec<f64>,
}

impl Patch {
    fn along_x(taps: &[(i64, f64)]) -> Self {
        let di0 = taps[0].0;
        let width = (taps[taps.len() - 1].0 - di0 + 1) as usize;
        let mut weights = vec![0.0; width];
        for &(o, w) in taps {
            weights[(o - di0) as usize] = w;
        }
        Self {
            di0,
            dj0: 0,
            width,
            height: 1,
            weights,
        }
    }

    fn transposed(&self) -> Self {
        let mut weights = vec![0.0; self.weights.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                weights[c * self.height + r] = self.weights[r * self.width + c];
            }
        }
        Self {
            di0: self.dj0,
            dj0: self.di0,
            width: self.height,
            height: self.width,
            weights,
        }
    }

    fn product(x: &[(i64, f64)], y: &[(i64, f64)]) -> Self {
        let px = Self::along_x(x);
        let py = Self::along_x(y);
        let mut weights = Vec::with_capacity(px.width * py.width);
        for wy in &py.weights {
            for wx in &px.weights {
                weights.push(wx * wy);
            }
        }
        Self {
            di0: px.di0,
            dj0: py.di0,
            width: px.width,
            height: py.width,
            weights,
        }
    }

    /// Nonzero `(di, dj, weight)` entries in raster order.
    pub fn taps(&self) -> impl Iterator<Item = (i64, i64, f64)> + '_ {
        (0..self.height).flat_map(move |r| {
            (0..self.width).filter_map(move |c| {
                let w = self.weights[r * self.width + c];
                (w != 0.0).then_some((self.di0 + c as i64, self.dj0 + r as i64, w))
            })
        })
    }
}

/// Patch for `pattern` oriented for `kind`.
pub fn pattern_patch(kind: DiffKind, pattern: Pattern) -> Patch {
    match (kind, pattern) {
        (DiffKind::Dx, Pattern::First(r)) => Patch::along_x(r.taps()),
        (DiffKind::Dy, Pattern::First(r)) => Patch::along_x(r.taps()).transposed(),
        (DiffKind::Dxx, Pattern::Second(r)) => Patch::along_x(r.taps()),
        (DiffKind::Dyy, Pattern::Second(r)) => Patch::along_x(r.taps()).transposed(),
        (DiffKind::Dxy, Pattern::Mixed(rx, ry)) => Patch::product(rx.taps(), ry.taps()),
        _ => unreachable!("pattern {pattern:?} does not apply to {kind:?}"),
    }
}

fn usable(classes: &NodeClassField, i: i64, j: i64) -> bool {
    let g = classes.grid();
    i >= 0
        && j >= 0
        && (i as usize) < g.nx
        && (j as usize) < g.ny
        && !classes.at(i as usize, j as usize).is_hole_interior()
}

fn taps_usable(classes: &NodeClassField, i: usize, j: usize, patch: &Patch) -> bool {
    patch
        .taps()
        .all(|(di, dj, _)| usable(classes, i as i64 + di, j as i64 + dj))
}

/// Picks the patch node `(i, j)` uses for `kind`, or `None` when the node is
/// hole-interior or no rule fits.
pub fn select_pattern(
    kind: DiffKind,
    classes: &NodeClassField,
    i: usize,
    j: usize,
) -> Option<Pattern> {
    if classes.at(i, j).is_hole_interior() {
        return None;
    }
    let fits = |p: Pattern| taps_usable(classes, i, j, &pattern_patch(kind, p));
    match kind {
        DiffKind::Dx | DiffKind::Dy => FirstRule::ORDER
            .iter()
            .map(|&r| Pattern::First(r))
            .find(|&p| fits(p)),
        DiffKind::Dxx | DiffKind::Dyy => SecondRule::ORDER
            .iter()
            .map(|&r| Pattern::Second(r))
            .find(|&p| fits(p)),
        DiffKind::Dxy => {
            let rx = select_pattern(DiffKind::Dx, classes, i, j);
            let ry = select_pattern(DiffKind::Dy, classes, i, j);
            if let (Some(Pattern::First(rx)), Some(Pattern::First(ry))) = (rx, ry) {
                if fits(Pattern::Mixed(rx, ry)) {
                    return Some(Pattern::Mixed(rx, ry));
                }
            }
            FirstRule::ORDER
                .iter()
                .flat_map(|&a| FirstRule::ORDER.iter().map(move |&b| Pattern::Mixed(a, b)))
                .find(|&p| fits(p))
        }
    }
}

/// Compressed-row derivative operator: `out[k] = (sum w f[col]) / denom`.
#[derive(Debug, Clone)]
pub struct DiffOperator {
    kind: DiffKind,
    grid: GridSpec,
    denom: f64,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    patterns: Vec<Option<Pattern>>,
}

impl DiffOperator {
    pub fn new(kind: DiffKind, classes: &NodeClassField) -> Result<Self> {
        let grid = *classes.grid();
        if grid.nx < 5 || grid.ny < 5 {
            return Err(Error::Shape(format!(
                "grid {} x {} is too small for one-sided stencils",
                grid.nx, grid.ny
            )));
        }
        let mut row_ptr = Vec::with_capacity(grid.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut patterns = Vec::with_capacity(grid.len());
        row_ptr.push(0);
        for k in 0..grid.len() {
            let (i, j) = grid.coords(k);
            let pattern = select_pattern(kind, classes, i, j);
            if let Some(p) = pattern {
                for (di, dj, w) in pattern_patch(kind, p).taps() {
                    let ii = (i as i64 + di) as usize;
                    let jj = (j as i64 + dj) as usize;
                    cols.push(grid.index(ii, jj));
                    weights.push(w);
                }
            }
            patterns.push(pattern);
            row_ptr.push(cols.len());
        }
        Ok(Self {
            kind,
            grid,
            denom: kind.denominator().value(grid.h),
            row_ptr,
            cols,
            weights,
            patterns,
        })
    }

    pub fn kind(&self) -> DiffKind {
        self.kind
    }

    pub fn pattern(&self, k: usize) -> Option<Pattern> {
        self.patterns[k]
    }

    pub fn denom(&self) -> f64 {
        self.denom
    }

    /// `(column, coefficient)` pairs of row `k`, coefficients already divided
    /// by the denominator.
    pub fn row(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[k]..self.row_ptr[k + 1];
        self.cols[r.clone()]
            .iter()
            .zip(&self.weights[r])
            .map(move |(&c, &w)| (c, w / self.denom))
    }

    #[inline]
    pub fn apply_at(&self, values: &[f64], k: usize) -> f64 {
        let r = self.row_ptr[k]..self.row_ptr[k + 1];
        if r.is_empty() {
            return 0.0;
        }
        let mut acc = 0.0;
        for (&c, &w) in self.cols[r.clone()].iter().zip(&self.weights[r]) {
            acc += w * values[c];
        }
        acc / self.denom
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        debug_assert_eq!(values.len(), self.grid.len());
        (0..self.grid.len()).map(|k| self.apply_at(values, k)).collect()
    }

    pub fn apply_field(&self, f: &ScalarField) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.apply(f.values()),
        }
    }

    /// Adjoint: `out[col] += (w / denom) g[k]`.
    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        self.accumulate_transpose(g, 1.0, &mut out);
        out
    }

    /// `out += scale * A^T g`.
    pub fn accumulate_transpose(&self, g: &[f64], scale: f64, out: &mut [f64]) {
        for (k, &gk) in g.iter().enumerate() {
            if gk == 0.0 {
                continue;
            }
            let s = scale * gk / self.denom;
            for idx in self.row_ptr[k]..self.row_ptr[k + 1] {
                out[self.cols[idx]] += self.weights[idx] * s;
            }
        }
    }
}

/// All five operators for one grid classification.
#[derive(Debug, Clone)]
pub struct StencilSet {
    pub dx: DiffOperator,
    pub dy: DiffOperator,
    pub dxx: DiffOperator,
    pub dyy: DiffOperator,
    pub dxy: DiffOperator,
}

impl StencilSet {
    pub fn new(classes: &NodeClassField) -> Result<Self> {
        Ok(Self {
            dx: DiffOperator::new(DiffKind::Dx, classes)?,
            dy: DiffOperator::new(DiffKind::Dy, classes)?,
            dxx: DiffOperator::new(DiffKind::Dxx, classes)?,
            dyy: DiffOperator::new(DiffKind::Dyy, classes)?,
            dxy: DiffOperator::new(DiffKind::Dxy, classes)?,
        })
    }

    pub fn get(&self, kind: DiffKind) -> &DiffOperator {
        match kind {
            DiffKind::Dx => &self.dx,
            DiffKind::Dy => &self.dy,
            DiffKind::Dxx => &self.dxx,
            DiffKind::Dyy => &self.dyy,
            DiffKind::Dxy => &self.dxy,
        }
    }
}

/// Derivative of `f` on the masked grid. Zero at hole-interior nodes.
pub fn diff(f: &ScalarField, kind: DiffKind, classes: &NodeClassField) -> Result<ScalarField> {
    if f.grid() != classes.grid() {
        return Err(Error::Shape("field and classification grids differ".into()));
    }
    Ok(DiffOperator::new(kind, classes)?.apply_field(f))
}

/// Convolution form of one derivative kind.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilKernel {
    pub kind: DiffKind,
    /// 3x3 interior weights, `interior[1 + dj][1 + di]`.
    pub interior: [[f64; 3]; 3],
    pub denominator: Denominator,
    /// Every non-central patch a boundary or hole-adjacent node may use.
    pub corrections: Vec<(Pattern, Patch)>,
}

impl StencilKernel {
    pub fn correction(&self, pattern: Pattern) -> Option<&Patch> {
        self.corrections
            .iter()
            .find(|(p, _)| *p == pattern)
            .map(|(_, patch)| patch)
    }
}

pub fn as_kernel(kind: DiffKind) -> StencilKernel {
    let patterns: Vec<Pattern> = match kind {
        DiffKind::Dx | DiffKind::Dy => FirstRule::ORDER.iter().map(|&r| Pattern::First(r)).collect(),
        DiffKind::Dxx | DiffKind::Dyy => {
            SecondRule::ORDER.iter().map(|&r| Pattern::Second(r)).collect()
        }
        DiffKind::Dxy => FirstRule::ORDER
            .iter()
            .flat_map(|&a| FirstRule::ORDER.iter().map(move |&b| Pattern::Mixed(a, b)))
            .collect(),
    };
    let mut interior = [[0.0; 3]; 3];
    let central = patterns.iter().find(|p| p.is_central()).expect("central rule");
    for (di, dj, w) in pattern_patch(kind, *central).taps() {
        interior[(1 + dj) as usize][(1 + di) as usize] = w;
    }
    let corrections = patterns
        .iter()
        .filter(|p| !p.is_central())
        .map(|&p| (p, pattern_patch(kind, p)))
        .collect();
    StencilKernel {
        kind,
        interior,
        denominator: kind.denominator(),
        corrections,
    }
}

/// Evaluates a derivative by convolving with `kernel.interior` wherever the
/// central rule applies and with the matching correction patch elsewhere.
pub fn apply_kernel(
    f: &ScalarField,
    kernel: &StencilKernel,
    classes: &NodeClassField,
) -> Result<ScalarField> {
    if f.grid() != classes.grid() {
        return Err(Error::Shape("field and classification grids differ".into()));
    }
    let grid = *f.grid();
    let denom = kernel.denominator.value(grid.h);
    let v = f.values();
    let mut out = vec![0.0; grid.len()];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let Some(pattern) = select_pattern(kernel.kind, classes, i, j) else {
                continue;
            };
            let mut acc = 0.0;
            if pattern.is_central() {
                for (r, row) in kernel.interior.iter().enumerate() {
                    for (c, &w) in row.iter().enumerate() {
                        if w != 0.0 {
                            let ii = i + c - 1;
                            let jj = j + r - 1;
                            acc += w * v[grid.index(ii, jj)];
                        }
                    }
                }
            } else {
                let patch = kernel.correction(pattern).ok_or_else(|| {
                    Error::Shape(format!("kernel lacks correction {pattern:?}"))
                })?;
                for (di, dj, w) in patch.taps() {
                    let ii = (i as i64 + di) as usize;
                    let jj = (j as i64 + dj) as usize;
                    acc += w * v[grid.index(ii, jj)];
                }
            }
            out[grid.index(i, j)] = acc / denom;
        }
    }
    ScalarField::new(grid, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, BoardGeometry, NodeClass};

    fn plain(n: usize) -> NodeClassField {
        build_grid(&BoardGeometry::plain(0.05 * (n - 1) as f64), n, n)
            .unwrap()
            .1
    }

    fn holed(n: usize) -> NodeClassField {
        build_grid(&BoardGeometry::reference_for_grid(n), n, n).unwrap().1
    }

    fn assert_close(a: f64, b: f64, rel: f64) {
        assert!((a - b).abs() <= rel * b.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn constants_have_zero_derivatives() {
        for classes in [plain(7), holed(32)] {
            let f = ScalarField::constant(*classes.grid(), 3.7);
            for kind in DiffKind::ALL {
                let d = diff(&f, kind, &classes).unwrap();
                for (k, v) in d.values().iter().enumerate() {
                    if !classes.class(k).is_hole_interior() {
                        assert!(v.abs() < 1e-9, "{kind:?} at {k}: {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn linear_first_derivatives_are_exact_everywhere() {
        let classes = plain(9);
        let grid = *classes.grid();
        assert!((grid.h - 0.05).abs() < 1e-15);
        let fx = ScalarField::from_fn(grid, |x, _| x);
        let fy = ScalarField::from_fn(grid, |_, y| y);
        let dx = diff(&fx, DiffKind::Dx, &classes).unwrap();
        let dy = diff(&fy, DiffKind::Dy, &classes).unwrap();
        for k in 0..grid.len() {
            assert_close(dx.values()[k], 1.0, 1e-12);
            assert_close(dy.values()[k], 1.0, 1e-12);
        }
    }

    #[test]
    fn quadratics_are_exact_at_interior_nodes() {
        let classes = plain(9);
        let grid = *classes.grid();
        let sq = ScalarField::from_fn(grid, |x, _| x * x);
        let xy = ScalarField::from_fn(grid, |x, y| x * y);
        let dxx = diff(&sq, DiffKind::Dxx, &classes).unwrap();
        let dxy = diff(&xy, DiffKind::Dxy, &classes).unwrap();
        for (k, c) in classes.classes().iter().enumerate() {
            if *c == NodeClass::Interior {
                assert_close(dxx.values()[k], 2.0, 1e-12);
                assert_close(dxy.values()[k], 1.0, 1e-12);
            }
        }
    }

    #[test]
    fn hole_interior_outputs_are_zero() {
        let classes = holed(32);
        let f = ScalarField::from_fn(*classes.grid(), |x, y| (3.0 * x).sin() + y * y);
        for kind in DiffKind::ALL {
            let d = diff(&f, kind, &classes).unwrap();
            for (k, c) in classes.classes().iter().enumerate() {
                if c.is_hole_interior() {
                    assert_eq!(d.values()[k], 0.0);
                }
            }
        }
    }

    #[test]
    fn kernel_tables() {
        let dxx = as_kernel(DiffKind::Dxx);
        assert_eq!(dxx.interior[1], [1.0, -2.0, 1.0]);
        assert_eq!(dxx.interior[0], [0.0; 3]);
        assert_eq!(dxx.denominator, Denominator::HSquared);

        let dxy = as_kernel(DiffKind::Dxy);
        assert_eq!(
            dxy.interior,
            [[1.0, 0.0, -1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 1.0]]
        );
        assert_eq!(dxy.denominator, Denominator::FourHSquared);

        let dx = as_kernel(DiffKind::Dx);
        let fwd = dx.correction(Pattern::First(FirstRule::Forward)).unwrap();
        assert_eq!(fwd.weights, vec![-3.0, 4.0, -1.0]);
        assert_eq!((fwd.di0, fwd.dj0), (0, 0));
        let bwd = dx.correction(Pattern::First(FirstRule::Backward)).unwrap();
        assert_eq!(bwd.weights, vec![1.0, -4.0, 3.0]);

        let dy = as_kernel(DiffKind::Dy);
        let fwd_y = dy.correction(Pattern::First(FirstRule::Forward)).unwrap();
        assert_eq!((fwd_y.width, fwd_y.height), (1, 3));
    }

    #[test]
    fn transpose_is_adjoint() {
        let classes = holed(32);
        let grid = *classes.grid();
        let f = ScalarField::from_fn(grid, |x, y| (7.0 * x).cos() * (5.0 * y).sin());
        let g = ScalarField::from_fn(grid, |x, y| x * x - y + 0.3);
        for kind in DiffKind::ALL {
            let op = DiffOperator::new(kind, &classes).unwrap();
            let af = op.apply(f.values());
            let atg = op.apply_transpose(g.values());
            let lhs: f64 = af.iter().zip(g.values()).map(|(a, b)| a * b).sum();
            let rhs: f64 = f.values().iter().zip(&atg).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{kind:?}");
        }
    }

    #[test]
    fn boundary_nodes_use_one_sided_normal_derivatives() {
        let classes = plain(9);
        let op = DiffOperator::new(DiffKind::Dx, &classes).unwrap();
        let g = classes.grid();
        assert_eq!(op.pattern(g.index(0, 4)), Some(Pattern::First(FirstRule::Forward)));
        assert_eq!(op.pattern(g.index(8, 4)), Some(Pattern::First(FirstRule::Backward)));
        assert_eq!(op.pattern(g.index(4, 0)), Some(Pattern::First(FirstRule::Central)));
        let mixed = DiffOperator::new(DiffKind::Dxy, &classes).unwrap();
        assert_eq!(
            mixed.pattern(g.index(0, 0)),
            Some(Pattern::Mixed(FirstRule::Forward, FirstRule::Forward))
        );
    }
}
