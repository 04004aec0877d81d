//! Plate domain, holes, the uniform grid, and per-node classification.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Circular screw hole, clamped on its rim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hole {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// Rectangular board `[0, length] x [0, height]` with circular holes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardGeometry {
    pub length: f64,
    pub height: f64,
    pub holes: Vec<Hole>,
}

/// Radius of the screw holes on the reference board, in meters.
pub const REFERENCE_HOLE_RADIUS: f64 = 0.005;
/// Side length of the reference square board, in meters.
pub const REFERENCE_SIDE: f64 = 0.2;

impl BoardGeometry {
    pub fn new(length: f64, height: f64, holes: Vec<Hole>) -> Result<Self> {
        let board = Self {
            length,
            height,
            holes,
        };
        board.validate()?;
        Ok(board)
    }

    /// Square board with no holes.
    pub fn plain(side: f64) -> Self {
        Self {
            length: side,
            height: side,
            holes: Vec::new(),
        }
    }

    /// Four holes of equal radius centered at the quarter points of both axes.
    pub fn four_holes(length: f64, height: f64, radius: f64) -> Self {
        let holes = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
            .iter()
            .map(|&(fx, fy)| Hole {
                cx: fx * length,
                cy: fy * height,
                radius,
            })
            .collect();
        Self {
            length,
            height,
            holes,
        }
    }

    /// The 20 cm reference board with four 0.5 cm holes.
    pub fn reference() -> Self {
        Self::four_holes(REFERENCE_SIDE, REFERENCE_SIDE, REFERENCE_HOLE_RADIUS)
    }

    /// Four-hole layout whose radius is widened to `1.5 h` when the reference
    /// radius cannot be resolved on an `n x n` grid of this board.
    pub fn reference_for_grid(n: usize) -> Self {
        let h = REFERENCE_SIDE / (n.max(2) - 1) as f64;
        let radius = REFERENCE_HOLE_RADIUS.max(1.5 * h);
        Self::four_holes(REFERENCE_SIDE, REFERENCE_SIDE, radius)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.height > 0.0) {
            return Err(Error::Geometry(format!(
                "board dimensions must be positive, got {} x {}",
                self.length, self.height
            )));
        }
        for (k, hole) in self.holes.iter().enumerate() {
            if !(hole.radius > 0.0) {
                return Err(Error::Geometry(format!("hole {k} has non-positive radius")));
            }
            let inside = hole.cx - hole.radius > 0.0
                && hole.cx + hole.radius < self.length
                && hole.cy - hole.radius > 0.0
                && hole.cy + hole.radius < self.height;
            if !inside {
                return Err(Error::Geometry(format!(
                    "hole {k} is not strictly inside the board"
                )));
            }
        }
        for a in 0..self.holes.len() {
            for b in a + 1..self.holes.len() {
                let (p, q) = (self.holes[a], self.holes[b]);
                let d = (p.cx - q.cx).hypot(p.cy - q.cy);
                if d <= p.radius + q.radius {
                    return Err(Error::Geometry(format!("holes {a} and {b} overlap")));
                }
            }
        }
        Ok(())
    }
}

/// Isotropic thermoelastic material, assumed temperature independent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub youngs: f64,
    pub poisson: f64,
    /// Linear expansion coefficient, 1/K.
    pub alpha: f64,
    /// Thermal conductivity, W/(m K). Carried for the record; elasticity does not use it.
    pub conductivity: f64,
    /// Reference temperature, K. Temperatures elsewhere are changes above it.
    pub t_ref: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            youngs: 50e3,
            poisson: 0.2,
            alpha: 1e-5,
            conductivity: 1.0,
            t_ref: 273.0,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.poisson > 0.0 && self.poisson < 0.5) {
            return Err(Error::Material(format!(
                "Poisson ratio must lie in (0, 0.5), got {}",
                self.poisson
            )));
        }
        if !(self.youngs > 0.0) || !(self.alpha > 0.0) {
            return Err(Error::Material(
                "Young's modulus and expansion coefficient must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Uniform square-cell grid. Node `(i, j)` sits at `(i h, j h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
}

impl GridSpec {
    pub fn new(length: f64, height: f64, nx: usize, ny: usize) -> Result<Self> {
        if nx < 5 || ny < 5 {
            return Err(Error::Geometry(format!(
                "grid needs at least 5 nodes per axis, got {nx} x {ny}"
            )));
        }
        let hx = length / (nx - 1) as f64;
        let hy = height / (ny - 1) as f64;
        if ((hx - hy) / hx).abs() > 1e-12 {
            return Err(Error::Geometry(format!(
                "cells are not square: hx = {hx}, hy = {hy}"
            )));
        }
        Ok(Self { nx, ny, h: hx })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        j as f64 * self.h
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.nx || j + 1 == self.ny
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeClass {
    Interior,
    /// Outer edge node with outward direction cosines `(l, m)`.
    OuterBoundary { l: f64, m: f64 },
    /// Clamped ring around a hole.
    HoleBoundary,
    HoleInterior,
}

impl NodeClass {
    pub fn is_hole_interior(&self) -> bool {
        matches!(self, NodeClass::HoleInterior)
    }
}

/// Classification of every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeClassField {
    grid: GridSpec,
    classes: Vec<NodeClass>,
}

impl NodeClassField {
    /// Wraps an explicit classification. Outer edge nodes must be
    /// `OuterBoundary`, and nothing else may be.
    pub fn from_classes(grid: GridSpec, classes: Vec<NodeClass>) -> Result<Self> {
        if classes.len() != grid.len() {
            return Err(Error::Shape(format!(
                "expected {} classes, got {}",
                grid.len(),
                classes.len()
            )));
        }
        for (k, c) in classes.iter().enumerate() {
            let (i, j) = grid.coords(k);
            let outer = matches!(c, NodeClass::OuterBoundary { .. });
            if outer != grid.is_edge(i, j) {
                return Err(Error::Geometry(format!(
                    "node ({i}, {j}) has inconsistent outer-boundary class"
                )));
            }
        }
        Ok(Self { grid, classes })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn classes(&self) -> &[NodeClass] {
        &self.classes
    }

    #[inline]
    pub fn class(&self, k: usize) -> NodeClass {
        self.classes[k]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> NodeClass {
        self.classes[self.grid.index(i, j)]
    }

    pub fn interior_mask(&self) -> Vec<bool> {
        self.mask(|c| matches!(c, NodeClass::Interior))
    }

    pub fn outer_mask(&self) -> Vec<bool> {
        self.mask(|c| matches!(c, NodeClass::OuterBoundary { .. }))
    }

    pub fn hole_boundary_mask(&self) -> Vec<bool> {
        self.mask(|c| matches!(c, NodeClass::HoleBoundary))
    }

    pub fn hole_interior_mask(&self) -> Vec<bool> {
        self.mask(|c| matches!(c, NodeClass::HoleInterior))
    }

    /// Every node whose values carry meaning (all but `HoleInterior`).
    pub fn solid_mask(&self) -> Vec<bool> {
        self.mask(|c| !c.is_hole_interior())
    }

    /// Node counts `(interior, outer, hole_boundary, hole_interior)`.
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        let mut n = (0, 0, 0, 0);
        for c in &self.classes {
            match c {
                NodeClass::Interior => n.0 += 1,
                NodeClass::OuterBoundary { .. } => n.1 += 1,
                NodeClass::HoleBoundary => n.2 += 1,
                NodeClass::HoleInterior => n.3 += 1,
            }
        }
        n
    }

    fn mask(&self, pred: impl Fn(&NodeClass) -> bool) -> Vec<bool> {
        self.classes.iter().map(pred).collect()
    }
}

/// Rasterizes `board` onto an `nx x ny` grid.
///
/// A node is `HoleInterior` when it lies deeper than `h/2` inside a hole,
/// and `HoleBoundary` when it lies within `h/2` of a hole rim or touches a
/// `HoleInterior` node through any of its eight neighbors. The second rule
/// closes the ring so no stencil centered on an `Interior` node reads a
/// hole-interior value.
pub fn build_grid(board: &BoardGeometry, nx: usize, ny: usize) -> Result<(GridSpec, NodeClassField)> {
    board.validate()?;
    let grid = GridSpec::new(board.length, board.height, nx, ny)?;
    let h = grid.h;
    for (k, hole) in board.holes.iter().enumerate() {
        if 2.0 * hole.radius < 2.0 * h {
            return Err(Error::Geometry(format!(
                "unresolvable hole {k}: diameter {} is narrower than 2h = {}",
                2.0 * hole.radius,
                2.0 * h
            )));
        }
    }

    let mut classes = vec![NodeClass::Interior; grid.len()];
    for j in 0..ny {
        for i in 0..nx {
            let k = grid.index(i, j);
            if grid.is_edge(i, j) {
                let (l, m) = outward_normal(&grid, i, j)?;
                classes[k] = NodeClass::OuterBoundary { l, m };
                continue;
            }
            let (x, y) = (grid.x(i), grid.y(j));
            for hole in &board.holes {
                let d = (x - hole.cx).hypot(y - hole.cy);
                if d < hole.radius - 0.5 * h {
                    classes[k] = NodeClass::HoleInterior;
                    break;
                }
                if (d - hole.radius).abs() <= 0.5 * h {
                    classes[k] = NodeClass::HoleBoundary;
                }
            }
        }
    }

    let mut ring = Vec::new();
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let k = grid.index(i, j);
            if classes[k] != NodeClass::Interior {
                continue;
            }
            let touches = (-1i64..=1).any(|dj| {
                (-1i64..=1).any(|di| {
                    let kk = grid.index((i as i64 + di) as usize, (j as i64 + dj) as usize);
                    classes[kk] == NodeClass::HoleInterior
                })
            });
            if touches {
                ring.push(k);
            }
        }
    }
    for k in ring {
        classes[k] = NodeClass::HoleBoundary;
    }

    for (k, c) in classes.iter().enumerate() {
        if matches!(c, NodeClass::HoleBoundary | NodeClass::HoleInterior) {
            let (i, j) = grid.coords(k);
            if i < 2 || j < 2 || i + 2 >= nx || j + 2 >= ny {
                return Err(Error::Geometry(format!(
                    "hole nodes reach within two cells of the outer edge at ({i}, {j})"
                )));
            }
        }
    }

    Ok((grid, NodeClassField { grid, classes }))
}

/// Outward direction cosines of an outer-boundary node. Corners take the
/// normalized sum of their two edge normals.
pub fn outward_normal(grid: &GridSpec, i: usize, j: usize) -> Result<(f64, f64)> {
    if i >= grid.nx || j >= grid.ny || !grid.is_edge(i, j) {
        return Err(Error::Geometry(format!(
            "node ({i}, {j}) is not on the outer boundary"
        )));
    }
    let mut l = 0.0;
    let mut m = 0.0;
    if i == 0 {
        l -= 1.0;
    }
    if i + 1 == grid.nx {
        l += 1.0;
    }
    if j == 0 {
        m -= 1.0;
    }
    if j + 1 == grid.ny {
        m += 1.0;
    }
    if l != 0.0 && m != 0.0 {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        l *= s;
        m *= s;
    }
    Ok((l, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mirror_x(f: &NodeClassField, i: usize, j: usize) -> NodeClass {
        f.at(f.grid().nx - 1 - i, j)
    }

    #[test]
    fn plain_five_by_five_counts() {
        let board = BoardGeometry::plain(0.2);
        let (grid, classes) = build_grid(&board, 5, 5).unwrap();
        assert_eq!(grid.len(), 25);
        assert_eq!(classes.counts(), (9, 16, 0, 0));
    }

    #[test]
    fn reference_board_at_paper_resolution() {
        let (grid, classes) = build_grid(&BoardGeometry::reference(), 200, 200).unwrap();
        assert!((grid.h - 0.2 / 199.0).abs() < 1e-15);
        let diameter_cells = 2.0 * REFERENCE_HOLE_RADIUS / grid.h;
        assert!(diameter_cells > 9.9 && diameter_cells < 10.0);
        let (_, _, ring, inner) = classes.counts();
        assert!(ring > 0 && inner > 0);
    }

    #[test]
    fn tiny_hole_is_rejected() {
        let board = BoardGeometry::four_holes(0.2, 0.2, 0.0004);
        let err = build_grid(&board, 200, 200).unwrap_err();
        assert!(err.to_string().contains("unresolvable hole"), "{err}");
    }

    #[test]
    fn invalid_boards() {
        assert!(BoardGeometry::new(0.0, 1.0, vec![]).is_err());
        let outside = Hole {
            cx: 0.01,
            cy: 0.1,
            radius: 0.02,
        };
        assert!(BoardGeometry::new(0.2, 0.2, vec![outside]).is_err());
        let a = Hole {
            cx: 0.1,
            cy: 0.1,
            radius: 0.02,
        };
        let b = Hole { cx: 0.13, ..a };
        assert!(BoardGeometry::new(0.2, 0.2, vec![a, b]).is_err());
        assert!(GridSpec::new(0.2, 0.3, 11, 11).is_err());
        assert!(GridSpec::new(0.2, 0.2, 4, 4).is_err());
    }

    #[test]
    fn normals() {
        let grid = GridSpec::new(0.2, 0.2, 9, 9).unwrap();
        assert_eq!(outward_normal(&grid, 8, 3).unwrap(), (1.0, 0.0));
        assert_eq!(outward_normal(&grid, 4, 0).unwrap(), (0.0, -1.0));
        assert_eq!(outward_normal(&grid, 0, 5).unwrap(), (-1.0, 0.0));
        assert_eq!(outward_normal(&grid, 2, 8).unwrap(), (0.0, 1.0));
        let (l, m) = outward_normal(&grid, 0, 0).unwrap();
        let s = 2f64.sqrt() / 2.0;
        assert!((l + s).abs() < 1e-15 && (m + s).abs() < 1e-15);
        assert!(outward_normal(&grid, 3, 3).is_err());
    }

    #[test]
    fn outer_normals_have_unit_length() {
        let (_, classes) = build_grid(&BoardGeometry::reference_for_grid(40), 40, 40).unwrap();
        for c in classes.classes() {
            if let NodeClass::OuterBoundary { l, m } = c {
                assert!((l * l + m * m - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn symmetric_holes_give_mirror_symmetric_classes() {
        for n in [32, 40, 64, 65] {
            let (grid, classes) = build_grid(&BoardGeometry::reference_for_grid(n), n, n).unwrap();
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    let c = classes.at(i, j);
                    let hx = mirror_x(&classes, i, j);
                    let vy = classes.at(i, grid.ny - 1 - j);
                    let strip = |c: NodeClass| match c {
                        NodeClass::OuterBoundary { .. } => 1,
                        NodeClass::Interior => 0,
                        NodeClass::HoleBoundary => 2,
                        NodeClass::HoleInterior => 3,
                    };
                    assert_eq!(strip(c), strip(hx), "n={n} ({i},{j})");
                    assert_eq!(strip(c), strip(vy), "n={n} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn ring_separates_hole_interior_from_interior() {
        let (grid, classes) = build_grid(&BoardGeometry::reference(), 64, 64).unwrap();
        for j in 1..grid.ny - 1 {
            for i in 1..grid.nx - 1 {
                if classes.at(i, j) != NodeClass::Interior {
                    continue;
                }
                for dj in 0..3 {
                    for di in 0..3 {
                        assert!(!classes.at(i + di - 1, j + dj - 1).is_hole_interior());
                    }
                }
            }
        }
    }

    #[test]
    fn hole_interior_survives_refinement() {
        for n in [20usize, 33, 64] {
            let board = BoardGeometry::four_holes(0.2, 0.2, 0.02);
            let (_, coarse) = build_grid(&board, n, n).unwrap();
            let (_, fine) = build_grid(&board, 2 * n, 2 * n).unwrap();
            if coarse.counts().3 > 0 {
                assert!(fine.counts().3 > 0);
            }
        }
    }
}
