//! Uniform cell-centered grids on a box `[0, L)^d`, grid functions, balls and
//! the counting primitives every other module is built on.
//!
//! Measures are always integer cell counts scaled by `h^d`, so comparisons
//! between sets are exact. Ball membership is the strict inequality
//! `|center(cell) - ball.center| < radius`, with the minimal-image convention
//! on periodic grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported dimension.
pub const MAX_DIM: usize = 3;

/// Integer displacement between two cells, in units of the grid spacing.
/// Unused trailing axes are zero.
pub type Offset = [i64; MAX_DIM];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    dim: usize,
    cells_per_axis: usize,
    box_length: f64,
    periodic: bool,
}

impl Grid {
    pub fn new(dim: usize, cells_per_axis: usize, box_length: f64, periodic: bool) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidGrid(format!("dim must be in 1..={MAX_DIM}, got {dim}")));
        }
        if cells_per_axis < 2 {
            return Err(Error::InvalidGrid(format!(
                "cells_per_axis must be at least 2, got {cells_per_axis}"
            )));
        }
        if !(box_length.is_finite() && box_length > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "box_length must be positive and finite, got {box_length}"
            )));
        }
        let total = (cells_per_axis as u128).pow(dim as u32);
        if total > u32::MAX as u128 {
            return Err(Error::InvalidGrid(format!("{total} cells is too many")));
        }
        Ok(Self {
            dim,
            cells_per_axis,
            box_length,
            periodic,
        })
    }

    pub fn periodic(dim: usize, cells_per_axis: usize, box_length: f64) -> Result<Self> {
        Self::new(dim, cells_per_axis, box_length, true)
    }

    pub fn free(dim: usize, cells_per_axis: usize, box_length: f64) -> Result<Self> {
        Self::new(dim, cells_per_axis, box_length, false)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells_per_axis(&self) -> usize {
        self.cells_per_axis
    }

    pub fn box_length(&self) -> f64 {
        self.box_length
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    /// Grid spacing `h = L / N`.
    pub fn spacing(&self) -> f64 {
        self.box_length / self.cells_per_axis as f64
    }

    pub fn cell_count(&self) -> usize {
        self.cells_per_axis.pow(self.dim as u32)
    }

    /// `h^d`, the measure of one cell.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    fn check(&self, i: usize) -> Result<()> {
        if i < self.cell_count() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index: i,
                cells: self.cell_count(),
            })
        }
    }

    /// Multi-index of a cell; axis 0 varies fastest.
    pub fn coords(&self, i: usize) -> Offset {
        let n = self.cells_per_axis;
        let mut c = [0i64; MAX_DIM];
        let mut rest = i;
        for slot in c.iter_mut().take(self.dim) {
            *slot = (rest % n) as i64;
            rest /= n;
        }
        c
    }

    /// Linear index of a multi-index. Periodic grids wrap; free grids return
    /// `None` outside the box.
    pub fn index_of(&self, c: &Offset) -> Option<usize> {
        let n = self.cells_per_axis as i64;
        let mut idx = 0usize;
        let mut stride = 1usize;
        for &ca in c.iter().take(self.dim) {
            let v = if self.periodic {
                ca.rem_euclid(n)
            } else if (0..n).contains(&ca) {
                ca
            } else {
                return None;
            };
            idx += v as usize * stride;
            stride *= self.cells_per_axis;
        }
        Some(idx)
    }

    /// The cell reached from `i` by moving along `o`.
    pub fn shift(&self, i: usize, o: &Offset) -> Option<usize> {
        let mut c = self.coords(i);
        for a in 0..self.dim {
            c[a] += o[a];
        }
        self.index_of(&c)
    }

    /// Physical coordinates of the center of cell `i`.
    pub fn center(&self, i: usize) -> Vec<f64> {
        let h = self.spacing();
        let c = self.coords(i);
        (0..self.dim).map(|a| (c[a] as f64 + 0.5) * h).collect()
    }

    /// Center of the box.
    pub fn box_center(&self) -> Vec<f64> {
        vec![0.5 * self.box_length; self.dim]
    }

    /// Minimal-image offset `j - i`. On an even periodic axis the antipodal
    /// offset is reported as `+N/2`.
    pub fn offset(&self, i: usize, j: usize) -> Offset {
        let ci = self.coords(i);
        let cj = self.coords(j);
        let n = self.cells_per_axis as i64;
        let mut o = [0i64; MAX_DIM];
        for a in 0..self.dim {
            let mut d = cj[a] - ci[a];
            if self.periodic {
                d = d.rem_euclid(n);
                if 2 * d > n {
                    d -= n;
                }
            }
            o[a] = d;
        }
        o
    }

    /// Whether the displacement from `i` to `j` along `axis` is the antipodal
    /// one, whose sign is ambiguous on a periodic grid.
    pub fn is_antipodal(&self, i: usize, j: usize, axis: usize) -> bool {
        let n = self.cells_per_axis as i64;
        self.periodic && n % 2 == 0 && 2 * self.offset(i, j)[axis] == n
    }

    /// Squared distance between cell centers in units of `h^2`.
    pub fn sq_steps(&self, i: usize, j: usize) -> i64 {
        self.offset(i, j).iter().map(|v| v * v).sum()
    }

    /// Euclidean distance between the centers of cells `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        self.check(i)?;
        self.check(j)?;
        Ok(self.dist(i, j))
    }

    pub(crate) fn dist(&self, i: usize, j: usize) -> f64 {
        (self.sq_steps(i, j) as f64).sqrt() * self.spacing()
    }

    /// Physical displacement vector `x_j - x_i` (minimal image).
    pub fn displacement(&self, i: usize, j: usize) -> [f64; MAX_DIM] {
        let h = self.spacing();
        let o = self.offset(i, j);
        let mut v = [0.0; MAX_DIM];
        for a in 0..self.dim {
            v[a] = o[a] as f64 * h;
        }
        v
    }

    /// Largest center-to-center distance on the grid.
    pub fn diameter(&self) -> f64 {
        let n = self.cells_per_axis as f64;
        let per_axis = if self.periodic {
            (self.cells_per_axis / 2) as f64
        } else {
            n - 1.0
        };
        per_axis * (self.dim as f64).sqrt() * self.spacing()
    }

    /// Ball of physical radius `radius` centered at the center of `cell`.
    pub fn cell_ball(&self, cell: usize, radius: f64) -> Result<Ball> {
        self.check(cell)?;
        Ball::new(self.center(cell), radius)
    }

    fn sq_dist_to_point(&self, i: usize, p: &[f64]) -> f64 {
        let h = self.spacing();
        let c = self.coords(i);
        let mut s = 0.0;
        for a in 0..self.dim {
            let mut d = (c[a] as f64 + 0.5) * h - p[a];
            if self.periodic {
                d = d.rem_euclid(self.box_length);
                if d > 0.5 * self.box_length {
                    d -= self.box_length;
                }
            }
            s += d * d;
        }
        s
    }

    /// Whether the center of cell `i` lies strictly inside `ball`.
    pub fn contains(&self, ball: &Ball, i: usize) -> bool {
        self.sq_dist_to_point(i, &ball.center) < ball.radius * ball.radius
    }

    /// All cells whose center lies strictly inside `ball`, with their measure.
    pub fn ball_cells(&self, ball: &Ball) -> BallCells {
        let cells: Vec<usize> = (0..self.cell_count())
            .filter(|&i| self.contains(ball, i))
            .collect();
        let measure = cells.len() as f64 * self.cell_volume();
        BallCells { cells, measure }
    }

    /// Number of `true` cells of `mask` inside `ball`.
    pub fn mask_ball_count(&self, mask: &[bool], ball: &Ball) -> Result<usize> {
        if mask.len() != self.cell_count() {
            return Err(Error::LengthMismatch {
                expected: self.cell_count(),
                got: mask.len(),
            });
        }
        Ok((0..self.cell_count())
            .filter(|&i| mask[i] && self.contains(ball, i))
            .count())
    }

    /// Integer offsets `o` with `|o| < radius_steps`, restricted to the
    /// minimal-image range on periodic axes so that each cell appears once.
    /// Offsets are ordered lexicographically with axis 0 fastest.
    pub fn centered_offsets(&self, radius_steps: f64) -> Vec<Offset> {
        let n = self.cells_per_axis as i64;
        let reach = radius_steps.ceil().max(0.0) as i64;
        let (lo, hi) = if self.periodic {
            (-(n - 1) / 2, n / 2)
        } else {
            (-(n - 1), n - 1)
        };
        let lo = lo.max(-reach);
        let hi = hi.min(reach);
        let r2 = radius_steps * radius_steps;
        let mut out = Vec::new();
        let mut o = [0i64; MAX_DIM];
        let span = (hi - lo + 1).max(0) as usize;
        if span == 0 {
            return out;
        }
        let total = span.pow(self.dim as u32);
        for t in 0..total {
            let mut rest = t;
            for slot in o.iter_mut().take(self.dim) {
                *slot = lo + (rest % span) as i64;
                rest /= span;
            }
            let sq: i64 = o.iter().map(|v| v * v).sum();
            if (sq as f64) < r2 {
                out.push(o);
            }
        }
        out
    }

    /// Cells of the ball of radius `radius_steps * h` centered at cell `c`.
    pub fn centered_ball(&self, c: usize, offsets: &[Offset]) -> Vec<usize> {
        offsets.iter().filter_map(|o| self.shift(c, o)).collect()
    }
}

/// An open ball in `R^d`. `C * B` keeps the center and scales the radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidParameter {
                name: "radius",
                reason: format!("must be positive and finite, got {radius}"),
            });
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "center",
                reason: "coordinates must be finite".into(),
            });
        }
        Ok(Self { center, radius })
    }

    pub fn scaled(&self, factor: f64) -> Ball {
        Ball {
            center: self.center.clone(),
            radius: self.radius * factor,
        }
    }

    pub fn center_distance(&self, other: &Ball) -> f64 {
        self.center
            .iter()
            .zip(&other.center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Gap between the two balls (0 when they meet).
    pub fn gap(&self, other: &Ball) -> f64 {
        (self.center_distance(other) - self.radius - other.radius).max(0.0)
    }

    pub fn contains_point(&self, p: &[f64]) -> bool {
        let d2: f64 = self
            .center
            .iter()
            .zip(p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        d2 < self.radius * self.radius
    }

    /// Whether `self` is contained in `outer` (closed containment of open balls).
    pub fn inside(&self, outer: &Ball) -> bool {
        self.center_distance(outer) + self.radius <= outer.radius * (1.0 + 1e-12)
    }

    pub fn disjoint(&self, other: &Ball) -> bool {
        self.center_distance(other) >= self.radius + other.radius
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BallCells {
    pub cells: Vec<usize>,
    pub measure: f64,
}

/// Values of a function on the cells of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cell_count() {
            return Err(Error::LengthMismatch {
                expected: grid.cell_count(),
                got: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "values",
                reason: format!("entry {k} is not finite"),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.cell_count()).map(|i| f(&grid.center(i))).collect();
        Self::new(grid.clone(), values)
    }

    pub fn constant(grid: &Grid, c: f64) -> Result<Self> {
        Self::new(grid.clone(), vec![c; grid.cell_count()])
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v + c).collect(),
        }
    }
}

/// Volume of the unit ball `omega_d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI / 3.0,
        _ => panic!("unsupported dimension {d}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn distance_examples() {
        let g = Grid::periodic(1, 8, 1.0).unwrap();
        assert!((g.distance(0, 7).unwrap() - 0.125).abs() < 1e-15);
        assert_eq!(g.distance(3, 3).unwrap(), 0.0);
        let f = Grid::free(1, 8, 1.0).unwrap();
        assert!((f.distance(0, 7).unwrap() - 0.875).abs() < 1e-15);
        assert!(matches!(
            g.distance(0, 8),
            Err(Error::IndexOutOfRange { index: 8, .. })
        ));
    }

    #[test]
    fn periodic_distance_bounded_by_half_diagonal() {
        let g = Grid::periodic(2, 7, 3.0).unwrap();
        let bound = 3.0 * 2f64.sqrt() / 2.0;
        for i in 0..g.cell_count() {
            for j in 0..g.cell_count() {
                assert!(g.distance(i, j).unwrap() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn ball_cells_examples() {
        let g = Grid::periodic(1, 16, 1.0).unwrap();
        let h = g.spacing();
        assert_eq!(g.ball_cells(&g.cell_ball(5, 1.5 * h).unwrap()).cells.len(), 3);
        assert_eq!(g.ball_cells(&g.cell_ball(5, 0.5 * h).unwrap()).cells.len(), 1);
        let g2 = Grid::periodic(2, 16, 1.0).unwrap();
        let b = g2.ball_cells(&g2.cell_ball(40, 1.5 * h).unwrap());
        assert_eq!(b.cells.len(), 9);
        assert!((b.measure - 9.0 * h * h).abs() < 1e-15);
        // wraps around the periodic boundary
        assert_eq!(g.ball_cells(&g.cell_ball(0, 1.5 * h).unwrap()).cells, vec![0, 1, 15]);
    }

    #[test]
    fn mask_count_examples() {
        let g = Grid::periodic(1, 16, 1.0).unwrap();
        let h = g.spacing();
        let ball = g.cell_ball(6, 2.5 * h).unwrap();
        let all = vec![true; 16];
        assert_eq!(g.mask_ball_count(&all, &ball).unwrap(), 5);
        assert_eq!(g.mask_ball_count(&[false; 16], &ball).unwrap(), 0);
        let alternating: Vec<bool> = (0..16).map(|i| i % 2 == 0).collect();
        assert_eq!(g.mask_ball_count(&alternating, &ball).unwrap(), 3);
        assert!(matches!(
            g.mask_ball_count(&[true; 3], &ball),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn centered_offsets_agree_with_ball_cells() {
        for &(dim, n, periodic) in &[(1, 12, true), (2, 9, true), (2, 8, false), (1, 7, false)] {
            let g = Grid::new(dim, n, 2.0, periodic).unwrap();
            let h = g.spacing();
            for &r in &[0.5, 1.5, 2.3, 3.7, 5.5] {
                let offs = g.centered_offsets(r);
                for c in [0, g.cell_count() / 2, g.cell_count() - 1] {
                    let mut a = g.centered_ball(c, &offs);
                    a.sort_unstable();
                    let b = g.ball_cells(&g.cell_ball(c, r * h).unwrap()).cells;
                    assert_eq!(a, b, "dim {dim} n {n} periodic {periodic} r {r} c {c}");
                }
            }
        }
    }

    #[test]
    fn discrete_ball_volume_close_to_continuum() {
        for dim in 1..=2 {
            let g = Grid::periodic(dim, 64, 1.0).unwrap();
            let h = g.spacing();
            for k in [5.0, 7.5, 11.0, 16.0] {
                let r = k * h;
                let cells = g.ball_cells(&g.cell_ball(0, r).unwrap());
                let vol = unit_ball_volume(dim) * r.powi(dim as i32);
                let rel = (cells.measure - vol).abs() / vol;
                assert!(rel <= 3.0 * h / r, "dim {dim} r/h {k}: rel {rel}");
            }
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(0, 8, 1.0, true).is_err());
        assert!(Grid::new(4, 8, 1.0, true).is_err());
        assert!(Grid::new(1, 1, 1.0, true).is_err());
        assert!(Grid::new(1, 8, 0.0, true).is_err());
        assert!(Ball::new(vec![0.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn ball_cells_nested(c in 0usize..100, r1 in 0.1f64..4.0, dr in 0.0f64..3.0) {
            let g = Grid::periodic(2, 10, 1.0).unwrap();
            let small = g.ball_cells(&g.cell_ball(c, r1 * 0.1).unwrap()).cells;
            let big = g.ball_cells(&g.cell_ball(c, (r1 + dr) * 0.1).unwrap()).cells;
            prop_assert!(small.iter().all(|i| big.contains(i)));
        }

        #[test]
        fn mask_count_monotone(bits in proptest::collection::vec(any::<bool>(), 64), extra in proptest::collection::vec(any::<bool>(), 64), c in 0usize..64, r in 0.5f64..20.0) {
            let g = Grid::free(1, 64, 1.0).unwrap();
            let bigger: Vec<bool> = bits.iter().zip(&extra).map(|(a, b)| *a || *b).collect();
            let ball = g.cell_ball(c, r * g.spacing()).unwrap();
            prop_assert!(g.mask_ball_count(&bits, &ball).unwrap() <= g.mask_ball_count(&bigger, &ball).unwrap());
        }
    }
}
