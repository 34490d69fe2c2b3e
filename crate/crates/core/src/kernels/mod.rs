//! Kernel gallery and tabulation.
//!
//! Every gallery kernel has the form `K(x, y) = lambda * g(y - x) * |x - y|^(-d-2s)`
//! with an angular or banded weight `g` in `[0, 1]`. Tabulated kernels store
//! `K(x_i, x_j)` for every ordered pair of cells with a zero diagonal.

mod assumption;
mod conjecture;
mod io;

pub use assumption::{
    check_assumption, nondeg_table, AssumptionReport, AssumptionVariant, CenterSampling,
    SamplingPlan, Witness,
};
pub use conjecture::{conjecture_ratio, Quadrature};
pub use io::{read_kernel, write_kernel};

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Offset};

/// Shape of the kernel away from the `|x-y|^(-d-2s)` scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelVariant {
    /// `lambda |x-y|^(-d-2s)`.
    FractionalLaplacian,
    /// Supported on the half space `(y - x) . e_axis > 0`; the dividing
    /// hyperplane (and the periodic antipode along `axis`) carries weight 1/2
    /// so that `K + K^T` is exactly the fractional kernel.
    OneSided { axis: usize },
    /// `b((y-x)/|y-x|)` sampled on equal angular bins: `[b]` or `[b(-1), b(+1)]`
    /// in one dimension, `bins` sectors of `[0, 2 pi)` in two.
    Directional { weights: Vec<f64> },
    /// Nondegenerate iff `floor(|y_0 - x_0| / width)` is even.
    Stripes { width: f64 },
    /// A kernel defined only by its table.
    Tabulated { source: TabulatedSource },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TabulatedSource {
    /// A kernel file written by [`write_kernel`].
    File(PathBuf),
    /// `lambda |x-y|^(-d-2s)` on a symmetric random set of pairs.
    RandomMask { density: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub variant: KernelVariant,
    pub s: f64,
    pub lambda: f64,
}

impl KernelSpec {
    pub fn new(variant: KernelVariant, s: f64, lambda: f64) -> Result<Self> {
        let spec = Self { variant, s, lambda };
        spec.validate()?;
        Ok(spec)
    }

    pub fn fractional(s: f64, lambda: f64) -> Result<Self> {
        Self::new(KernelVariant::FractionalLaplacian, s, lambda)
    }

    pub fn validate(&self) -> Result<()> {
        check_order(self.s)?;
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidParameter {
                name: "lambda",
                reason: format!("must be positive, got {}", self.lambda),
            });
        }
        match &self.variant {
            KernelVariant::Directional { weights } => {
                if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(Error::InvalidParameter {
                        name: "weights",
                        reason: "need at least one finite nonnegative weight".into(),
                    });
                }
            }
            KernelVariant::Stripes { width } if !(width.is_finite() && *width > 0.0) => {
                return Err(Error::InvalidParameter {
                    name: "width",
                    reason: format!("must be positive, got {width}"),
                });
            }
            KernelVariant::Tabulated {
                source: TabulatedSource::RandomMask { density, .. },
            } if !(0.0..=1.0).contains(density) => {
                return Err(Error::InvalidParameter {
                    name: "density",
                    reason: format!("must lie in [0, 1], got {density}"),
                });
            }
            _ => {}
        }
        Ok(())
    }

    /// Short provenance tag used in reports.
    pub fn id(&self) -> String {
        let name = match &self.variant {
            KernelVariant::FractionalLaplacian => "fractional_laplacian".to_string(),
            KernelVariant::OneSided { axis } => format!("one_sided[axis={axis}]"),
            KernelVariant::Directional { weights } => format!("directional[bins={}]", weights.len()),
            KernelVariant::Stripes { width } => format!("stripes[w={width}]"),
            KernelVariant::Tabulated {
                source: TabulatedSource::File(p),
            } => format!("tabulated[{}]", p.display()),
            KernelVariant::Tabulated {
                source: TabulatedSource::RandomMask { density, seed },
            } => format!("random_mask[p={density},seed={seed}]"),
        };
        format!("{name};s={};lambda={}", self.s, self.lambda)
    }
}

/// Angular weights of a double (or single) cone in two dimensions, sampled at
/// the centers of `bins` equal sectors.
pub fn cone_weights(bins: usize, axis_angle: f64, half_angle: f64, two_sided: bool) -> Vec<f64> {
    let width = 2.0 * PI / bins as f64;
    (0..bins)
        .map(|k| {
            let theta = (k as f64 + 0.5) * width;
            let near = |a: f64| {
                let d = (theta - a).rem_euclid(2.0 * PI);
                d.min(2.0 * PI - d) <= half_angle
            };
            if near(axis_angle) || (two_sided && near(axis_angle + PI)) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

pub(crate) fn check_order(s: f64) -> Result<()> {
    if s > 0.0 && s < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "s",
            reason: format!("order must lie in (0, 1), got {s}"),
        })
    }
}

/// A kernel tabulated on all ordered pairs of grid cells, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TabulatedKernel {
    grid: Grid,
    s: f64,
    entries: Vec<f64>,
    id: String,
}

impl TabulatedKernel {
    /// Wraps a row-major table. Entries must be finite and nonnegative; the
    /// diagonal is reset to zero.
    pub fn from_entries(grid: Grid, s: f64, mut entries: Vec<f64>, id: impl Into<String>) -> Result<Self> {
        check_order(s)?;
        let m = grid.cell_count();
        if entries.len() != m * m {
            return Err(Error::LengthMismatch {
                expected: m * m,
                got: entries.len(),
            });
        }
        for (k, v) in entries.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::NonFinite {
                    i: k / m,
                    j: k % m,
                    value: *v,
                });
            }
        }
        for i in 0..m {
            entries[i * m + i] = 0.0;
        }
        Ok(Self {
            grid,
            s,
            entries,
            id: id.into(),
        })
    }

    pub fn zeros(grid: Grid, s: f64, id: impl Into<String>) -> Result<Self> {
        let m = grid.cell_count();
        Self::from_entries(grid, s, vec![0.0; m * m], id)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Number of cells `M`; the table is `M x M`.
    pub fn size(&self) -> usize {
        self.grid.cell_count()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.size();
        &self.entries[i * m..(i + 1) * m]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn scaled(&self, t: f64) -> Result<Self> {
        let entries = self.entries.iter().map(|v| v * t).collect();
        Self::from_entries(self.grid.clone(), self.s, entries, format!("{}*{t}", self.id))
    }

    pub fn sum(&self, other: &Self) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a + b)
            .collect();
        Self::from_entries(
            self.grid.clone(),
            self.s,
            entries,
            format!("{}+{}", self.id, other.id),
        )
    }

    pub fn transpose(&self) -> Self {
        let m = self.size();
        let mut entries = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                entries[j * m + i] = self.entries[i * m + j];
            }
        }
        Self {
            grid: self.grid.clone(),
            s: self.s,
            entries,
            id: format!("{}^T", self.id),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        let m = self.size();
        (0..m).all(|i| (i + 1..m).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Table of `|x_i - x_j|^(-d-2s)`, with `+inf` on the diagonal.
pub fn reference_profile(grid: &Grid, s: f64) -> Vec<f64> {
    let m = grid.cell_count();
    let h = grid.spacing();
    let expo = -(grid.dim() as f64 + 2.0 * s) / 2.0;
    let mut out = vec![0.0; m * m];
    out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = if i == j {
                f64::INFINITY
            } else {
                (grid.sq_steps(i, j) as f64 * h * h).powf(expo)
            };
        }
    });
    out
}

fn angular_bin(o: &Offset, bins: usize) -> usize {
    // Canonical representative of {o, -o} keeps antipodally symmetric weights
    // exactly symmetric in the table.
    let flip = o[1] < 0 || (o[1] == 0 && o[0] < 0);
    let (x, y) = if flip { (-o[0], -o[1]) } else { (o[0], o[1]) };
    let theta = (y as f64).atan2(x as f64).rem_euclid(2.0 * PI);
    let mut bin = ((theta / (2.0 * PI) * bins as f64).floor() as usize).min(bins - 1);
    if flip {
        if bins.is_multiple_of(2) {
            bin = (bin + bins / 2) % bins;
        } else {
            let t = (theta + PI).rem_euclid(2.0 * PI);
            bin = ((t / (2.0 * PI) * bins as f64).floor() as usize).min(bins - 1);
        }
    }
    bin
}

/// Weight `g(y - x)` of a gallery kernel for the pair of cells `(i, j)`.
fn shape_weight(variant: &KernelVariant, grid: &Grid, i: usize, j: usize) -> Result<f64> {
    let o = grid.offset(i, j);
    Ok(match variant {
        KernelVariant::FractionalLaplacian => 1.0,
        KernelVariant::OneSided { axis } => {
            if grid.is_antipodal(i, j, *axis) || o[*axis] == 0 {
                0.5
            } else if o[*axis] > 0 {
                1.0
            } else {
                0.0
            }
        }
        KernelVariant::Directional { weights } => match grid.dim() {
            1 => match weights.len() {
                1 => weights[0],
                2 => {
                    if grid.is_antipodal(i, j, 0) {
                        0.5 * (weights[0] + weights[1])
                    } else if o[0] > 0 {
                        weights[1]
                    } else {
                        weights[0]
                    }
                }
                n => {
                    return Err(Error::InvalidParameter {
                        name: "weights",
                        reason: format!("one-dimensional directional kernels take 1 or 2 weights, got {n}"),
                    })
                }
            },
            2 => weights[angular_bin(&o, weights.len())],
            d => {
                return Err(Error::InvalidParameter {
                    name: "variant",
                    reason: format!("directional kernels are available for d <= 2, got d = {d}"),
                })
            }
        },
        KernelVariant::Stripes { width } => {
            let steps = width / grid.spacing();
            let band = ((o[0].abs() as f64) / steps + 1e-9).floor() as i64;
            if band % 2 == 0 {
                1.0
            } else {
                0.0
            }
        }
        KernelVariant::Tabulated { .. } => unreachable!("tabulated kernels have no closed form"),
    })
}

/// Standard test kernels on `grid`, all with multiplier 1. The directional
/// entry is `[1, 2]` in one dimension and a two-sided 45-degree cone in two.
pub fn gallery(grid: &Grid, s: f64) -> Result<Vec<KernelSpec>> {
    let directional = match grid.dim() {
        1 => vec![1.0, 2.0],
        _ => cone_weights(16, 0.0, PI / 4.0, true),
    };
    [
        KernelVariant::FractionalLaplacian,
        KernelVariant::OneSided { axis: 0 },
        KernelVariant::Directional { weights: directional },
        KernelVariant::Stripes {
            width: 3.0 * grid.spacing(),
        },
        KernelVariant::Tabulated {
            source: TabulatedSource::RandomMask { density: 0.5, seed: 1 },
        },
    ]
    .into_iter()
    .map(|v| KernelSpec::new(v, s, 1.0))
    .collect()
}

/// The same translation-invariant kernel on the periodic grid with equal
/// spacing. Offsets fold to their minimal image; an antipodal axis gets the
/// mean of both signs. Periodic kernels are returned unchanged.
pub fn periodic_surrogate(k: &TabulatedKernel) -> Result<TabulatedKernel> {
    let free = k.grid();
    if free.is_periodic() {
        return Ok(k.clone());
    }
    let d = free.dim();
    let n = free.cells_per_axis() as i64;
    let span = (2 * n - 1) as usize;
    let slot = |o: &Offset| -> usize {
        (0..d).rev().fold(0, |acc, a| acc * span + (o[a] + n - 1) as usize)
    };
    // One representative pair per offset, anchored so both ends lie in the box.
    let mut profile = vec![0.0; span.pow(d as u32)];
    for (t, v) in profile.iter_mut().enumerate() {
        let mut o: Offset = [0; 3];
        let mut rest = t;
        for oa in o.iter_mut().take(d) {
            *oa = (rest % span) as i64 - (n - 1);
            rest /= span;
        }
        let mut p: Offset = [0; 3];
        for a in 0..d {
            p[a] = (-o[a]).max(0);
        }
        let i = free.index_of(&p).expect("anchor inside box");
        let j = free.shift(i, &o).expect("anchored offset inside box");
        *v = k.get(i, j);
    }
    let m = free.cell_count();
    let bad = (0..m).into_par_iter().find_first(|&i| {
        (0..m).any(|j| {
            let (a, b) = (k.get(i, j), profile[slot(&free.offset(i, j))]);
            (a - b).abs() > 1e-12 * a.abs().max(b.abs())
        })
    });
    if let Some(i) = bad {
        let j = (0..m)
            .find(|&j| {
                let (a, b) = (k.get(i, j), profile[slot(&free.offset(i, j))]);
                (a - b).abs() > 1e-12 * a.abs().max(b.abs())
            })
            .expect("mismatch found above");
        return Err(Error::NotTranslationInvariant { i, j });
    }

    let torus = Grid::periodic(d, free.cells_per_axis(), free.box_length())?;
    let entries: Vec<f64> = (0..m * m)
        .into_par_iter()
        .map(|t| {
            let o = torus.offset(t / m, t % m);
            let ties: Vec<usize> = (0..d).filter(|&a| 2 * o[a] == n).collect();
            let mut sum = 0.0;
            for flips in 0..1usize << ties.len() {
                let mut q = o;
                for (b, &a) in ties.iter().enumerate() {
                    if flips >> b & 1 == 1 {
                        q[a] = -q[a];
                    }
                }
                sum += profile[slot(&q)];
            }
            sum / (1usize << ties.len()) as f64
        })
        .collect();
    TabulatedKernel::from_entries(torus, k.s(), entries, format!("{};periodic", k.id()))
}

/// Tabulates a kernel on `grid`.
pub fn tabulate(spec: &KernelSpec, grid: &Grid) -> Result<TabulatedKernel> {
    spec.validate()?;
    let m = grid.cell_count();
    match &spec.variant {
        KernelVariant::Tabulated {
            source: TabulatedSource::File(path),
        } => {
            let k = read_kernel(path)?;
            if k.grid() != grid {
                return Err(Error::GridMismatch);
            }
            if k.s() != spec.s {
                return Err(Error::InvalidParameter {
                    name: "s",
                    reason: format!("file was written with s = {}, spec says {}", k.s(), spec.s),
                });
            }
            let t = spec.lambda;
            return Ok(if t == 1.0 { k } else { k.scaled(t)? }.with_id(spec.id()));
        }
        KernelVariant::Tabulated {
            source: TabulatedSource::RandomMask { density, seed },
        } => {
            let profile = reference_profile(grid, spec.s);
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut entries = vec![0.0; m * m];
            for i in 0..m {
                for j in i + 1..m {
                    if rng.gen::<f64>() < *density {
                        let v = spec.lambda * profile[i * m + j];
                        entries[i * m + j] = v;
                        entries[j * m + i] = v;
                    }
                }
            }
            return TabulatedKernel::from_entries(grid.clone(), spec.s, entries, spec.id());
        }
        _ => {}
    }
    if let KernelVariant::OneSided { axis } = spec.variant {
        if axis >= grid.dim() {
            return Err(Error::InvalidParameter {
                name: "axis",
                reason: format!("axis {axis} does not exist in dimension {}", grid.dim()),
            });
        }
    }
    let h = grid.spacing();
    let expo = -(grid.dim() as f64 + 2.0 * spec.s) / 2.0;
    let rows: Vec<Result<Vec<f64>>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; m];
            for (j, slot) in row.iter_mut().enumerate() {
                if i == j {
                    continue;
                }
                let w = shape_weight(&spec.variant, grid, i, j)?;
                let v = if w == 0.0 {
                    0.0
                } else {
                    spec.lambda * w * (grid.sq_steps(i, j) as f64 * h * h).powf(expo)
                };
                if !v.is_finite() {
                    return Err(Error::NonFinite { i, j, value: v });
                }
                *slot = v;
            }
            Ok(row)
        })
        .collect();
    let mut entries = Vec::with_capacity(m * m);
    for r in rows {
        entries.extend(r?);
    }
    TabulatedKernel::from_entries(grid.clone(), spec.s, entries, spec.id())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surrogate_matches_periodic_tabulation() {
        for d in [1, 2] {
            let n = if d == 1 { 16 } else { 6 };
            let free = Grid::free(d, n, 2.0).unwrap();
            let torus = Grid::periodic(d, n, 2.0).unwrap();
            let h = free.spacing();
            for v in [
                KernelVariant::FractionalLaplacian,
                KernelVariant::OneSided { axis: 0 },
                KernelVariant::Stripes { width: 2.0 * h },
            ] {
                let spec = KernelSpec::new(v, 0.4, 1.5).unwrap();
                let sur = periodic_surrogate(&tabulate(&spec, &free).unwrap()).unwrap();
                let want = tabulate(&spec, &torus).unwrap();
                assert_eq!(sur.grid(), want.grid());
                for (a, b) in sur.entries().iter().zip(want.entries()) {
                    assert!((a - b).abs() <= 1e-12 * a.abs().max(*b), "{} {a} {b}", spec.id());
                }
            }
        }
    }

    #[test]
    fn surrogate_rejects_masks() {
        let free = Grid::free(1, 12, 1.0).unwrap();
        let spec = KernelSpec::new(
            KernelVariant::Tabulated { source: TabulatedSource::RandomMask { density: 0.5, seed: 2 } },
            0.5,
            1.0,
        )
        .unwrap();
        let k = tabulate(&spec, &free).unwrap();
        assert!(matches!(periodic_surrogate(&k), Err(Error::NotTranslationInvariant { .. })));
    }

    #[test]
    fn fractional_entry_matches_formula() {
        let g = Grid::periodic(1, 8, 2.0).unwrap();
        let k = tabulate(&KernelSpec::fractional(0.5, 1.0).unwrap(), &g).unwrap();
        // cells 0 and 2 are 0.5 apart: 0.5^(-2) = 4
        assert!((k.get(0, 2) - 4.0).abs() < 1e-12);
        assert_eq!(k.get(3, 3), 0.0);
        assert!(k.is_symmetric());
    }

    #[test]
    fn one_sided_support() {
        let g = Grid::free(1, 8, 1.0).unwrap();
        let spec = KernelSpec::new(KernelVariant::OneSided { axis: 0 }, 0.5, 1.0).unwrap();
        let k = tabulate(&spec, &g).unwrap();
        assert_eq!(k.get(5, 2), 0.0);
        assert!(k.get(2, 5) > 0.0);
        assert!(!k.is_symmetric());
    }

    #[test]
    fn one_sided_plus_transpose_is_fractional() {
        for (dim, n) in [(1, 16), (2, 6)] {
            let g = Grid::periodic(dim, n, 1.0).unwrap();
            let one = tabulate(&KernelSpec::new(KernelVariant::OneSided { axis: 0 }, 0.4, 1.0).unwrap(), &g).unwrap();
            let frac = tabulate(&KernelSpec::fractional(0.4, 1.0).unwrap(), &g).unwrap();
            let sum = one.sum(&one.transpose()).unwrap();
            for (a, b) in sum.entries().iter().zip(frac.entries()) {
                assert!((a - b).abs() <= 1e-15 * b.abs());
            }
        }
    }

    #[test]
    fn stripes_degenerate_pairs_vanish() {
        let g = Grid::periodic(1, 64, 1.0).unwrap();
        let h = g.spacing();
        let spec = KernelSpec::new(KernelVariant::Stripes { width: 3.0 * h }, 0.5, 1.0).unwrap();
        let k = tabulate(&spec, &g).unwrap();
        assert!(k.get(0, 2) > 0.0); // band 0
        assert_eq!(k.get(0, 3), 0.0); // band 1
        assert_eq!(k.get(0, 5), 0.0);
        assert!(k.get(0, 6) > 0.0); // band 2
        assert!(k.is_symmetric());
    }

    #[test]
    fn directional_double_cone_is_symmetric() {
        let g = Grid::periodic(2, 12, 1.0).unwrap();
        let w = cone_weights(16, 0.0, PI / 4.0, true);
        let spec = KernelSpec::new(KernelVariant::Directional { weights: w }, 0.5, 1.0).unwrap();
        let k = tabulate(&spec, &g).unwrap();
        assert!(k.is_symmetric());
        let frac_row = reference_profile(&g, 0.5);
        let on = (0..g.cell_count()).filter(|&j| k.get(0, j) > 0.0).count();
        assert!(on > 0 && on < g.cell_count() - 1);
        // along the axis the kernel equals the fractional one
        let j = g.index_of(&[3, 0, 0]).unwrap();
        assert!((k.get(0, j) - frac_row[j]).abs() < 1e-12 * frac_row[j]);
        let j = g.index_of(&[0, 3, 0]).unwrap();
        assert_eq!(k.get(0, j), 0.0);
    }

    #[test]
    fn random_mask_is_symmetric_and_seeded() {
        let g = Grid::periodic(1, 16, 1.0).unwrap();
        let spec = KernelSpec::new(
            KernelVariant::Tabulated {
                source: TabulatedSource::RandomMask { density: 0.5, seed: 7 },
            },
            0.5,
            1.0,
        )
        .unwrap();
        let a = tabulate(&spec, &g).unwrap();
        let b = tabulate(&spec, &g).unwrap();
        assert_eq!(a, b);
        assert!(a.is_symmetric());
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(KernelSpec::fractional(1.0, 1.0).is_err());
        assert!(KernelSpec::fractional(0.5, 0.0).is_err());
        assert!(KernelSpec::new(KernelVariant::Stripes { width: -1.0 }, 0.5, 1.0).is_err());
        let g = Grid::periodic(1, 8, 1.0).unwrap();
        let spec = KernelSpec::new(KernelVariant::OneSided { axis: 1 }, 0.5, 1.0).unwrap();
        assert!(tabulate(&spec, &g).is_err());
        assert!(TabulatedKernel::from_entries(g.clone(), 0.5, vec![-1.0; 64], "x").is_err());
        assert!(TabulatedKernel::from_entries(g, 0.5, vec![f64::NAN; 64], "x").is_err());
    }
}
