use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{reference_profile, TabulatedKernel};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Which of the three equivalent density conditions to test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AssumptionVariant {
    /// Base point anywhere in the ball.
    A1,
    /// Base point on the boundary sphere.
    A2,
    /// Base point at distance `(1 + c) R` from the center.
    A3 { c: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterSampling {
    /// Exhaustive when the grid has at most 4096 cells, otherwise 512 random centers.
    Auto,
    Exhaustive,
    Random { count: usize },
}

/// Finite, seeded family of (ball, base point) samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// Physical radii of the sampled balls.
    pub radii: Vec<f64>,
    pub centers: CenterSampling,
    /// Cap on the number of base points tried per ball (all when `None`).
    pub base_points: Option<usize>,
    pub seed: u64,
}

const EXHAUSTIVE_LIMIT: usize = 4096;

impl SamplingPlan {
    /// Radii `k h` for `k` in `steps`.
    pub fn ladder(grid: &Grid, steps: &[usize]) -> Self {
        Self {
            radii: steps.iter().map(|&k| k as f64 * grid.spacing()).collect(),
            centers: CenterSampling::Auto,
            base_points: None,
            seed: 0,
        }
    }

    /// Radii `2h, 3h, 4h, 6h, 8h, 12h, ...` up to a quarter of the box.
    pub fn standard(grid: &Grid) -> Self {
        let cap = grid.cells_per_axis() / 4;
        let mut steps = Vec::new();
        let mut k = 2;
        while k <= cap {
            steps.push(k);
            if k + k / 2 <= cap {
                steps.push(k + k / 2);
            }
            k *= 2;
        }
        if steps.is_empty() {
            steps.push(2);
        }
        Self::ladder(grid, &steps)
    }

    fn center_list(&self, grid: &Grid) -> Vec<usize> {
        let m = grid.cell_count();
        let exhaustive = match self.centers {
            CenterSampling::Auto => m <= EXHAUSTIVE_LIMIT,
            CenterSampling::Exhaustive => true,
            CenterSampling::Random { count } => count >= m,
        };
        if exhaustive {
            return (0..m).collect();
        }
        let count = match self.centers {
            CenterSampling::Random { count } => count,
            _ => 512,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut picked = sample(&mut rng, m, count).into_vec();
        picked.sort_unstable();
        picked
    }
}

/// The (ball, base point) pair realizing the reported density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub center: usize,
    pub radius: f64,
    pub base_point: usize,
    pub qualifying: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub lambda: f64,
    pub mu_hat: f64,
    pub witness: Witness,
    pub variant: AssumptionVariant,
    pub c_offset: Option<f64>,
    /// Largest distance between a requested base-point sphere and the cell
    /// used in its place (zero for A1).
    pub snapping_distance: f64,
    pub samples: usize,
}

/// `table[x * M + z]` is true iff `K(x, z) >= lambda |x - z|^(-d-2s)`; the
/// diagonal is false.
pub fn nondeg_table(k: &TabulatedKernel, lambda: f64) -> Vec<bool> {
    let profile = reference_profile(k.grid(), k.s());
    let m = k.size();
    let mut out = vec![false; m * m];
    out.par_chunks_mut(m).enumerate().for_each(|(x, row)| {
        let kr = k.row(x);
        for z in 0..m {
            row[z] = z != x && kr[z] >= lambda * profile[x * m + z];
        }
    });
    out
}

struct Sample {
    density: (usize, usize),
    witness: Witness,
    snap: f64,
}

fn better(a: (usize, usize), b: (usize, usize)) -> bool {
    // a/b-style comparison of exact rationals; strict so ties keep the first.
    (a.0 as u128) * (b.1 as u128) < (b.0 as u128) * (a.1 as u128)
}

/// Measures the worst density of nondegenerate directions over a sampling plan.
///
/// The density at `(B, x)` is the fraction of cells of `B \ {x}` at which
/// `K(x, .)` is at least `lambda |x - .|^(-d-2s)`.
pub fn check_assumption(
    k: &TabulatedKernel,
    lambda: f64,
    variant: AssumptionVariant,
    plan: &SamplingPlan,
) -> Result<AssumptionReport> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidParameter {
            name: "lambda",
            reason: format!("must be positive, got {lambda}"),
        });
    }
    let c_offset = match variant {
        AssumptionVariant::A3 { c } => {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidParameter {
                    name: "c",
                    reason: format!("offset must be positive, got {c}"),
                });
            }
            Some(c)
        }
        _ => None,
    };
    let grid = k.grid();
    let h = grid.spacing();
    if plan.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::InvalidParameter {
            name: "radii",
            reason: "ball radii must be positive".into(),
        });
    }
    let centers = plan.center_list(grid);
    if centers.is_empty() || plan.radii.is_empty() {
        return Err(Error::EmptySampling);
    }
    let table = nondeg_table(k, lambda);
    let m = grid.cell_count();

    let tasks: Vec<(usize, usize)> = (0..plan.radii.len())
        .flat_map(|ri| centers.iter().map(move |&c| (ri, c)))
        .collect();
    let offsets: Vec<_> = plan
        .radii
        .iter()
        .map(|r| grid.centered_offsets(r / h))
        .collect();

    let per_task: Vec<Option<Sample>> = tasks
        .par_iter()
        .enumerate()
        .map(|(t, &(ri, c))| {
            let radius = plan.radii[ri];
            let cells = grid.centered_ball(c, &offsets[ri]);
            if cells.is_empty() {
                return None;
            }
            let (bases, snap) = match variant {
                AssumptionVariant::A1 => (cells.clone(), 0.0),
                AssumptionVariant::A2 => sphere_cells(grid, c, radius / h),
                AssumptionVariant::A3 { c: off } => sphere_cells(grid, c, (1.0 + off) * radius / h),
            };
            let bases = match plan.base_points {
                Some(cap) if bases.len() > cap => {
                    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let mut idx = sample(&mut rng, bases.len(), cap).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|i| bases[i]).collect()
                }
                _ => bases,
            };
            let mut best: Option<Sample> = None;
            for &x in &bases {
                let row = &table[x * m..(x + 1) * m];
                let inside = cells.contains(&x);
                let total = cells.len() - usize::from(inside);
                if total == 0 {
                    continue;
                }
                let qualifying = cells.iter().filter(|&&z| row[z]).count();
                let dens = (qualifying, total);
                if best.as_ref().is_none_or(|b| better(dens, b.density)) {
                    best = Some(Sample {
                        density: dens,
                        witness: Witness {
                            center: c,
                            radius,
                            base_point: x,
                            qualifying,
                            total,
                        },
                        snap,
                    });
                }
            }
            best.map(|mut b| {
                b.snap = snap;
                b
            })
        })
        .collect();

    let mut best: Option<Sample> = None;
    let mut samples = 0;
    let mut snapping = 0.0f64;
    for s in per_task.into_iter().flatten() {
        samples += 1;
        snapping = snapping.max(s.snap);
        if best.as_ref().is_none_or(|b| better(s.density, b.density)) {
            best = Some(s);
        }
    }
    let best = best.ok_or(Error::EmptySampling)?;
    Ok(AssumptionReport {
        lambda,
        mu_hat: best.witness.qualifying as f64 / best.witness.total as f64,
        witness: best.witness,
        variant,
        c_offset,
        snapping_distance: snapping * h,
        samples,
    })
}

/// Cells within half a step of the sphere of radius `target` (in steps) around
/// cell `c`, or the nearest cells when none is that close. Returns the cells
/// and the largest snapping distance in steps.
fn sphere_cells(grid: &Grid, c: usize, target: f64) -> (Vec<usize>, f64) {
    let m = grid.cell_count();
    let gap = |x: usize| ((grid.sq_steps(c, x) as f64).sqrt() - target).abs();
    let close: Vec<usize> = (0..m).filter(|&x| gap(x) <= 0.5).collect();
    if !close.is_empty() {
        let snap = close.iter().map(|&x| gap(x)).fold(0.0, f64::max);
        return (close, snap);
    }
    let best = (0..m).map(gap).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return (Vec::new(), 0.0);
    }
    let near: Vec<usize> = (0..m).filter(|&x| gap(x) == best).collect();
    (near, best)
}
