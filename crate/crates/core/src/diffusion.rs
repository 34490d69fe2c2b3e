//! Auxiliary kernel iteration.
//!
//! `K^{j+1}(x, y) = h^d sum_z min(K^j(x, z) eta1(x, y, z), K(y, z) eta2(x, y, z))`
//! with
//! `eta1 = c_a rho^-d 1{|y - z| < 4 rho}`, `rho = rho_delta^j(x, z)`, and
//! `eta2 = c_b |y - z|^(2s) max(|x - z|, |y - z|)^(-d-2s)`.
//!
//! Radii `rho` live on the ladder `k h`, `k >= 1`, with `5 k h < |x - z|`, and
//! are stored as the integer `k` (0 meaning no admissible radius).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{unit_ball_volume, Grid, Offset};
use crate::kernels::{check_order, TabulatedKernel};

/// Tolerance on the discrete normalization sums.
pub const ETA_TOLERANCE: f64 = 1e-9;

/// Continuum constants `(c_a, c_b) = (1 / (4^d w_d), 1 / (w_d (1 + d / 2s)))`.
pub fn normalization_constants(d: usize, s: f64) -> Result<(f64, f64)> {
    check_order(s)?;
    if d == 0 || d > 3 {
        return Err(Error::InvalidParameter {
            name: "dim",
            reason: format!("dimension must be 1, 2 or 3, got {d}"),
        });
    }
    let w = unit_ball_volume(d);
    let c_a = 1.0 / (4f64.powi(d as i32) * w);
    let c_b = 1.0 / (w * (1.0 + d as f64 / (2.0 * s)));
    Ok((c_a, c_b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaParams {
    pub c_a: f64,
    pub c_b: f64,
    pub s: f64,
    pub delta: f64,
}

impl EtaParams {
    pub fn continuum(d: usize, s: f64, delta: f64) -> Result<Self> {
        check_delta(delta)?;
        let (c_a, c_b) = normalization_constants(d, s)?;
        Ok(Self { c_a, c_b, s, delta })
    }

    /// Continuum constants, lowered where needed so that the lattice sums
    /// stay below one. Lattice balls around a cell hold slightly more than
    /// their continuum volume, which matters for `eta2` at short range.
    pub fn for_grid(grid: &Grid, s: f64, delta: f64) -> Result<Self> {
        let mut eta = Self::continuum(grid.dim(), s, delta)?;
        let tables = Tables::new(grid, s);
        let kmax = ladder_max(tables.max_sq);
        for k in 1..=kmax as i64 {
            let count = grid.centered_offsets(4.0 * k as f64).len() as f64;
            eta.c_a = eta.c_a.min((k as f64).powi(grid.dim() as i32) / count);
        }
        let (worst, _) = eta2_column_profile(grid, &tables, 1.0);
        if worst > 0.0 {
            eta.c_b = eta.c_b.min(1.0 / worst);
        }
        Ok(eta)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "delta",
            reason: format!("must lie in (0, 1), got {delta}"),
        })
    }
}

/// Largest `k` with `25 k^2 < d2`, i.e. `k h < |x - z| / 5` for squared step
/// distance `d2`.
pub fn ladder_max(d2: i64) -> u8 {
    let mut k: i64 = 0;
    while 25 * (k + 1) * (k + 1) < d2 {
        k += 1;
    }
    k.min(u8::MAX as i64) as u8
}

/// Powers of squared step distances used by the weights.
#[derive(Clone, Debug)]
struct Tables {
    /// `(d2 h^2)^s`
    pow_s: Vec<f64>,
    /// `(d2 h^2)^(-(d+2s)/2)`, zero at `d2 = 0`.
    pow_neg: Vec<f64>,
    max_sq: i64,
}

impl Tables {
    fn new(grid: &Grid, s: f64) -> Self {
        let n = grid.cells_per_axis() as i64;
        let reach = if grid.is_periodic() { n / 2 } else { n - 1 };
        let max_sq = grid.dim() as i64 * reach * reach;
        let h = grid.spacing();
        let expo = -(grid.dim() as f64 + 2.0 * s) / 2.0;
        let pow_s = (0..=max_sq).map(|q| (q as f64 * h * h).powf(s)).collect();
        let pow_neg = (0..=max_sq)
            .map(|q| if q == 0 { 0.0 } else { (q as f64 * h * h).powf(expo) })
            .collect();
        Self { pow_s, pow_neg, max_sq }
    }
}

/// Every displacement between two cells of the grid: the minimal-image box
/// when periodic, `[-(N-1), N-1]^d` otherwise.
fn all_offsets(grid: &Grid) -> Vec<Offset> {
    let n = grid.cells_per_axis() as i64;
    let (lo, hi) = if grid.is_periodic() {
        (-(n - 1) / 2, n / 2)
    } else {
        (-(n - 1), n - 1)
    };
    let d = grid.dim();
    let span = (hi - lo + 1) as usize;
    (0..span.pow(d as u32))
        .map(|mut t| {
            let mut o = [0i64; 3];
            for slot in o.iter_mut().take(d) {
                *slot = lo + (t % span) as i64;
                t /= span;
            }
            o
        })
        .collect()
}

/// Upper bound for `max_{(y,z)} h^d sum_x eta2(x, y, z)` and the squared step
/// distance `|y - z|^2` where it is attained. Exact on periodic grids.
fn eta2_column_profile(grid: &Grid, t: &Tables, c_b: f64) -> (f64, i64) {
    let offsets = all_offsets(grid);
    let sq: Vec<i64> = offsets.iter().map(|o| o.iter().map(|v| v * v).sum()).collect();
    let mut radii: Vec<i64> = sq.iter().copied().filter(|&q| q > 0).collect();
    radii.sort_unstable();
    radii.dedup();
    let hd = grid.cell_volume();
    let sums: Vec<f64> = radii
        .par_iter()
        .map(|&r2| {
            let tail: f64 = sq.iter().map(|&q| t.pow_neg[q.max(r2) as usize]).sum();
            c_b * t.pow_s[r2 as usize] * tail * hd
        })
        .collect();
    sums.iter()
        .zip(&radii)
        .fold((0.0, 0), |best, (&v, &r2)| if v > best.0 { (v, r2) } else { best })
}

/// Row of the nondegeneracy set `{v : K(x, v) >= a |x - v|^(-d-2s)}`, diagonal
/// false.
pub fn nondeg_row(k: &TabulatedKernel, x: usize, a: f64) -> Vec<bool> {
    let grid = k.grid();
    let h = grid.spacing();
    let expo = -(grid.dim() as f64 + 2.0 * k.s()) / 2.0;
    let row = k.row(x);
    (0..k.size())
        .map(|v| v != x && row[v] >= a * (grid.sq_steps(x, v) as f64 * h * h).powf(expo))
        .collect()
}

fn ball_density_ok(count: usize, total: usize, delta: f64) -> bool {
    total > 0 && count as f64 >= (1.0 - delta) * total as f64
}

/// `rho_delta(x, z)`: the largest ladder radius `r = k h` with `5r < |x - z|`
/// such that a cell center `v` with `|z - v| < r` carries a ball `B_r(v)` in
/// which `mask` has density at least `1 - delta`. Zero if none.
pub fn rho_delta(grid: &Grid, delta: f64, x: usize, z: usize, mask: &[bool]) -> f64 {
    if x == z {
        return 0.0;
    }
    let kmax = ladder_max(grid.sq_steps(x, z));
    for k in (1..=kmax).rev() {
        let offs = grid.centered_offsets(k as f64);
        let hit = grid.centered_ball(z, &offs).into_iter().any(|v| {
            let ball = grid.centered_ball(v, &offs);
            let count = ball.iter().filter(|&&c| mask[c]).count();
            ball_density_ok(count, ball.len(), delta)
        });
        if hit {
            return k as f64 * grid.spacing();
        }
    }
    0.0
}

/// `rho_delta(x, .)` for every cell, as ladder steps.
pub fn rho_row(grid: &Grid, delta: f64, x: usize, mask: &[bool]) -> Vec<u8> {
    let m = grid.cell_count();
    let d2: Vec<i64> = (0..m).map(|z| grid.sq_steps(x, z)).collect();
    let kmax = d2.iter().map(|&q| ladder_max(q)).max().unwrap_or(0);
    let mut rho = vec![0u8; m];
    let mut reach = vec![false; m];
    for k in 1..=kmax {
        let offs = grid.centered_offsets(k as f64);
        reach.iter_mut().for_each(|r| *r = false);
        for v in 0..m {
            let ball = grid.centered_ball(v, &offs);
            let count = ball.iter().filter(|&&c| mask[c]).count();
            if ball_density_ok(count, ball.len(), delta) {
                for z in ball {
                    reach[z] = true;
                }
            }
        }
        let lim = 25 * (k as i64) * (k as i64);
        for z in 0..m {
            if reach[z] && lim < d2[z] {
                rho[z] = k;
            }
        }
    }
    rho
}

/// Smallest-index center `v` with `|z - v| < k h` whose ball `B_{kh}(v)` has
/// `mask`-density at least `1 - delta`.
pub fn certifying_center(grid: &Grid, delta: f64, mask: &[bool], z: usize, k: u8) -> Option<usize> {
    let offs = grid.centered_offsets(k as f64);
    let mut cands = grid.centered_ball(z, &offs);
    cands.sort_unstable();
    cands.into_iter().find(|&v| {
        let ball = grid.centered_ball(v, &offs);
        let count = ball.iter().filter(|&&c| mask[c]).count();
        ball_density_ok(count, ball.len(), delta)
    })
}

/// A nonnegative weight `eta(x, y, z)` on triples of cells.
pub trait Weight: Sync {
    fn eval(&self, x: usize, y: usize, z: usize) -> f64;
}

impl<F> Weight for F
where
    F: Fn(usize, usize, usize) -> f64 + Sync,
{
    fn eval(&self, x: usize, y: usize, z: usize) -> f64 {
        self(x, y, z)
    }
}

/// Which variable a normalization sum runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SumOver {
    /// `sum_y eta(x, y, z) h^d` for each `(x, z)`.
    Y,
    /// `sum_x eta(x, y, z) h^d` for each `(y, z)`.
    X,
}

/// Largest normalization sum of `w` by brute force, and the pair attaining it.
pub fn eta_max_sum(grid: &Grid, w: &impl Weight, over: SumOver) -> (f64, (usize, usize)) {
    let m = grid.cell_count();
    let hd = grid.cell_volume();
    let rows: Vec<(f64, (usize, usize))> = (0..m)
        .into_par_iter()
        .map(|a| {
            let mut best = (0.0, (a, 0));
            for b in 0..m {
                let mut acc = 0.0;
                for t in 0..m {
                    acc += match over {
                        SumOver::Y => w.eval(a, t, b),
                        SumOver::X => w.eval(t, a, b),
                    };
                }
                if acc * hd > best.0 {
                    best = (acc * hd, (a, b));
                }
            }
            best
        })
        .collect();
    rows.into_iter()
        .fold((0.0, (0, 0)), |acc, r| if r.0 > acc.0 { r } else { acc })
}

/// `K3[i][j] = h^d sum_z min(K1[i][z] eta1(i,j,z), K2[j][z] eta2(i,j,z))`.
///
/// Fails if `eta1` summed over `y` or `eta2` summed over `x` exceeds one.
pub fn combine_kernels(
    k1: &TabulatedKernel,
    k2: &TabulatedKernel,
    eta1: &impl Weight,
    eta2: &impl Weight,
) -> Result<TabulatedKernel> {
    if k1.grid() != k2.grid() {
        return Err(Error::GridMismatch);
    }
    let grid = k1.grid();
    let (s1, at1) = eta_max_sum(grid, eta1, SumOver::Y);
    if s1 > 1.0 + ETA_TOLERANCE {
        return Err(Error::EtaNormalization {
            which: "eta1",
            sum: s1,
            at: at1,
        });
    }
    let (s2, at2) = eta_max_sum(grid, eta2, SumOver::X);
    if s2 > 1.0 + ETA_TOLERANCE {
        return Err(Error::EtaNormalization {
            which: "eta2",
            sum: s2,
            at: at2,
        });
    }
    let m = k1.size();
    let hd = grid.cell_volume();
    let mut entries = vec![0.0; m * m];
    entries.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        for (j, slot) in row.iter_mut().enumerate() {
            if i == j {
                continue;
            }
            let mut acc = 0.0;
            for z in 0..m {
                let a = k1.get(i, z) * eta1.eval(i, j, z);
                let b = k2.get(j, z) * eta2.eval(i, j, z);
                acc += a.min(b);
            }
            *slot = acc * hd;
        }
    });
    TabulatedKernel::from_entries(
        grid.clone(),
        k1.s(),
        entries,
        format!("combine({},{})", k1.id(), k2.id()),
    )
}

/// `eta1^j` for a fixed table of ladder radii `rho[x * M + z]`.
pub struct Eta1<'a> {
    grid: &'a Grid,
    rho: &'a [u8],
    /// `c_a (k h)^-d` by ladder step `k`.
    scale: Vec<f64>,
}

impl<'a> Eta1<'a> {
    pub fn new(grid: &'a Grid, rho: &'a [u8], c_a: f64) -> Self {
        let kmax = rho.iter().copied().max().unwrap_or(0);
        let h = grid.spacing();
        let scale = (0..=kmax)
            .map(|k| if k == 0 { 0.0 } else { c_a * (k as f64 * h).powi(-(grid.dim() as i32)) })
            .collect();
        Self { grid, rho, scale }
    }
}

impl Weight for Eta1<'_> {
    fn eval(&self, x: usize, y: usize, z: usize) -> f64 {
        let k = self.rho[x * self.grid.cell_count() + z] as i64;
        if k == 0 || self.grid.sq_steps(y, z) >= 16 * k * k {
            0.0
        } else {
            self.scale[k as usize]
        }
    }
}

/// `eta2(x, y, z) = c_b |y - z|^(2s) max(|x - z|, |y - z|)^(-d-2s)`, zero at `y = z`.
pub struct Eta2<'a> {
    grid: &'a Grid,
    c_b: f64,
    tables: Tables,
}

impl<'a> Eta2<'a> {
    pub fn new(grid: &'a Grid, c_b: f64, s: f64) -> Self {
        Self {
            grid,
            c_b,
            tables: Tables::new(grid, s),
        }
    }

    #[inline]
    fn at_sq(&self, dxz: i64, dyz: i64) -> f64 {
        if dyz == 0 {
            return 0.0;
        }
        self.c_b * self.tables.pow_s[dyz as usize] * self.tables.pow_neg[dxz.max(dyz) as usize]
    }
}

impl Weight for Eta2<'_> {
    fn eval(&self, x: usize, y: usize, z: usize) -> f64 {
        self.at_sq(self.grid.sq_steps(x, z), self.grid.sq_steps(y, z))
    }
}

/// State of the auxiliary iteration after `j` steps.
#[derive(Clone, Debug)]
pub struct DiffusionState {
    pub j: usize,
    /// `a_j`; `None` until calibrated.
    pub threshold: Option<f64>,
    /// `a_{j-1}`, the threshold used to build `K^j`.
    pub previous_threshold: Option<f64>,
    /// `K^j`.
    pub kernel: TabulatedKernel,
    pub eta: EtaParams,
    /// `C_j` with `E_{K^j} <= C_j E_K`.
    pub domination_constant: f64,
    /// Ladder radii `rho_delta^{j-1}(x, z)` used to build `K^j` (absent at `j = 0`).
    pub rho: Option<Vec<u8>>,
    pub diagnostics: Option<StepDiagnostics>,
}

/// Checks performed while building one auxiliary kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub eta1_max_sum: f64,
    pub eta2_max_sum: f64,
    /// Contributing triples checked against `|x - z| < 5 |x - y|`.
    pub localized_triples: u64,
    /// Pairs `(x, z)` with a positive ladder radius.
    pub positive_rho_pairs: u64,
}

impl DiffusionState {
    pub fn new(kernel: TabulatedKernel, lambda: f64, eta: EtaParams) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidParameter {
                name: "lambda",
                reason: format!("must be positive, got {lambda}"),
            });
        }
        Ok(Self {
            j: 0,
            threshold: Some(lambda),
            previous_threshold: None,
            kernel,
            eta,
            domination_constant: 1.0,
            rho: None,
            diagnostics: None,
        })
    }

    pub fn threshold(&self) -> Result<f64> {
        self.threshold
            .ok_or_else(|| Error::Precondition(format!("threshold a_{} is not calibrated", self.j)))
    }

    /// Row `x` of `N^j`.
    pub fn nondeg_row(&self, x: usize) -> Result<Vec<bool>> {
        Ok(nondeg_row(&self.kernel, x, self.threshold()?))
    }
}

/// Builds `K^{j+1}` from `state` (which must carry `a_j`) and the base kernel.
/// The returned state has no threshold yet.
pub fn diffuse_step(state: &DiffusionState, base: &TabulatedKernel) -> Result<DiffusionState> {
    let a = state.threshold()?;
    let grid = state.kernel.grid();
    if base.grid() != grid {
        return Err(Error::GridMismatch);
    }
    let m = grid.cell_count();
    let hd = grid.cell_volume();
    let delta = state.eta.delta;
    check_delta(delta)?;

    let rows: Vec<Vec<u8>> = (0..m)
        .into_par_iter()
        .map(|x| rho_row(grid, delta, x, &nondeg_row(&state.kernel, x, a)))
        .collect();
    let rho: Vec<u8> = rows.concat();
    let eta1 = Eta1::new(grid, &rho, state.eta.c_a);
    let eta2 = Eta2::new(grid, state.eta.c_b, state.eta.s);

    // Normalization, from the structure of the weights: eta1 is constant on
    // B_{4 rho}(z), and the eta2 column sums depend only on |y - z| (bounded
    // above by the full displacement set on free grids).
    let kmax = rho.iter().copied().max().unwrap_or(0);
    let offsets4: Vec<Vec<Offset>> = (0..=kmax)
        .map(|k| grid.centered_offsets(4.0 * k as f64))
        .collect();
    let mut eta1_max = 0.0f64;
    let mut eta1_at = (0, 0);
    for (idx, &k) in rho.iter().enumerate() {
        if k == 0 {
            continue;
        }
        let sum = eta1.scale[k as usize] * offsets4[k as usize].len() as f64 * hd;
        if sum > eta1_max {
            eta1_max = sum;
            eta1_at = (idx / m, idx % m);
        }
    }
    if eta1_max > 1.0 + ETA_TOLERANCE {
        return Err(Error::EtaNormalization {
            which: "eta1",
            sum: eta1_max,
            at: eta1_at,
        });
    }
    let (eta2_max, r2) = eta2_column_profile(grid, &eta2.tables, state.eta.c_b);
    if eta2_max > 1.0 + ETA_TOLERANCE {
        return Err(Error::EtaNormalization {
            which: "eta2",
            sum: eta2_max,
            at: (r2 as usize, 0),
        });
    }

    // Each row x is accumulated over z in increasing order, exactly as in
    // `combine_kernels`; only triples with eta1 != 0 are visited.
    type Row = Result<(Vec<f64>, u64)>;
    let built: Vec<Row> = (0..m)
        .into_par_iter()
        .map(|x| {
            let mut acc = vec![0.0; m];
            let mut checked = 0u64;
            let kx = state.kernel.row(x);
            for z in 0..m {
                let k = rho[x * m + z];
                if k == 0 {
                    continue;
                }
                let first = kx[z] * eta1.scale[k as usize];
                let dxz = grid.sq_steps(x, z);
                for y in grid.centered_ball(z, &offsets4[k as usize]) {
                    if y == z {
                        continue;
                    }
                    // |y - z| < 4 rho < 4 |x - z| / 5 forces |x - z| < 5 |x - y|.
                    if dxz >= 25 * grid.sq_steps(x, y) {
                        return Err(Error::LocalizationViolated { x, y, z });
                    }
                    checked += 1;
                    let second = base.get(y, z) * eta2.at_sq(dxz, grid.sq_steps(y, z));
                    acc[y] += first.min(second);
                }
            }
            for v in acc.iter_mut() {
                *v *= hd;
            }
            Ok((acc, checked))
        })
        .collect();
    let mut entries = Vec::with_capacity(m * m);
    let mut localized = 0;
    for r in built {
        let (row, c) = r?;
        entries.extend(row);
        localized += c;
    }
    let kernel = TabulatedKernel::from_entries(
        grid.clone(),
        state.kernel.s(),
        entries,
        format!("K^{}", state.j + 1),
    )?;
    let positive = rho.iter().filter(|&&k| k > 0).count() as u64;
    Ok(DiffusionState {
        j: state.j + 1,
        threshold: None,
        previous_threshold: Some(a),
        kernel,
        eta: state.eta.clone(),
        domination_constant: 2.0 * (state.domination_constant + 1.0),
        rho: Some(rho),
        diagnostics: Some(StepDiagnostics {
            eta1_max_sum: eta1_max,
            eta2_max_sum: eta2_max,
            localized_triples: localized,
            positive_rho_pairs: positive,
        }),
    })
}

/// `min_{x != y} K(x, y) |x - y|^(d+2s)` over pairs with `|x - y|^2 > min_sq h^2`.
pub fn min_ratio(k: &TabulatedKernel, min_sq: i64) -> Option<f64> {
    let grid = k.grid();
    let h = grid.spacing();
    let expo = (grid.dim() as f64 + 2.0 * k.s()) / 2.0;
    let m = k.size();
    let rows: Vec<Option<f64>> = (0..m)
        .into_par_iter()
        .map(|x| {
            (0..m)
                .filter(|&y| y != x && grid.sq_steps(x, y) > min_sq)
                .map(|y| k.get(x, y) * (grid.sq_steps(x, y) as f64 * h * h).powf(expo))
                .reduce(f64::min)
        })
        .collect();
    rows.into_iter().flatten().reduce(f64::min)
}
