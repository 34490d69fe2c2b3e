//! Coercivity constants: the constructive bound from the auxiliary kernels
//! and the Rayleigh-quotient minimum it has to stay below.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forms::{energy_on, hs_seminorm_local_sq};
use crate::geometry::{ball_chain, cover_count_bound, cover_radius, cover_unit_ball, overlap_measure, ChainKind};
use crate::grid::{unit_ball_volume, Ball, Grid, GridFunction};
use crate::inkspots::{saturation_iterations, SaturationParams, SaturationRun};
use crate::kernels::{check_order, periodic_surrogate, reference_profile, TabulatedKernel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative change of the quotient between sweeps that counts as converged.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Bound on the relative residual checked once after convergence.
    pub residual_tol: f64,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_sweeps: 2000,
            residual_tol: 1e-5,
            seed: 0,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub sweeps: usize,
    /// Quotient after each sweep, starting with the initial guess.
    pub history: Vec<f64>,
    /// `|A x - q B x|` in the `B^+` norm over `trace(A) / trace(B)`; bounds
    /// the distance from the quotient to the spectrum on that scale.
    pub residual: f64,
    pub unknowns: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rayleigh {
    pub value: f64,
    /// Unit Euclidean norm, largest entry positive.
    pub minimizer: GridFunction,
    pub diagnostics: SolverDiagnostics,
}

/// Symmetrized graph Laplacian `L` on `cells`, so that the pair sum
/// `sum_{i != j} (u_i - u_j)^2 w(i, j)` equals `2 u^T L u`.
fn laplacian(cells: &[usize], w: impl Fn(usize, usize) -> f64 + Sync) -> DMatrix<f64> {
    let n = cells.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    // Column-major storage; the matrix is symmetric so column c is row c.
    m.as_mut_slice().par_chunks_mut(n).enumerate().for_each(|(c, col)| {
        let i = cells[c];
        let mut diag = 0.0;
        for (r, slot) in col.iter_mut().enumerate() {
            if r == c {
                continue;
            }
            let j = cells[r];
            let v = 0.5 * (w(i, j) + w(j, i));
            *slot = -v;
            diag += v;
        }
        col[c] = diag;
    });
    m
}

fn kernel_laplacian(k: &TabulatedKernel, cells: &[usize]) -> DMatrix<f64> {
    laplacian(cells, |i, j| k.get(i, j))
}

fn reference_laplacian(grid: &Grid, s: f64, cells: &[usize]) -> DMatrix<f64> {
    let table = reference_profile(grid, s);
    let m = grid.cell_count();
    laplacian(cells, |i, j| table[i * m + j])
}

fn project_mean_zero(v: &mut DVector<f64>) {
    let mean = v.mean();
    v.add_scalar_mut(-mean);
}

fn quotient(a: &DMatrix<f64>, b: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(a * x)) / x.dot(&(b * x))
}

/// Smallest `q` with `A x = q B x` over mean-zero `x`, where both matrices
/// are symmetric positive semidefinite and annihilate constants, and `B` is
/// definite on mean-zero vectors.
///
/// Locally optimal preconditioned iteration: each sweep minimizes the
/// quotient over `span{x, B^+ r, p}`, so the quotient never increases.
pub(crate) fn generalized_min(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<(f64, DVector<f64>, SolverDiagnostics)> {
    let n = a.nrows();
    if n < 2 {
        return Err(Error::Precondition(format!("need at least 2 unknowns, got {n}")));
    }
    if !(opts.tol > 0.0 && opts.residual_tol > 0.0 && opts.max_sweeps > 0) {
        return Err(Error::InvalidParameter {
            name: "solver",
            reason: "tolerances and sweep cap must be positive".into(),
        });
    }
    let alpha = b.trace() / (n * n) as f64;
    // Typical size of the quotient; absolute tolerances are taken against it.
    let spread = (a.trace() / b.trace()).max(f64::MIN_POSITIVE);
    let shifted = b.add_scalar(alpha);
    let chol = Cholesky::new(shifted)
        .ok_or_else(|| Error::Precondition("reference form is degenerate on mean-zero functions".into()))?;
    let precond = |r: &DVector<f64>| {
        let mut w = chol.solve(r);
        project_mean_zero(&mut w);
        w
    };
    let b_normalize = |v: &mut DVector<f64>| {
        let nrm = v.dot(&(b * &*v)).sqrt();
        *v /= nrm;
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    project_mean_zero(&mut x);
    b_normalize(&mut x);
    let mut q = quotient(a, b, &x);
    let mut history = vec![q];
    let mut p: Option<DVector<f64>> = None;
    let mut sweeps = 0;
    let mut converged = false;

    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let ax = a * &x;
        let r = &ax - (b * &x) * q;
        if r.norm() <= f64::EPSILON * ax.norm() {
            converged = true;
            break;
        }
        let mut w = precond(&r);
        b_normalize(&mut w);
        let mut cols = vec![x.clone(), w];
        if let Some(p) = &p {
            let mut p = p.clone();
            b_normalize(&mut p);
            cols.push(p);
        }
        let s = DMatrix::from_columns(&cols);
        let gb = s.transpose() * b * &s;
        let ga = s.transpose() * a * &s;
        let gb = (&gb + gb.transpose()) * 0.5;
        let ga = (&ga + ga.transpose()) * 0.5;
        // B-orthonormal basis of the trial space, dropping dependent directions.
        let eb = SymmetricEigen::new(gb);
        let top = eb.eigenvalues.max();
        let keep: Vec<usize> = (0..cols.len()).filter(|&i| eb.eigenvalues[i] > 1e-13 * top).collect();
        let t = DMatrix::from_fn(cols.len(), keep.len(), |i, c| {
            eb.eigenvectors[(i, keep[c])] / eb.eigenvalues[keep[c]].sqrt()
        });
        let small = t.transpose() * ga * &t;
        let small = (&small + small.transpose()) * 0.5;
        let es = SymmetricEigen::new(small);
        let imin = es.eigenvalues.imin();
        let y = &t * es.eigenvectors.column(imin);
        let mut x_new = &s * &y;
        let mut p_new = s.columns(1, cols.len() - 1) * y.rows(1, cols.len() - 1);
        project_mean_zero(&mut x_new);
        project_mean_zero(&mut p_new);
        b_normalize(&mut x_new);
        let q_new = quotient(a, b, &x_new);
        history.push(q_new);
        let done = (q - q_new).abs() <= opts.tol * q.abs().max(q_new.abs()).max(spread);
        x = x_new;
        q = q_new;
        p = if p_new.dot(&(b * &p_new)) > 0.0 { Some(p_new) } else { None };
        if done {
            converged = true;
            break;
        }
    }

    let ax = a * &x;
    let r = &ax - (b * &x) * q;
    let residual = r.dot(&precond(&r)).max(0.0).sqrt() / spread;
    if !converged || residual > opts.residual_tol {
        return Err(Error::NotConverged {
            sweeps,
            last_quotient: q,
            residual,
        });
    }
    Ok((
        q,
        x,
        SolverDiagnostics {
            sweeps,
            history,
            residual,
            unknowns: n,
        },
    ))
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let lead = v
        .iter()
        .enumerate()
        .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
    let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
    for x in &mut v {
        *x *= sign / nrm;
    }
    v
}

fn check_nonnegative(k: &TabulatedKernel) -> Result<()> {
    let m = k.size();
    if let Some(pos) = k.entries().iter().position(|&v| v < 0.0) {
        return Err(Error::InvalidParameter {
            name: "kernel",
            reason: format!("negative entry at ({}, {})", pos / m, pos % m),
        });
    }
    Ok(())
}

/// Smallest `E_K(u) / |u|^2_{H^s}` over nonconstant grid functions.
pub fn rayleigh_min(k: &TabulatedKernel, s: f64, opts: &SolverOptions) -> Result<Rayleigh> {
    check_order(s)?;
    check_nonnegative(k)?;
    let grid = k.grid();
    if grid.cell_count() < 4 {
        return Err(Error::Precondition(format!(
            "grid has {} cells; at least 4 are required",
            grid.cell_count()
        )));
    }
    let cells: Vec<usize> = (0..grid.cell_count()).collect();
    let a = kernel_laplacian(k, &cells);
    let b = reference_laplacian(grid, s, &cells);
    let (value, x, diagnostics) = generalized_min(&a, &b, opts)?;
    Ok(Rayleigh {
        value: value.max(0.0),
        minimizer: GridFunction::new(grid.clone(), normalized(x.iter().copied().collect()))?,
        diagnostics,
    })
}

/// Unit balls `B_1` and `B_2` about the box center.
pub fn unit_balls(grid: &Grid) -> Result<(Ball, Ball)> {
    if grid.is_periodic() {
        return Err(Error::Precondition("local forms need a free (non-periodic) box".into()));
    }
    if grid.box_length() < 4.0 {
        return Err(Error::OutsideBox(format!(
            "B_2 needs a box of side at least 4, got {}",
            grid.box_length()
        )));
    }
    let c = grid.box_center();
    Ok((Ball::new(c.clone(), 1.0)?, Ball::new(c, 2.0)?))
}

/// `E_K(u; B_2 x B_2) / |u|^2_{H^s(B_1)}`; `None` when the denominator vanishes.
pub fn local_quotient(k: &TabulatedKernel, u: &GridFunction, s: f64) -> Result<Option<f64>> {
    let (b1, b2) = unit_balls(k.grid())?;
    let num = energy_on(k, u, &k.grid().ball_cells(&b2).cells)?.value;
    let den = hs_seminorm_local_sq(u, s, &b1)?.value;
    Ok(if den > 0.0 { Some(num / den) } else { None })
}

/// Smallest local quotient. The cells of `B_2` outside `B_1` only enter
/// the numerator, so they are minimized out through a Schur complement and
/// the iteration runs over functions on `B_1`.
pub fn rayleigh_min_local(k: &TabulatedKernel, s: f64, opts: &SolverOptions) -> Result<Rayleigh> {
    check_order(s)?;
    check_nonnegative(k)?;
    let grid = k.grid();
    let (b1, b2) = unit_balls(grid)?;
    let inner = grid.ball_cells(&b1).cells;
    let outer: Vec<usize> = grid
        .ball_cells(&b2)
        .cells
        .into_iter()
        .filter(|c| !grid.contains(&b1, *c))
        .collect();
    if inner.len() < 4 {
        return Err(Error::BallTooSmall {
            cells: inner.len(),
            required: 4,
        });
    }
    let (ni, no) = (inner.len(), outer.len());
    let all: Vec<usize> = inner.iter().chain(&outer).copied().collect();
    let a = kernel_laplacian(k, &all);
    let a_ii = a.view((0, 0), (ni, ni)).into_owned();
    let (schur, lift) = if no == 0 {
        (a_ii, None)
    } else {
        let a_io = a.view((0, ni), (ni, no)).into_owned();
        let a_oo = a.view((ni, ni), (no, no)).into_owned();
        let e = SymmetricEigen::new(a_oo);
        let top = e.eigenvalues.amax();
        let inv = DVector::from_iterator(
            no,
            e.eigenvalues.iter().map(|&l| if l > 1e-13 * top { 1.0 / l } else { 0.0 }),
        );
        let pinv = &e.eigenvectors * DMatrix::from_diagonal(&inv) * e.eigenvectors.transpose();
        // u_out = lift * u_in minimizes the numerator for fixed u_in.
        let lift = -(&pinv * a_io.transpose());
        let s_mat = &a_ii + &a_io * &lift;
        ((&s_mat + s_mat.transpose()) * 0.5, Some(lift))
    };
    let b = reference_laplacian(grid, s, &inner);
    let (value, x, diagnostics) = generalized_min(&schur, &b, opts)?;
    let mut full = vec![0.0; grid.cell_count()];
    for (c, &cell) in inner.iter().enumerate() {
        full[cell] = x[c];
    }
    if let Some(lift) = lift {
        let y = lift * &x;
        for (c, &cell) in outer.iter().enumerate() {
            full[cell] = y[c];
        }
    }
    Ok(Rayleigh {
        value: value.max(0.0),
        minimizer: GridFunction::new(grid.clone(), normalized(full))?,
        diagnostics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Global,
    Local,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoercivityParams {
    pub saturation: SaturationParams,
    pub solver: SolverOptions,
    /// Allowed relative excess of the constructive bound over the Rayleigh minimum.
    pub tol: f64,
    /// Largest cover scale used by the local diagnostics.
    pub cover_cap: u32,
    /// Cover-ball pairs checked for connecting chains.
    pub chain_pairs: usize,
}

impl CoercivityParams {
    pub fn new(grid: &Grid, lambda: f64) -> Self {
        Self {
            saturation: SaturationParams::new(grid, lambda),
            solver: SolverOptions::default(),
            tol: 0.05,
            cover_cap: 2,
            chain_pairs: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallBallCheck {
    pub ball: Ball,
    /// `E_K(u; 5^n B) / |u|^2_{H^s(B)}` for the minimizer; `None` when skipped.
    pub ratio: Option<f64>,
    pub cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalDiagnostics {
    pub b1_cells: usize,
    pub b2_cells: usize,
    pub cover_scale: u32,
    pub cover_balls: usize,
    pub cover_bound: f64,
    pub chain_pairs: usize,
    pub chain_max_len: usize,
    pub chain_bound: f64,
    /// Smallest consecutive overlap over all checked chains, as a fraction of `|B|`.
    pub chain_min_overlap: Option<f64>,
    pub chain_failures: usize,
    pub smallball: Vec<SmallBallCheck>,
    pub smallball_min: Option<f64>,
    pub smallball_skipped: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoercivityReport {
    pub mode: Mode,
    pub kernel_id: String,
    pub s: f64,
    pub lambda: f64,
    /// `a_n / C_n`.
    pub constructive_bound: f64,
    pub a_n: f64,
    pub c_n: f64,
    pub n: usize,
    pub rayleigh_min: f64,
    pub minimizer: GridFunction,
    pub iterations: SolverDiagnostics,
    pub tol: f64,
    /// `constructive_bound <= rayleigh_min (1 + tol)`.
    pub sound: bool,
    pub saturation: SaturationRun,
    pub local: Option<LocalDiagnostics>,
}

fn constructive(run: &SaturationRun) -> (f64, f64) {
    let a_n = *run.thresholds.last().expect("thresholds start with a_0");
    let c_n = *run.domination_constants.last().expect("constants start with C_0");
    (a_n, c_n)
}

pub fn global_pipeline(k: &TabulatedKernel, params: &CoercivityParams) -> Result<CoercivityReport> {
    let run = saturation_iterations(k, &params.saturation)?;
    let ray = rayleigh_min(k, k.s(), &params.solver)?;
    let (a_n, c_n) = constructive(&run);
    let bound = a_n / c_n;
    let sound = bound <= ray.value * (1.0 + params.tol);
    if !sound {
        return Err(Error::Unsound {
            bound,
            rayleigh: ray.value,
            tol: params.tol,
        });
    }
    Ok(CoercivityReport {
        mode: Mode::Global,
        kernel_id: k.id().to_string(),
        s: k.s(),
        lambda: params.saturation.lambda,
        constructive_bound: bound,
        a_n,
        c_n,
        n: run.n,
        rayleigh_min: ray.value,
        minimizer: ray.minimizer,
        iterations: ray.diagnostics,
        tol: params.tol,
        sound,
        saturation: run,
        local: None,
    })
}

fn inside_box(grid: &Grid, b: &Ball) -> bool {
    let l = grid.box_length();
    b.center.iter().all(|&c| c - b.radius >= 0.0 && c + b.radius <= l)
}

fn chain_diagnostics(n: u32, d: usize, cover: &[Ball], pairs: usize) -> Result<(usize, usize, Option<f64>, usize)> {
    let total = cover.len() * cover.len().saturating_sub(1) / 2;
    let picks: Vec<usize> = if total <= pairs {
        (0..total).collect()
    } else {
        (0..pairs).map(|i| i * total / pairs).collect()
    };
    let r = cover_radius(n);
    let full = unit_ball_volume(d) * r.powi(d as i32);
    let origin = Ball::new(vec![0.0; d], 1.0)?;
    let two = Ball::new(vec![0.0; d], 2.0)?;
    let len_bound = 2.0 + 6.0 * 5f64.powi(n as i32);
    let mut max_len = 0;
    let mut min_overlap: Option<f64> = None;
    let mut failures = 0;
    let mut idx = 0;
    let mut next = picks.iter().peekable();
    'outer: for i in 0..cover.len() {
        for j in i + 1..cover.len() {
            match next.peek() {
                None => break 'outer,
                Some(&&p) if p == idx => {
                    next.next();
                    let c = ball_chain(&cover[i], &cover[j], n)?;
                    max_len = max_len.max(c.balls.len());
                    let mut ok = c.balls.len() as f64 <= len_bound;
                    match c.kind {
                        ChainKind::Identical => {}
                        ChainKind::Enlarged => {
                            ok &= c.balls[0].scaled(5f64.powi(n as i32)).inside(&two);
                        }
                        ChainKind::Segment => {
                            let mut prev = &cover[i];
                            for b in c.balls.iter().chain(std::iter::once(&cover[j])) {
                                let f = overlap_measure(d, r, prev.center_distance(b))? / full;
                                min_overlap = Some(min_overlap.map_or(f, |m: f64| m.min(f)));
                                ok &= f >= 0.099;
                                ok &= b.center_distance(&origin) < 1.0;
                                prev = b;
                            }
                        }
                    }
                    if !ok {
                        failures += 1;
                    }
                }
                Some(_) => {}
            }
            idx += 1;
        }
    }
    Ok((picks.len(), max_len, min_overlap, failures))
}

pub fn local_pipeline(k: &TabulatedKernel, params: &CoercivityParams) -> Result<CoercivityReport> {
    let grid = k.grid();
    let (b1, b2) = unit_balls(grid)?;
    let d = grid.dim();
    // The iteration lives in the whole space; the torus is its stand-in.
    let run = saturation_iterations(&periodic_surrogate(k)?, &params.saturation)?;
    let ray = rayleigh_min_local(k, k.s(), &params.solver)?;
    let (a_n, c_n) = constructive(&run);
    let bound = a_n / c_n;

    let scale = (run.n as u32).min(params.cover_cap);
    let cover = cover_unit_ball(scale, d)?;
    let (chain_pairs, chain_max_len, chain_min_overlap, chain_failures) =
        chain_diagnostics(scale, d, &cover.balls, params.chain_pairs)?;
    let dil = 5f64.powi(scale as i32);
    let shift = grid.box_center();
    let u = &ray.minimizer;
    let checks: Vec<SmallBallCheck> = cover
        .balls
        .par_iter()
        .filter_map(|b| {
            let ball = Ball {
                center: b.center.iter().zip(&shift).map(|(c, o)| c + o).collect(),
                radius: b.radius,
            };
            let big = ball.scaled(dil);
            if !inside_box(grid, &big) {
                return None;
            }
            let cells = grid.ball_cells(&ball).cells.len();
            let ratio = match hs_seminorm_local_sq(u, k.s(), &ball) {
                Ok(den) if den.value > 0.0 => energy_on(k, u, &grid.ball_cells(&big).cells)
                    .ok()
                    .map(|num| num.value / den.value),
                _ => None,
            };
            Some(SmallBallCheck { ball, ratio, cells })
        })
        .collect();
    let smallball_min = checks.iter().filter_map(|c| c.ratio).reduce(f64::min);
    let smallball_skipped = checks.iter().filter(|c| c.ratio.is_none()).count();

    let local = LocalDiagnostics {
        b1_cells: grid.ball_cells(&b1).cells.len(),
        b2_cells: grid.ball_cells(&b2).cells.len(),
        cover_scale: scale,
        cover_balls: cover.len(),
        cover_bound: cover_count_bound(scale, d),
        chain_pairs,
        chain_max_len,
        chain_bound: 2.0 + 6.0 * dil,
        chain_min_overlap,
        chain_failures,
        smallball: checks,
        smallball_min,
        smallball_skipped,
    };
    Ok(CoercivityReport {
        mode: Mode::Local,
        kernel_id: k.id().to_string(),
        s: k.s(),
        lambda: params.saturation.lambda,
        constructive_bound: bound,
        a_n,
        c_n,
        n: run.n,
        rayleigh_min: ray.value,
        minimizer: ray.minimizer,
        iterations: ray.diagnostics,
        tol: params.tol,
        sound: bound <= ray.value * (1.0 + params.tol),
        saturation: run,
        local: Some(local),
    })
}
