//! Nondegeneracy sets of the auxiliary kernels and their growth.
//!
//! The ladder radii satisfy `5 rho < |x - z|` with `rho >= h`, so a diffused
//! kernel never certifies cells within `5h` of the base point. Saturation,
//! growth and nesting are therefore measured on the resolved region
//! `{v : |x - v| > 5h}`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    certifying_center, diffuse_step, min_ratio, nondeg_row, rho_row, DiffusionState, EtaParams,
    StepDiagnostics,
};
use crate::error::{Error, Result};
use crate::grid::{Ball, Grid};
use crate::kernels::{check_assumption, AssumptionReport, AssumptionVariant, SamplingPlan, TabulatedKernel};

/// Squared step distance up to which cells are never certified.
pub const NEAR_FIELD_SQ: i64 = 25;

/// Cells per base point allowed to stay outside a saturated set.
pub const SATURATION_TOLERANCE: usize = 1;

pub fn is_resolved(grid: &Grid, x: usize, v: usize) -> bool {
    grid.sq_steps(x, v) > NEAR_FIELD_SQ
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NondegMask {
    pub base_point: usize,
    pub threshold: f64,
    pub mask: Vec<bool>,
    pub j: usize,
}

impl NondegMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// `{v : K(x, v) >= a |x - v|^(-d-2s)}` with exact comparison.
pub fn nondeg_mask(k: &TabulatedKernel, x: usize, a: f64, j: usize) -> Result<NondegMask> {
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::InvalidParameter {
            name: "threshold",
            reason: format!("must be positive, got {a}"),
        });
    }
    if x >= k.size() {
        return Err(Error::IndexOutOfRange {
            index: x,
            cells: k.size(),
        });
    }
    Ok(NondegMask {
        base_point: x,
        threshold: a,
        mask: nondeg_row(k, x, a),
        j,
    })
}

fn all_masks(k: &TabulatedKernel, a: f64, j: usize) -> Vec<NondegMask> {
    (0..k.size())
        .into_par_iter()
        .map(|x| NondegMask {
            base_point: x,
            threshold: a,
            mask: nondeg_row(k, x, a),
            j,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// `a_{j+1}`.
    pub a_next: f64,
    /// `min K^{j+1}(x, v) |x - v|^(d+2s)` over pairs with `rho^j(x, v) > 0`.
    pub raw_min: f64,
    /// `a_{j+1} / a_j`.
    pub ratio: f64,
    pub witness: (usize, usize),
    pub guaranteed_pairs: u64,
}

/// Calibrates `a_{j+1}` on the set `{(x, v) : rho^j(x, v) > 0}` of a freshly
/// diffused state.
///
/// The result is the raw minimum capped at `a_j`, then rounded down until
/// every guaranteed pair passes the floating-point nondegeneracy comparison.
pub fn calibrate_a_next(state: &DiffusionState) -> Result<Calibration> {
    let rho = state.rho.as_ref().ok_or_else(|| {
        Error::Precondition("calibration needs a diffused state with its rho table".into())
    })?;
    let a_prev = state
        .previous_threshold
        .ok_or_else(|| Error::Precondition("missing previous threshold".into()))?;
    let k = &state.kernel;
    let grid = k.grid();
    let m = k.size();
    let h = grid.spacing();
    let expo = -(grid.dim() as f64 + 2.0 * k.s()) / 2.0;
    let profile = |x: usize, v: usize| (grid.sq_steps(x, v) as f64 * h * h).powf(expo);

    // Per base point: smallest ratio, its pair, and the guaranteed-pair count.
    type Row = Option<(f64, (usize, usize), u64)>;
    let rows: Vec<Row> = (0..m)
        .into_par_iter()
        .map(|x| {
            let mut best: Option<(f64, (usize, usize))> = None;
            let mut count = 0;
            for v in 0..m {
                if rho[x * m + v] == 0 {
                    continue;
                }
                count += 1;
                let r = k.get(x, v) / profile(x, v);
                if best.is_none_or(|b| r < b.0) {
                    best = Some((r, (x, v)));
                }
            }
            best.map(|(r, w)| (r, w, count))
        })
        .collect();
    let mut raw: Option<(f64, (usize, usize))> = None;
    let mut pairs = 0;
    for (r, w, c) in rows.into_iter().flatten() {
        pairs += c;
        if raw.is_none_or(|b| r < b.0) {
            raw = Some((r, w));
        }
    }
    let (raw_min, witness) = raw.ok_or_else(|| {
        Error::IterationDegenerate(format!("no pair has a positive radius at j = {}", state.j - 1))
    })?;
    if raw_min <= 0.0 {
        return Err(Error::IterationDegenerate(format!(
            "K^{} vanishes at the guaranteed pair {:?}",
            state.j, witness
        )));
    }
    let mut a = raw_min.min(a_prev);
    loop {
        let ok = (0..m).into_par_iter().all(|x| {
            (0..m).all(|v| rho[x * m + v] == 0 || k.get(x, v) >= a * profile(x, v))
        });
        if ok {
            break;
        }
        a *= 1.0 - f64::EPSILON;
    }
    Ok(Calibration {
        a_next: a,
        raw_min,
        ratio: a / a_prev,
        witness,
        guaranteed_pairs: pairs,
    })
}

/// Number of `(x, v)` with `v` in `N^j(x)` but not in `N^{j+1}(x)`.
pub fn nesting_check(prev: &[NondegMask], next: &[NondegMask]) -> usize {
    nesting_check_on(prev, next, |_, _| true)
}

/// As [`nesting_check`], counting only pairs accepted by `keep`.
pub fn nesting_check_on(
    prev: &[NondegMask],
    next: &[NondegMask],
    keep: impl Fn(usize, usize) -> bool + Sync,
) -> usize {
    prev.par_iter()
        .zip(next)
        .map(|(a, b)| {
            let x = a.base_point;
            a.mask
                .iter()
                .zip(&b.mask)
                .enumerate()
                .filter(|&(v, (&p, &q))| p && !q && keep(x, v))
                .count()
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Outcome {
    Contained,
    Ratio(f64),
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub ball: Ball,
    pub ball_id: usize,
    pub base_point: usize,
    pub j: usize,
    pub c1: f64,
    pub outcome: Outcome,
    /// `(|B ∩ N^j|, |B ∩ N^{j+1}|)` over resolved cells.
    pub counts: (usize, usize),
    /// Resolved cells of `B`.
    pub cells: usize,
}

fn growth_from_cells(prev: &NondegMask, next: &NondegMask, grid: &Grid, cells: &[usize]) -> (Outcome, (usize, usize), usize) {
    let x = prev.base_point;
    let resolved: Vec<usize> = cells.iter().copied().filter(|&v| is_resolved(grid, x, v)).collect();
    let before = resolved.iter().filter(|&&v| prev.mask[v]).count();
    let after = resolved.iter().filter(|&&v| next.mask[v]).count();
    let outcome = if after == resolved.len() && !resolved.is_empty() {
        Outcome::Contained
    } else if before == 0 {
        Outcome::Empty
    } else {
        Outcome::Ratio(after as f64 / before as f64)
    };
    (outcome, (before, after), resolved.len())
}

/// Growth of `N^j(x)` inside `ball` from `j` to `j + 1`, on resolved cells.
pub fn growth_ratio(prev: &NondegMask, next: &NondegMask, grid: &Grid, ball: &Ball) -> GrowthReport {
    let cells = grid.ball_cells(ball).cells;
    let (outcome, counts, n) = growth_from_cells(prev, next, grid, &cells);
    GrowthReport {
        ball: ball.clone(),
        ball_id: 0,
        base_point: prev.base_point,
        j: prev.j,
        c1: f64::NAN,
        outcome,
        counts,
        cells: n,
    }
}

/// Parameters of the saturation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationParams {
    pub lambda: f64,
    /// Density parameter; defaults to `mu_hat / 3^(d+1)`.
    pub delta: Option<f64>,
    pub cap: usize,
    pub plan: SamplingPlan,
    /// Offsets `c1` with `|x - z0| = (1 + c1) R` for the growth balls.
    pub c1_ladder: Vec<f64>,
    /// Growth balls per (base point, c1, radius).
    pub growth_centers: usize,
}

impl SaturationParams {
    pub fn new(grid: &Grid, lambda: f64) -> Self {
        Self {
            lambda,
            delta: None,
            cap: 32,
            plan: SamplingPlan::standard(grid),
            c1_ladder: vec![0.25, 0.5, 1.0],
            growth_centers: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestingStats {
    pub j: usize,
    /// Violations on `{v : rho^j(x, v) > 0}`.
    pub guaranteed: usize,
    /// Violations on the resolved region.
    pub resolved: usize,
    /// Violations anywhere.
    pub all: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthSummary {
    pub c1: f64,
    /// Smallest `ratio - 1` over balls that were neither contained nor empty.
    pub c2: Option<f64>,
    pub ratio_samples: usize,
    pub contained: usize,
    pub empty: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaturationRun {
    pub n: usize,
    /// `a_0, ..., a_n`.
    pub thresholds: Vec<f64>,
    pub calibrations: Vec<Calibration>,
    pub domination_constants: Vec<f64>,
    pub assumption: AssumptionReport,
    pub delta: f64,
    pub eta: EtaParams,
    /// Worst number of resolved cells outside `N^j(x)`, per `j`.
    pub worst_missing: Vec<usize>,
    pub nesting: Vec<NestingStats>,
    /// `min K^j(x, y) |x - y|^(d+2s)` over resolved pairs, per `j`.
    pub min_ratios: Vec<Option<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Every sampled growth ball; large, so left out of serialized reports.
    #[serde(skip)]
    pub growth: Vec<GrowthReport>,
    pub growth_summary: Vec<GrowthSummary>,
    /// The `c1` with the largest measured `c2`.
    pub best_c1: Option<f64>,
    pub c2: Option<f64>,
    /// Smallest `n0` with `(1 + c2)^n0 mu_hat >= 1`.
    pub n0: Option<usize>,
    #[serde(skip)]
    pub final_state: Option<DiffusionState>,
}

/// `ceil(log(1/mu) / log(1 + c2))`, read as the least `k` with
/// `(1 + c2)^k mu >= 1`.
pub fn saturation_bound(mu: f64, c2: Option<f64>) -> Option<usize> {
    if mu >= 1.0 {
        return Some(0);
    }
    if mu <= 0.0 {
        return None;
    }
    match c2 {
        Some(c) if c.is_infinite() => Some(1),
        Some(c) if c > 0.0 => Some(((1.0 / mu).ln() / (1.0 + c).ln()).ceil().max(1.0) as usize),
        _ => None,
    }
}

fn worst_missing(grid: &Grid, masks: &[NondegMask]) -> (usize, usize) {
    masks
        .par_iter()
        .map(|mk| {
            let x = mk.base_point;
            let miss = (0..grid.cell_count())
                .filter(|&v| v != x && is_resolved(grid, x, v) && !mk.mask[v])
                .count();
            (miss, x)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0, 0), |a, b| if b.0 > a.0 { b } else { a })
}

/// Growth balls for base point `x`: cell-centered balls of radius `R` whose
/// centers lie within half a step of the sphere `|x - z0| = (1 + c1) R`.
fn growth_balls(grid: &Grid, x: usize, c1: f64, radius_steps: f64, per: usize) -> Vec<usize> {
    let target = (1.0 + c1) * radius_steps;
    let mut near: Vec<usize> = (0..grid.cell_count())
        .filter(|&z| ((grid.sq_steps(x, z) as f64).sqrt() - target).abs() <= 0.5)
        .collect();
    near.sort_unstable();
    if near.len() <= per {
        return near;
    }
    (0..per).map(|i| near[i * near.len() / per]).collect()
}

/// Iterates the auxiliary kernels until every `N^n(x)` covers the resolved
/// region up to [`SATURATION_TOLERANCE`] cells.
pub fn saturation_iterations(k: &TabulatedKernel, params: &SaturationParams) -> Result<SaturationRun> {
    let grid = k.grid().clone();
    let d = grid.dim();
    let assumption = check_assumption(k, params.lambda, AssumptionVariant::A1, &params.plan)?;
    if assumption.mu_hat <= 0.0 {
        return Err(Error::Precondition(format!(
            "kernel fails the density assumption at lambda = {} (mu_hat = 0)",
            params.lambda
        )));
    }
    let delta = params
        .delta
        .unwrap_or(assumption.mu_hat / 3f64.powi(d as i32 + 1));
    let eta = EtaParams::for_grid(&grid, k.s(), delta)?;
    let mut state = DiffusionState::new(k.clone(), params.lambda, eta.clone())?;
    let radii: Vec<f64> = params.plan.radii.iter().map(|r| r / grid.spacing()).collect();

    let mut masks = all_masks(&state.kernel, params.lambda, 0);
    let mut thresholds = vec![params.lambda];
    let mut calibrations = Vec::new();
    let mut domination = vec![1.0];
    let mut missing = Vec::new();
    let mut nesting = Vec::new();
    let mut min_ratios = vec![min_ratio(k, NEAR_FIELD_SQ)];
    let mut diagnostics = Vec::new();
    let mut growth = Vec::new();

    loop {
        let (worst, worst_cell) = worst_missing(&grid, &masks);
        missing.push(worst);
        if worst <= SATURATION_TOLERANCE {
            break;
        }
        if state.j >= params.cap {
            return Err(Error::SaturationCap {
                cap: params.cap,
                worst_missing: worst,
                worst_cell,
                thresholds,
            });
        }
        let mut next = diffuse_step(&state, k)?;
        let cal = calibrate_a_next(&next)?;
        next.threshold = Some(cal.a_next);
        let next_masks = all_masks(&next.kernel, cal.a_next, next.j);
        let rho = next.rho.as_ref().expect("diffused state has rho");
        let m = grid.cell_count();
        nesting.push(NestingStats {
            j: state.j,
            guaranteed: nesting_check_on(&masks, &next_masks, |x, v| rho[x * m + v] > 0),
            resolved: nesting_check_on(&masks, &next_masks, |x, v| is_resolved(&grid, x, v)),
            all: nesting_check(&masks, &next_masks),
        });

        let j = state.j;
        let mut reports: Vec<GrowthReport> = (0..m)
            .into_par_iter()
            .flat_map_iter(|x| {
                let mut out = Vec::new();
                for &c1 in &params.c1_ladder {
                    for &r in &radii {
                        let offs = grid.centered_offsets(r);
                        for z0 in growth_balls(&grid, x, c1, r, params.growth_centers) {
                            let cells = grid.centered_ball(z0, &offs);
                            let (outcome, counts, n) =
                                growth_from_cells(&masks[x], &next_masks[x], &grid, &cells);
                            if n == 0 {
                                continue;
                            }
                            out.push(GrowthReport {
                                ball: Ball {
                                    center: grid.center(z0),
                                    radius: r * grid.spacing(),
                                },
                                ball_id: 0,
                                base_point: x,
                                j,
                                c1,
                                outcome,
                                counts,
                                cells: n,
                            });
                        }
                    }
                }
                out
            })
            .collect();
        for (i, r) in reports.iter_mut().enumerate() {
            r.ball_id = i;
        }
        growth.extend(reports);

        thresholds.push(cal.a_next);
        domination.push(next.domination_constant);
        min_ratios.push(min_ratio(&next.kernel, NEAR_FIELD_SQ));
        if let Some(dg) = &next.diagnostics {
            diagnostics.push(dg.clone());
        }
        calibrations.push(cal);
        masks = next_masks;
        state = next;
    }

    let growth_summary: Vec<GrowthSummary> = params
        .c1_ladder
        .iter()
        .map(|&c1| {
            let mut c2: Option<f64> = None;
            let (mut ratio_samples, mut contained, mut empty) = (0, 0, 0);
            for r in growth.iter().filter(|r| r.c1 == c1) {
                if r.counts.0 == r.cells {
                    continue;
                }
                match r.outcome {
                    Outcome::Contained => contained += 1,
                    Outcome::Empty => empty += 1,
                    Outcome::Ratio(v) => {
                        ratio_samples += 1;
                        c2 = Some(c2.map_or(v - 1.0, |c: f64| c.min(v - 1.0)));
                    }
                }
            }
            if ratio_samples == 0 && contained > 0 && empty == 0 {
                c2 = Some(f64::INFINITY);
            }
            GrowthSummary {
                c1,
                c2,
                ratio_samples,
                contained,
                empty,
            }
        })
        .collect();
    let best = growth_summary
        .iter()
        .filter(|g| g.empty == 0)
        .filter_map(|g| g.c2.map(|c| (g.c1, c)))
        .fold(None, |acc: Option<(f64, f64)>, (c1, c)| match acc {
            Some((_, bc)) if bc >= c => acc,
            _ => Some((c1, c)),
        });
    let (best_c1, c2) = match best {
        Some((c1, c)) => (Some(c1), Some(c)),
        None => (None, None),
    };
    let n0 = saturation_bound(assumption.mu_hat, c2);
    Ok(SaturationRun {
        n: state.j,
        thresholds,
        calibrations,
        domination_constants: domination,
        assumption,
        delta,
        eta,
        worst_missing: missing,
        nesting,
        min_ratios,
        diagnostics,
        growth,
        growth_summary,
        best_c1,
        c2,
        n0,
        final_state: Some(state),
    })
}

/// If `|A ∩ B| >= (1 - delta)|B|`, a ball of radius `c0 R` inside `B` where `A`
/// has density at least `1 - 3^d delta`; the first such cell-centered ball in
/// index order.
pub fn subball_density(grid: &Grid, a: &[bool], ball: &Ball, c0: f64, delta: f64) -> Result<Option<Ball>> {
    let d = grid.dim();
    if !(c0 > 0.0 && c0 < 1.0) {
        return Err(Error::InvalidParameter {
            name: "c0",
            reason: format!("must lie in (0, 1), got {c0}"),
        });
    }
    let limit = 3f64.powi(-(d as i32));
    if !(delta > 0.0 && delta < limit) {
        return Err(Error::InvalidParameter {
            name: "delta",
            reason: format!("must lie in (0, 3^-d), got {delta}"),
        });
    }
    if a.len() != grid.cell_count() {
        return Err(Error::LengthMismatch {
            expected: grid.cell_count(),
            got: a.len(),
        });
    }
    let outer = grid.ball_cells(ball).cells;
    let hits = outer.iter().filter(|&&v| a[v]).count();
    if outer.is_empty() || (hits as f64) < (1.0 - delta) * outer.len() as f64 {
        return Ok(None);
    }
    let r = c0 * ball.radius;
    let need = 1.0 - 3f64.powi(d as i32) * delta;
    for z in outer {
        let center = grid.center(z);
        let sub = Ball {
            center,
            radius: r,
        };
        if !sub.inside(ball) {
            continue;
        }
        let cells = grid.ball_cells(&sub).cells;
        let c = cells.iter().filter(|&&v| a[v]).count();
        if !cells.is_empty() && c as f64 >= need * cells.len() as f64 {
            return Ok(Some(sub));
        }
    }
    Ok(None)
}

/// `eps0` and `xi = (eps0 + 2) / eps0` of the chain construction, with
/// `eps0 = 0.999 min(1, ((1 - delta) / (1 - mu/2))^(1/d) - 1)`.
pub fn chain_constants(mu: f64, delta: f64, d: usize) -> Result<(f64, f64)> {
    let root = ((1.0 - delta) / (1.0 - mu / 2.0)).powf(1.0 / d as f64) - 1.0;
    let eps0 = 0.999 * root.min(1.0);
    if eps0.is_nan() || eps0 <= 0.0 {
        return Err(Error::Precondition(format!(
            "need delta < mu/2 for a positive enlargement (mu = {mu}, delta = {delta})"
        )));
    }
    Ok((eps0, (eps0 + 2.0) / eps0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainLink {
    pub z: usize,
    pub v: usize,
    /// Ladder radius in steps.
    pub rho: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub links: Vec<ChainLink>,
    pub eps0: f64,
    pub xi: f64,
    /// `|y - v_n|`.
    pub final_gap: f64,
}

/// The chain `(z_i, v_i, rho_i)` starting at `z_0 = y`: each successor is the
/// cell of `B_{rho_i}(v_i)` with the largest radius exceeding `xi rho_i`
/// (lowest index on ties), each `v_i` the lowest-index certifying center.
pub fn chain_trace(state: &DiffusionState, x: usize, y: usize, mu: f64) -> Result<ChainTrace> {
    let grid = state.kernel.grid();
    let delta = state.eta.delta;
    let (eps0, xi) = chain_constants(mu, delta, grid.dim())?;
    let mask = state.nondeg_row(x)?;
    let rho = rho_row(grid, delta, x, &mask);
    if rho[y] == 0 {
        return Err(Error::Precondition(format!("rho({x}, {y}) = 0")));
    }
    let certify = |z: usize| {
        certifying_center(grid, delta, &mask, z, rho[z]).expect("positive radius has a certificate")
    };
    let mut links = vec![ChainLink {
        z: y,
        v: certify(y),
        rho: rho[y],
    }];
    loop {
        let last = links.last().expect("nonempty chain");
        let offs = grid.centered_offsets(last.rho as f64);
        let bar = xi * last.rho as f64;
        let next = grid
            .centered_ball(last.v, &offs)
            .into_iter()
            .filter(|&z| rho[z] as f64 > bar)
            .fold(None, |best: Option<usize>, z| match best {
                Some(b) if rho[b] > rho[z] || (rho[b] == rho[z] && b < z) => Some(b),
                _ => Some(z),
            });
        match next {
            Some(z) => links.push(ChainLink {
                z,
                v: certify(z),
                rho: rho[z],
            }),
            None => break,
        }
    }
    let last = links.last().expect("nonempty chain");
    let final_gap = (grid.sq_steps(y, last.v) as f64).sqrt() * grid.spacing();
    Ok(ChainTrace {
        links,
        eps0,
        xi,
        final_gap,
    })
}
