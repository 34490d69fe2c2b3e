//! One function per subcommand. Each returns the report body and writes its
//! plot data through [`Artifacts`].

use coercivity_core::coercivity::{
    global_pipeline, local_pipeline, rayleigh_min, CoercivityReport, LocalDiagnostics,
};
use coercivity_core::diffusion::{diffuse_step, min_ratio, DiffusionState, EtaParams, StepDiagnostics};
use coercivity_core::geometry::{ball_chain, cover_unit_ball, BallChain};
use coercivity_core::inkspots::{calibrate_a_next, saturation_iterations, Calibration, Outcome, SaturationRun, NEAR_FIELD_SQ};
use coercivity_core::kernels::{
    check_assumption, conjecture_ratio, gallery, tabulate, write_kernel, AssumptionReport, AssumptionVariant,
    Quadrature,
};
use coercivity_core::{Error, Grid, GridFunction, TabulatedKernel};
use serde::Serialize;

use crate::config::{Pipeline, RunConfig};
use crate::output::{num, Artifacts};
use crate::CliError;

fn kernel(cfg: &RunConfig, grid: &Grid) -> Result<(TabulatedKernel, f64), CliError> {
    let spec = cfg.kernel_spec(grid)?;
    Ok((tabulate(&spec, grid)?, spec.lambda))
}

/// Runs `pipeline` and returns its report body as JSON.
pub fn run(pipeline: Pipeline, cfg: &RunConfig, out: &mut Artifacts) -> Result<serde_json::Value, CliError> {
    let grid = cfg.grid()?;
    let body = match pipeline {
        Pipeline::CheckA1 => to_value(check_a1(cfg, &grid, out)?),
        Pipeline::Conjecture => to_value(conjecture(cfg, &grid, out)?),
        Pipeline::Diffuse => to_value(diffuse(cfg, &grid, out)?),
        Pipeline::Inkspots => to_value(inkspots(cfg, &grid, out)?),
        Pipeline::Coercivity => to_value(coercivity(cfg, &grid, out, false)?),
        Pipeline::Local => to_value(coercivity(cfg, &grid, out, true)?),
        Pipeline::Gallery => return gallery_run(cfg, &grid, out),
    };
    Ok(body)
}

fn to_value(v: impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("report serializes")
}

#[derive(Serialize)]
struct CheckA1Report {
    kernel_id: String,
    report: AssumptionReport,
}

fn check_a1(cfg: &RunConfig, grid: &Grid, out: &mut Artifacts) -> Result<CheckA1Report, CliError> {
    let (k, lambda) = kernel(cfg, grid)?;
    let lambda = cfg.saturation.lambda.unwrap_or(lambda);
    let report = check_assumption(&k, lambda, cfg.assumption_variant(), &cfg.plan(grid))?;
    let w = &report.witness;
    out.csv(
        "assumption.csv",
        &["variant", "lambda", "mu_hat", "center", "radius", "base_point", "qualifying", "total", "samples"],
        [vec![
            format!("{:?}", cfg.assumption.variant),
            lambda.to_string(),
            report.mu_hat.to_string(),
            w.center.to_string(),
            w.radius.to_string(),
            w.base_point.to_string(),
            w.qualifying.to_string(),
            w.total.to_string(),
            report.samples.to_string(),
        ]],
    )?;
    Ok(CheckA1Report {
        kernel_id: k.id().to_string(),
        report,
    })
}

#[derive(Serialize)]
struct ConjecturePoint {
    r: f64,
    ratio: f64,
}

#[derive(Serialize)]
struct ConjectureReport {
    kernel_id: String,
    base_point: usize,
    direction: Vec<f64>,
    quadrature: Quadrature,
    /// `1/(2 - 2s)`: the value for an isotropic unit kernel.
    unit_reference: f64,
    points: Vec<ConjecturePoint>,
}

fn nearest_center(grid: &Grid) -> usize {
    let c = grid.box_center();
    (0..grid.cell_count())
        .min_by(|&a, &b| {
            let da: f64 = grid.center(a).iter().zip(&c).map(|(p, q)| (p - q).powi(2)).sum();
            let db: f64 = grid.center(b).iter().zip(&c).map(|(p, q)| (p - q).powi(2)).sum();
            da.total_cmp(&db)
        })
        .unwrap_or(0)
}

fn conjecture(cfg: &RunConfig, grid: &Grid, out: &mut Artifacts) -> Result<ConjectureReport, CliError> {
    let (k, _) = kernel(cfg, grid)?;
    let c = &cfg.conjecture;
    let x = c.base_point.unwrap_or_else(|| nearest_center(grid));
    let e = c.direction.clone().unwrap_or_else(|| {
        let mut e = vec![0.0; grid.dim()];
        e[0] = 1.0;
        e
    });
    let points = c
        .radii
        .iter()
        .map(|&r| {
            Ok(ConjecturePoint {
                r,
                ratio: conjecture_ratio(&k, x, r, &e, c.quadrature)?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let unit_reference = 1.0 / (2.0 - 2.0 * k.s());
    out.csv(
        "conjecture.csv",
        &["r", "ratio", "unit_reference"],
        points
            .iter()
            .map(|p| vec![p.r.to_string(), p.ratio.to_string(), unit_reference.to_string()]),
    )?;
    Ok(ConjectureReport {
        kernel_id: k.id().to_string(),
        base_point: x,
        direction: e,
        quadrature: c.quadrature,
        unit_reference,
        points,
    })
}

#[derive(Serialize)]
struct DiffuseStep {
    j: usize,
    a_j: f64,
    domination_constant: f64,
    calibration: Calibration,
    diagnostics: Option<StepDiagnostics>,
    min_ratio: Option<f64>,
}

#[derive(Serialize)]
struct DiffuseReport {
    kernel_id: String,
    lambda: f64,
    mu_hat: f64,
    delta: f64,
    eta: EtaParams,
    initial_min_ratio: Option<f64>,
    steps: Vec<DiffuseStep>,
}

#[derive(Serialize)]
struct Sidecar {
    j: usize,
    a_j: f64,
    delta: f64,
    domination_constant: f64,
    min_ratio: Option<f64>,
}

fn diffuse(cfg: &RunConfig, grid: &Grid, out: &mut Artifacts) -> Result<DiffuseReport, CliError> {
    let (k, kernel_lambda) = kernel(cfg, grid)?;
    let lambda = cfg.saturation.lambda.unwrap_or(kernel_lambda);
    let a1 = check_assumption(&k, lambda, AssumptionVariant::A1, &cfg.plan(grid))?;
    let delta = match cfg.saturation.delta {
        Some(d) => d,
        None if a1.mu_hat > 0.0 => a1.mu_hat / 3f64.powi(grid.dim() as i32 + 1),
        None => {
            return Err(Error::Precondition(format!(
                "kernel fails the density assumption at lambda = {lambda}; set saturation.delta explicitly"
            ))
            .into())
        }
    };
    let eta = EtaParams::for_grid(grid, k.s(), delta)?;
    let mut state = DiffusionState::new(k.clone(), lambda, eta.clone())?;
    let mut steps = Vec::new();
    if cfg.diffuse.dump {
        dump(out, &state, delta, min_ratio(&state.kernel, NEAR_FIELD_SQ))?;
    }
    for _ in 0..cfg.diffuse.steps {
        let mut next = diffuse_step(&state, &k)?;
        let cal = calibrate_a_next(&next)?;
        next.threshold = Some(cal.a_next);
        let mr = min_ratio(&next.kernel, NEAR_FIELD_SQ);
        if cfg.diffuse.dump {
            dump(out, &next, delta, mr)?;
        }
        steps.push(DiffuseStep {
            j: next.j,
            a_j: cal.a_next,
            domination_constant: next.domination_constant,
            calibration: cal,
            diagnostics: next.diagnostics.clone(),
            min_ratio: mr,
        });
        state = next;
    }
    out.csv(
        "steps.csv",
        &[
            "j",
            "a_j",
            "c_j",
            "a_ratio",
            "guaranteed_pairs",
            "eta1_max_sum",
            "eta2_max_sum",
            "localized_triples",
            "positive_rho_pairs",
            "min_ratio",
        ],
        steps.iter().map(|s| {
            let dg = s.diagnostics.as_ref();
            vec![
                s.j.to_string(),
                s.a_j.to_string(),
                s.domination_constant.to_string(),
                s.calibration.ratio.to_string(),
                s.calibration.guaranteed_pairs.to_string(),
                num(dg.map(|d| d.eta1_max_sum)),
                num(dg.map(|d| d.eta2_max_sum)),
                dg.map(|d| d.localized_triples.to_string()).unwrap_or_default(),
                dg.map(|d| d.positive_rho_pairs.to_string()).unwrap_or_default(),
                num(s.min_ratio),
            ]
        }),
    )?;
    Ok(DiffuseReport {
        kernel_id: k.id().to_string(),
        lambda,
        mu_hat: a1.mu_hat,
        delta,
        eta,
        initial_min_ratio: min_ratio(&k, NEAR_FIELD_SQ),
        steps,
    })
}

fn dump(out: &mut Artifacts, st: &DiffusionState, delta: f64, min_ratio: Option<f64>) -> Result<(), CliError> {
    let name = format!("kernel_{}.bin", st.j);
    write_kernel(&st.kernel, out.path(&name))?;
    out.json(
        &format!("kernel_{}.json", st.j),
        &Sidecar {
            j: st.j,
            a_j: st.threshold()?,
            delta,
            domination_constant: st.domination_constant,
            min_ratio,
        },
    )
}

/// Writes `thresholds.csv`, `curves.csv` and `growth.csv`.
fn saturation_tables(run: &SaturationRun, grid: &Grid, out: &mut Artifacts) -> Result<(), CliError> {
    out.csv(
        "thresholds.csv",
        &["j", "a_j", "c_j"],
        (0..=run.n).map(|j| {
            vec![
                j.to_string(),
                run.thresholds[j].to_string(),
                run.domination_constants[j].to_string(),
            ]
        }),
    )?;
    out.csv(
        "curves.csv",
        &[
            "j",
            "a_j",
            "c_j",
            "worst_missing",
            "min_growth_ratio",
            "ratio_samples",
            "contained",
            "empty",
            "nesting_guaranteed",
            "nesting_resolved",
            "min_ratio",
        ],
        (0..=run.n).map(|j| {
            let reports = run.growth.iter().filter(|g| g.j == j);
            let (mut lo, mut ratios, mut contained, mut empty) = (None::<f64>, 0usize, 0usize, 0usize);
            let mut any = false;
            for g in reports {
                any = true;
                match g.outcome {
                    Outcome::Ratio(v) => {
                        ratios += 1;
                        lo = Some(lo.map_or(v, |l| l.min(v)));
                    }
                    Outcome::Contained => contained += 1,
                    Outcome::Empty => empty += 1,
                }
            }
            let nest = run.nesting.iter().find(|s| s.j == j);
            let count = |v: usize| if any { v.to_string() } else { String::new() };
            vec![
                j.to_string(),
                run.thresholds[j].to_string(),
                run.domination_constants[j].to_string(),
                run.worst_missing[j].to_string(),
                num(lo),
                count(ratios),
                count(contained),
                count(empty),
                nest.map(|s| s.guaranteed.to_string()).unwrap_or_default(),
                nest.map(|s| s.resolved.to_string()).unwrap_or_default(),
                num(run.min_ratios.get(j).copied().flatten()),
            ]
        }),
    )?;
    let d = grid.dim();
    let mut header = vec!["j", "x_index", "ball_id", "outcome", "count_j", "count_j1", "ratio", "c1", "radius", "cells"];
    let axes = ["center_0", "center_1", "center_2"];
    header.extend(&axes[..d]);
    out.csv(
        "growth.csv",
        &header,
        run.growth.iter().map(|g| {
            let (kind, ratio) = match g.outcome {
                Outcome::Contained => ("contained", None),
                Outcome::Ratio(v) => ("ratio", Some(v)),
                Outcome::Empty => ("empty", None),
            };
            let mut row = vec![
                g.j.to_string(),
                g.base_point.to_string(),
                g.ball_id.to_string(),
                kind.to_string(),
                g.counts.0.to_string(),
                g.counts.1.to_string(),
                num(ratio),
                g.c1.to_string(),
                g.ball.radius.to_string(),
                g.cells.to_string(),
            ];
            row.extend(g.ball.center.iter().map(|c| c.to_string()));
            row
        }),
    )?;
    out.csv(
        "growth_summary.csv",
        &["c1", "c2", "ratio_samples", "contained", "empty"],
        run.growth_summary.iter().map(|s| {
            vec![
                s.c1.to_string(),
                num(s.c2),
                s.ratio_samples.to_string(),
                s.contained.to_string(),
                s.empty.to_string(),
            ]
        }),
    )
}

#[derive(Serialize)]
struct InkspotsReport {
    kernel_id: String,
    run: SaturationRun,
}

fn inkspots(cfg: &RunConfig, grid: &Grid, out: &mut Artifacts) -> Result<InkspotsReport, CliError> {
    let (k, lambda) = kernel(cfg, grid)?;
    let run = saturation_iterations(&k, &cfg.saturation_params(grid, lambda))?;
    saturation_tables(&run, grid, out)?;
    Ok(InkspotsReport {
        kernel_id: k.id().to_string(),
        run,
    })
}

fn minimizer_table(u: &GridFunction, out: &mut Artifacts) -> Result<(), CliError> {
    let d = u.grid.dim();
    let mut header = vec!["index"];
    header.extend(&["x_0", "x_1", "x_2"][..d]);
    header.push("value");
    out.csv(
        "minimizer.csv",
        &header,
        u.values.iter().enumerate().map(|(i, v)| {
            let mut row = vec![i.to_string()];
            row.extend(u.grid.center(i).iter().map(|c| c.to_string()));
            row.push(v.to_string());
            row
        }),
    )
}

fn local_tables(local: &LocalDiagnostics, grid: &Grid, out: &mut Artifacts) -> Result<(), CliError> {
    let cover = cover_unit_ball(local.cover_scale, grid.dim())?;
    out.json("cover.json", &cover)?;
    let mut chains: Vec<BallChain> = Vec::new();
    if let Some(first) = cover.balls.first() {
        for other in cover.balls.iter().skip(1).take(8) {
            chains.push(ball_chain(first, other, local.cover_scale)?);
        }
    }
    out.json("chains.json", &chains)?;
    let d = grid.dim();
    let mut header = vec!["ball", "radius"];
    header.extend(&["center_0", "center_1", "center_2"][..d]);
    header.extend(["cells", "ratio"]);
    out.csv(
        "smallball.csv",
        &header,
        local.smallball.iter().enumerate().map(|(i, s)| {
            let mut row = vec![i.to_string(), s.ball.radius.to_string()];
            row.extend(s.ball.center.iter().map(|c| c.to_string()));
            row.push(s.cells.to_string());
            row.push(num(s.ratio));
            row
        }),
    )
}

fn coercivity(cfg: &RunConfig, grid: &Grid, out: &mut Artifacts, local: bool) -> Result<CoercivityReport, CliError> {
    let (k, lambda) = kernel(cfg, grid)?;
    let params = cfg.coercivity_params(grid, lambda);
    let report = if local {
        local_pipeline(&k, &params)?
    } else {
        global_pipeline(&k, &params)?
    };
    saturation_tables(&report.saturation, grid, out)?;
    out.csv(
        "quotient.csv",
        &["sweep", "quotient"],
        report
            .iterations
            .history
            .iter()
            .enumerate()
            .map(|(i, q)| vec![i.to_string(), q.to_string()]),
    )?;
    minimizer_table(&report.minimizer, out)?;
    if let Some(l) = &report.local {
        local_tables(l, grid, out)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct GalleryEntry {
    pub kernel_id: String,
    pub mu_hat: f64,
    pub passes_a1: bool,
    pub n: Option<usize>,
    pub a_n: Option<f64>,
    pub c_n: Option<f64>,
    pub constructive_bound: Option<f64>,
    pub rayleigh_min: f64,
    pub sound: Option<bool>,
    pub error: Option<String>,
}

fn gallery_run(cfg: &RunConfig, grid: &Grid, out: &mut Artifacts) -> Result<serde_json::Value, CliError> {
    let specs = gallery(grid, cfg.gallery.s)?;
    let mut entries = Vec::new();
    for spec in &specs {
        let k = tabulate(spec, grid)?;
        let params = cfg.coercivity_params(grid, spec.lambda);
        let a1 = check_assumption(&k, params.saturation.lambda, AssumptionVariant::A1, &params.saturation.plan)?;
        let ray = rayleigh_min(&k, k.s(), &params.solver)?;
        let mut e = GalleryEntry {
            kernel_id: k.id().to_string(),
            mu_hat: a1.mu_hat,
            passes_a1: a1.mu_hat > 0.0,
            n: None,
            a_n: None,
            c_n: None,
            constructive_bound: None,
            rayleigh_min: ray.value,
            sound: None,
            error: None,
        };
        if e.passes_a1 {
            match global_pipeline(&k, &params) {
                Ok(r) => {
                    e.n = Some(r.n);
                    e.a_n = Some(r.a_n);
                    e.c_n = Some(r.c_n);
                    e.constructive_bound = Some(r.constructive_bound);
                    e.sound = Some(r.sound);
                }
                Err(Error::Unsound { bound, .. }) => {
                    e.constructive_bound = Some(bound);
                    e.sound = Some(false);
                }
                Err(err) => e.error = Some(err.to_string()),
            }
        }
        entries.push(e);
    }
    out.csv(
        "gallery.csv",
        &[
            "kernel_id",
            "passes_a1",
            "mu_hat",
            "n",
            "a_n",
            "c_n",
            "constructive_bound",
            "rayleigh_min",
            "sound",
            "error",
        ],
        entries.iter().map(|e| {
            vec![
                e.kernel_id.clone(),
                e.passes_a1.to_string(),
                e.mu_hat.to_string(),
                e.n.map(|n| n.to_string()).unwrap_or_default(),
                num(e.a_n),
                num(e.c_n),
                num(e.constructive_bound),
                e.rayleigh_min.to_string(),
                e.sound.map(|s| s.to_string()).unwrap_or_default(),
                e.error.clone().unwrap_or_default(),
            ]
        }),
    )?;
    let unsound: Vec<String> = entries
        .iter()
        .filter(|e| e.sound == Some(false))
        .map(|e| e.kernel_id.clone())
        .collect();
    let body = serde_json::json!({ "s": cfg.gallery.s, "entries": entries });
    if unsound.is_empty() {
        Ok(body)
    } else {
        Err(CliError::Gallery { body, unsound })
    }
}
