//! Run configuration, read from TOML. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use coercivity_core::coercivity::{CoercivityParams, SolverOptions};
use coercivity_core::inkspots::SaturationParams;
use coercivity_core::kernels::{
    cone_weights, AssumptionVariant, CenterSampling, KernelSpec, KernelVariant, Quadrature, SamplingPlan,
    TabulatedSource,
};
use coercivity_core::Grid;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
#[error("config error at `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    CheckA1,
    Conjecture,
    Diffuse,
    Inkspots,
    Coercivity,
    Local,
    Gallery,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::CheckA1 => "check-a1",
            Pipeline::Conjecture => "conjecture",
            Pipeline::Diffuse => "diffuse",
            Pipeline::Inkspots => "inkspots",
            Pipeline::Coercivity => "coercivity",
            Pipeline::Local => "local",
            Pipeline::Gallery => "gallery",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must match the subcommand when given.
    pub pipeline: Option<Pipeline>,
    pub grid: GridConfig,
    pub kernel: Option<KernelConfig>,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub saturation: SaturationConfig,
    #[serde(default)]
    pub assumption: AssumptionConfig,
    #[serde(default)]
    pub conjecture: ConjectureConfig,
    #[serde(default)]
    pub diffuse: DiffuseConfig,
    #[serde(default)]
    pub coercivity: CoercivityConfig,
    #[serde(default)]
    pub gallery: GalleryConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub cells: usize,
    #[serde(default = "one")]
    pub length: f64,
    #[serde(default = "yes")]
    pub periodic: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    FractionalLaplacian,
    OneSided,
    Directional,
    Stripes,
    Tabulated,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub variant: VariantName,
    pub s: f64,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OneSidedParams {
    #[serde(default)]
    axis: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConeParams {
    bins: usize,
    #[serde(default)]
    axis_angle: f64,
    half_angle: f64,
    #[serde(default = "yes")]
    two_sided: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DirectionalParams {
    weights: Option<Vec<f64>>,
    cone: Option<ConeParams>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StripesParams {
    width: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RandomParams {
    density: f64,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TabulatedParams {
    path: Option<PathBuf>,
    random: Option<RandomParams>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_sweeps: usize,
    pub residual_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self {
            tol: d.tol,
            max_sweeps: d.max_sweeps,
            residual_tol: d.residual_tol,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaturationConfig {
    /// Threshold for `N^0`; defaults to the kernel multiplier.
    pub lambda: Option<f64>,
    pub delta: Option<f64>,
    pub cap: usize,
    /// Ball radii in grid steps; defaults to the standard ladder.
    pub radii: Option<Vec<usize>>,
    /// Random ball centers per radius; exhaustive when absent and the grid is small.
    pub centers: Option<usize>,
    pub base_points: Option<usize>,
    pub c1: Vec<f64>,
    pub growth_centers: usize,
}

impl Default for SaturationConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            delta: None,
            cap: 32,
            radii: None,
            centers: None,
            base_points: None,
            c1: vec![0.25, 0.5, 1.0],
            growth_centers: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AssumptionName {
    #[default]
    A1,
    A2,
    A3,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionConfig {
    #[serde(default)]
    pub variant: AssumptionName,
    /// Offset constant for A3.
    pub c: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConjectureConfig {
    /// Cell index; defaults to the cell nearest the box center.
    pub base_point: Option<usize>,
    /// Unit direction; defaults to the first axis.
    pub direction: Option<Vec<f64>>,
    pub radii: Vec<f64>,
    #[serde(default)]
    pub quadrature: Quadrature,
}

impl Default for ConjectureConfig {
    fn default() -> Self {
        Self {
            base_point: None,
            direction: None,
            radii: vec![0.25, 0.3, 0.35, 0.4, 0.45, 0.5],
            quadrature: Quadrature::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffuseConfig {
    pub steps: usize,
    /// Write each `K^j` with a JSON sidecar.
    pub dump: bool,
}

impl Default for DiffuseConfig {
    fn default() -> Self {
        Self { steps: 3, dump: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoercivityConfig {
    pub tol: f64,
    pub cover_cap: u32,
    pub chain_pairs: usize,
}

impl Default for CoercivityConfig {
    fn default() -> Self {
        Self {
            tol: 0.05,
            cover_cap: 2,
            chain_pairs: 500,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GalleryConfig {
    pub s: f64,
}

impl Default for GalleryConfig {
    fn default() -> Self {
        Self { s: 0.5 }
    }
}

fn params<T: DeserializeOwned + Default>(table: &toml::Table) -> Result<T, ConfigError> {
    if table.is_empty() {
        return Ok(T::default());
    }
    toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e| bad("kernel.params", e.to_string()))
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(bad(key, format!("must be positive and finite, got {v}")))
    }
}

fn order(key: &str, s: f64) -> Result<(), ConfigError> {
    if s > 0.0 && s < 1.0 {
        Ok(())
    } else {
        Err(bad(key, format!("must lie in (0, 1), got {s}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            // serde names the offending key in backticks.
            let key = msg.split('`').nth(1).unwrap_or("<document>").to_string();
            bad(&key, e.to_string().trim_end())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks every numeric field against its documented range.
    pub fn validate(&self, pipeline: Pipeline) -> Result<(), ConfigError> {
        if let Some(p) = self.pipeline {
            if p != pipeline {
                return Err(bad(
                    "pipeline",
                    format!("config is for `{}` but `{}` was requested", p.name(), pipeline.name()),
                ));
            }
        }
        let g = &self.grid;
        if !(1..=3).contains(&g.dim) {
            return Err(bad("grid.dim", format!("must be 1, 2 or 3, got {}", g.dim)));
        }
        if g.cells < 2 {
            return Err(bad("grid.cells", format!("need at least 2 cells per axis, got {}", g.cells)));
        }
        if g.cells.pow(g.dim as u32) > 4096 {
            return Err(bad(
                "grid.cells",
                format!("{}^{} cells exceed the dense-table limit of 4096", g.cells, g.dim),
            ));
        }
        positive("grid.length", g.length)?;
        if pipeline != Pipeline::Gallery {
            let k = self.kernel.as_ref().ok_or_else(|| bad("kernel", "missing kernel table"))?;
            order("kernel.s", k.s)?;
            positive("kernel.lambda", k.lambda)?;
        } else {
            order("gallery.s", self.gallery.s)?;
        }
        let so = &self.solver;
        positive("solver.tol", so.tol)?;
        positive("solver.residual_tol", so.residual_tol)?;
        if so.max_sweeps == 0 {
            return Err(bad("solver.max_sweeps", "must be at least 1"));
        }
        let sa = &self.saturation;
        if let Some(l) = sa.lambda {
            positive("saturation.lambda", l)?;
        }
        if let Some(d) = sa.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(bad("saturation.delta", format!("must lie in (0, 1), got {d}")));
            }
        }
        if let Some(r) = &sa.radii {
            if r.is_empty() || r.contains(&0) {
                return Err(bad("saturation.radii", "need a nonempty list of positive step counts"));
            }
        }
        if sa.centers == Some(0) {
            return Err(bad("saturation.centers", "must be at least 1"));
        }
        if sa.base_points == Some(0) {
            return Err(bad("saturation.base_points", "must be at least 1"));
        }
        if sa.c1.is_empty() || sa.c1.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(bad("saturation.c1", "need a nonempty list of positive offsets"));
        }
        if sa.growth_centers == 0 {
            return Err(bad("saturation.growth_centers", "must be at least 1"));
        }
        match (self.assumption.variant, self.assumption.c) {
            (AssumptionName::A3, None) => return Err(bad("assumption.c", "A3 needs an offset constant")),
            (AssumptionName::A3, Some(c)) => positive("assumption.c", c)?,
            (_, Some(_)) => return Err(bad("assumption.c", "only A3 takes an offset constant")),
            _ => {}
        }
        let cj = &self.conjecture;
        if cj.radii.is_empty() {
            return Err(bad("conjecture.radii", "need at least one radius"));
        }
        for &r in &cj.radii {
            positive("conjecture.radii", r)?;
        }
        if let Some(e) = &cj.direction {
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if e.len() != g.dim || (n - 1.0).abs() > 1e-9 {
                return Err(bad("conjecture.direction", format!("need a unit vector of length {}", g.dim)));
            }
        }
        if let Some(b) = cj.base_point {
            if b >= g.cells.pow(g.dim as u32) {
                return Err(bad("conjecture.base_point", format!("cell {b} is outside the grid")));
            }
        }
        if self.diffuse.steps == 0 {
            return Err(bad("diffuse.steps", "must be at least 1"));
        }
        let co = &self.coercivity;
        if !(co.tol.is_finite() && co.tol >= 0.0) {
            return Err(bad("coercivity.tol", format!("must be nonnegative, got {}", co.tol)));
        }
        if co.cover_cap > 3 {
            return Err(bad("coercivity.cover_cap", "covers beyond scale 3 are not supported"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        let g = &self.grid;
        Grid::new(g.dim, g.cells, g.length, g.periodic).map_err(|e| bad("grid", e.to_string()))
    }

    pub fn kernel_spec(&self, grid: &Grid) -> Result<KernelSpec, ConfigError> {
        let k = self.kernel.as_ref().ok_or_else(|| bad("kernel", "missing kernel table"))?;
        let variant = match k.variant {
            VariantName::FractionalLaplacian => {
                params::<NoParams>(&k.params)?;
                KernelVariant::FractionalLaplacian
            }
            VariantName::OneSided => {
                let p: OneSidedParams = params(&k.params)?;
                if p.axis >= grid.dim() {
                    return Err(bad("kernel.params.axis", format!("axis {} out of range", p.axis)));
                }
                KernelVariant::OneSided { axis: p.axis }
            }
            VariantName::Directional => {
                let p: DirectionalParams = params(&k.params)?;
                let weights = match (p.weights, p.cone) {
                    (Some(w), None) => w,
                    (None, Some(c)) => {
                        if grid.dim() != 2 || c.bins == 0 {
                            return Err(bad("kernel.params.cone", "cones need d = 2 and at least one bin"));
                        }
                        positive("kernel.params.cone.half_angle", c.half_angle)?;
                        cone_weights(c.bins, c.axis_angle, c.half_angle, c.two_sided)
                    }
                    _ => return Err(bad("kernel.params", "give exactly one of `weights` or `cone`")),
                };
                KernelVariant::Directional { weights }
            }
            VariantName::Stripes => {
                let p: StripesParams = params(&k.params)?;
                let width = p.width.unwrap_or(3.0 * grid.spacing());
                positive("kernel.params.width", width)?;
                KernelVariant::Stripes { width }
            }
            VariantName::Tabulated => {
                let p: TabulatedParams = params(&k.params)?;
                let source = match (p.path, p.random) {
                    (Some(path), None) => TabulatedSource::File(path),
                    (None, Some(r)) => {
                        if !(0.0..=1.0).contains(&r.density) {
                            return Err(bad("kernel.params.random.density", "must lie in [0, 1]"));
                        }
                        TabulatedSource::RandomMask {
                            density: r.density,
                            seed: r.seed,
                        }
                    }
                    _ => return Err(bad("kernel.params", "give exactly one of `path` or `random`")),
                };
                KernelVariant::Tabulated { source }
            }
        };
        KernelSpec::new(variant, k.s, k.lambda).map_err(|e| bad("kernel", e.to_string()))
    }

    pub fn assumption_variant(&self) -> AssumptionVariant {
        match self.assumption.variant {
            AssumptionName::A1 => AssumptionVariant::A1,
            AssumptionName::A2 => AssumptionVariant::A2,
            AssumptionName::A3 => AssumptionVariant::A3 {
                c: self.assumption.c.unwrap_or(1.0),
            },
        }
    }

    pub fn plan(&self, grid: &Grid) -> SamplingPlan {
        let sa = &self.saturation;
        let mut plan = match &sa.radii {
            Some(r) => SamplingPlan::ladder(grid, r),
            None => SamplingPlan::standard(grid),
        };
        if let Some(c) = sa.centers {
            plan.centers = CenterSampling::Random { count: c };
        }
        plan.base_points = sa.base_points;
        plan.seed = self.seed;
        plan
    }

    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            tol: self.solver.tol,
            max_sweeps: self.solver.max_sweeps,
            residual_tol: self.solver.residual_tol,
            seed: self.seed,
        }
    }

    pub fn saturation_params(&self, grid: &Grid, kernel_lambda: f64) -> SaturationParams {
        let sa = &self.saturation;
        SaturationParams {
            lambda: sa.lambda.unwrap_or(kernel_lambda),
            delta: sa.delta,
            cap: sa.cap,
            plan: self.plan(grid),
            c1_ladder: sa.c1.clone(),
            growth_centers: sa.growth_centers,
        }
    }

    pub fn coercivity_params(&self, grid: &Grid, kernel_lambda: f64) -> CoercivityParams {
        CoercivityParams {
            saturation: self.saturation_params(grid, kernel_lambda),
            solver: self.solver(),
            tol: self.coercivity.tol,
            cover_cap: self.coercivity.cover_cap,
            chain_pairs: self.coercivity.chain_pairs,
        }
    }

    /// SHA-256 of the canonical TOML form of the resolved configuration.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[grid]
dim = 1
cells = 64

[kernel]
variant = "stripes"
s = 0.5
"#;

    #[test]
    fn minimal_config_parses() {
        let c = RunConfig::parse(BASE).unwrap();
        c.validate(Pipeline::Inkspots).unwrap();
        let g = c.grid().unwrap();
        let spec = c.kernel_spec(&g).unwrap();
        assert_eq!(spec.variant, KernelVariant::Stripes { width: 3.0 / 64.0 });
        assert_eq!(c.saturation_params(&g, 1.0).cap, 32);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::parse(&BASE.replace("s = 0.5", "s = 0.5\nlamda = 2.0")).unwrap_err();
        assert_eq!(e.key, "lamda");
        let e = RunConfig::parse(&format!("{BASE}\n[solver]\ntoll = 1.0\n")).unwrap_err();
        assert_eq!(e.key, "toll");
        let text = BASE.replace("variant = \"stripes\"", "variant = \"stripes\"\nparams = { widht = 0.1 }");
        let c = RunConfig::parse(&text).unwrap();
        let e = c.kernel_spec(&c.grid().unwrap()).unwrap_err();
        assert_eq!(e.key, "kernel.params");
        assert!(e.message.contains("widht"));
    }

    #[test]
    fn ranges_are_checked() {
        let c = RunConfig::parse(&BASE.replace("s = 0.5", "s = 1.5")).unwrap();
        assert_eq!(c.validate(Pipeline::Coercivity).unwrap_err().key, "kernel.s");
        let c = RunConfig::parse(&BASE.replace("cells = 64", "cells = 1")).unwrap();
        assert_eq!(c.validate(Pipeline::Coercivity).unwrap_err().key, "grid.cells");
        let c = RunConfig::parse(&format!("{BASE}\n[saturation]\ncap = 3\nc1 = [0.5]\ngrowth_centers = 2\ndelta = 1.5\n")).unwrap();
        assert_eq!(c.validate(Pipeline::Inkspots).unwrap_err().key, "saturation.delta");
        let c = RunConfig::parse(&format!("pipeline = \"local\"\n{BASE}")).unwrap();
        assert_eq!(c.validate(Pipeline::Inkspots).unwrap_err().key, "pipeline");
    }

    #[test]
    fn kernel_variants() {
        let text = r#"
[grid]
dim = 2
cells = 8

[kernel]
variant = "directional"
s = 0.4
lambda = 2.0
params = { cone = { bins = 8, half_angle = 0.5 } }
"#;
        let c = RunConfig::parse(text).unwrap();
        let spec = c.kernel_spec(&c.grid().unwrap()).unwrap();
        assert_eq!(spec.lambda, 2.0);
        assert!(matches!(spec.variant, KernelVariant::Directional { ref weights } if weights.len() == 8));
        let both = text.replace("params = {", "params = { weights = [1.0], ");
        let c = RunConfig::parse(&both).unwrap();
        assert!(c.kernel_spec(&c.grid().unwrap()).is_err());
        let rnd = text.replace("\"directional\"", "\"tabulated\"").replace(
            "params = { cone = { bins = 8, half_angle = 0.5 } }",
            "params = { random = { density = 0.3, seed = 4 } }",
        );
        let c = RunConfig::parse(&rnd).unwrap();
        assert!(matches!(
            c.kernel_spec(&c.grid().unwrap()).unwrap().variant,
            KernelVariant::Tabulated { source: TabulatedSource::RandomMask { seed: 4, .. } }
        ));
    }

    #[test]
    fn hash_tracks_resolved_values() {
        let a = RunConfig::parse(BASE).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
