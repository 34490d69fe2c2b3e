//! `coercivity`: batch runner for the kernel-coercivity pipelines.

mod config;
mod output;
mod pipelines;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{ConfigError, Pipeline, RunConfig};
use output::{Artifacts, Reproducibility, VERSION};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] coercivity_core::Error),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
    #[error("gallery kernels violate the soundness check: {}", unsound.join(", "))]
    Gallery {
        body: serde_json::Value,
        unsound: Vec<String>,
    },
    #[error("worker pool: {0}")]
    Workers(String),
}

impl CliError {
    fn status(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    fn kind(&self) -> String {
        match self {
            CliError::Config(_) => "config".into(),
            CliError::Output { .. } => "output".into(),
            CliError::Gallery { .. } => "unsound".into(),
            CliError::Workers(_) => "workers".into(),
            CliError::Core(e) => {
                let dbg = format!("{e:?}");
                let name: String = dbg.chars().take_while(|c| c.is_alphanumeric()).collect();
                to_snake(&name)
            }
        }
    }
}

fn to_snake(name: &str) -> String {
    let mut s = String::new();
    for (i, c) in name.chars().enumerate() {
        if c.is_uppercase() && i > 0 {
            s.push('_');
        }
        s.push(c.to_ascii_lowercase());
    }
    s
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: String,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    key: Option<&'a str>,
}

#[derive(Parser, Debug)]
#[command(name = "coercivity", version, about = "Coercivity experiments for nonlocal kernels on grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Measure the density constant of the nondegeneracy assumption.
    CheckA1(RunArgs),
    /// Evaluate the directional second-moment ratio over a range of radii.
    Conjecture(RunArgs),
    /// Build a fixed number of auxiliary kernels.
    Diffuse(RunArgs),
    /// Iterate the auxiliary kernels until the nondegeneracy sets saturate.
    Inkspots(RunArgs),
    /// Constructive bound against the Rayleigh minimum on the whole grid.
    Coercivity(RunArgs),
    /// Constructive bound against the local Rayleigh minimum on B1 inside B2.
    Local(RunArgs),
    /// Run the coercivity pipeline over the built-in kernel gallery.
    Gallery(RunArgs),
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
    workers: Option<u16>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for default output directories (`<root>/<pipeline>`).
    #[arg(long, env = "COERCIVITY_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
}

impl Command {
    fn split(&self) -> (Pipeline, &RunArgs) {
        match self {
            Command::CheckA1(a) => (Pipeline::CheckA1, a),
            Command::Conjecture(a) => (Pipeline::Conjecture, a),
            Command::Diffuse(a) => (Pipeline::Diffuse, a),
            Command::Inkspots(a) => (Pipeline::Inkspots, a),
            Command::Coercivity(a) => (Pipeline::Coercivity, a),
            Command::Local(a) => (Pipeline::Local, a),
            Command::Gallery(a) => (Pipeline::Gallery, a),
        }
    }
}

fn output_dir(args: &RunArgs, cfg: &RunConfig, pipeline: Pipeline) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| args.out_root.join(pipeline.name()))
}

fn execute(pipeline: Pipeline, args: &RunArgs) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate(pipeline)?;
    if let Some(w) = args.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w as usize)
            .build_global()
            .map_err(|e| CliError::Workers(e.to_string()))?;
    }
    let dir = output_dir(args, &cfg, pipeline);
    let mut out = Artifacts::create(&dir)?;
    let repro = Reproducibility {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: VERSION,
    };
    match pipelines::run(pipeline, &cfg, &mut out) {
        Ok(body) => {
            out.report(pipeline.name(), &repro, &body)?;
            Ok(out.dir().to_path_buf())
        }
        Err(CliError::Gallery { body, unsound }) => {
            out.report(pipeline.name(), &repro, &body)?;
            Err(CliError::Gallery { body, unsound })
        }
        Err(e) => Err(e),
    }
}

fn report_error(e: &CliError) {
    let key = match e {
        CliError::Config(c) => Some(c.key.as_str()),
        _ => None,
    };
    let report = ErrorReport {
        error: e.kind(),
        message: e.to_string(),
        key,
    };
    eprintln!("{}", serde_json::to_string(&report).expect("error serializes"));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (pipeline, args) = cli.command.split();
    match execute(pipeline, args) {
        Ok(dir) => {
            println!("{}", Path::new(&dir).join("report.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            report_error(&e);
            ExitCode::from(e.status())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_are_snake_case() {
        let e = CliError::Core(coercivity_core::Error::EmptySampling);
        assert_eq!(e.kind(), "empty_sampling");
        assert_eq!(e.status(), 1);
        let c = CliError::Config(ConfigError {
            key: "lamda".into(),
            message: "unknown".into(),
        });
        assert_eq!(c.status(), 2);
    }

    #[test]
    fn cli_surface_parses() {
        let cli = Cli::try_parse_from([
            "coercivity", "inkspots", "--config", "a.toml", "--workers", "4", "--seed", "7", "--out", "o",
        ])
        .unwrap();
        let (p, a) = cli.command.split();
        assert_eq!(p, Pipeline::Inkspots);
        assert_eq!(a.workers, Some(4));
        assert!(Cli::try_parse_from(["coercivity", "gallery", "--config", "a", "--workers", "0"]).is_err());
    }
}
