//! Command-line front end: `estimate`, `design`, `simulate`, `analyze`.
//!
//! Every run writes its files plus `config.json` (the effective configuration)
//! and `manifest.json` (hashes of everything written) into the output
//! directory. Running the same subcommand with `--config <out>/config.json`
//! reproduces the outputs byte for byte, timing fields aside.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{sha256_hex, EstimatorChoice, RunConfig};
use crate::container::{decode_map, encode_map, read_container, write_atomic, MapMeta};
use crate::design::design_three_point;
use crate::error::{PromError, Result};
use crate::postprocess::{prom_plus, VelocityField};
use crate::recipes::{recipe_kind, run_recipe, Artifact, RecipeKind};
use crate::voxel::{EstimatorId, EstimatorOptions, VoxelEstimator};

pub const THREADS_ENV: &str = "PROMKIT_THREADS";
const DEFAULT_OUTPUT: &str = "promkit-out";

#[derive(Debug, Parser)]
#[command(name = "promkit", version, about = "Multi-point PC-MRI velocity estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Flags override the config file.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed (default 0)
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads; falls back to the config, then PROMKIT_THREADS.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Output directory (default promkit-out)
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// prom, prom+, sdv, odv, nco or mle.
    #[arg(long, global = true, value_name = "NAME")]
    pub estimator: Option<String>,
    /// fig1, fig2, fig5 (analyze); fig6, fig7, fig8, fig9 (simulate).
    #[arg(long, global = true, value_name = "NAME")]
    pub recipe: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Velocity map from a complex image container.
    Estimate {
        /// Complex image container (.cimg) with a .json sidecar
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        /// f32 truth map; adds error statistics to the summary.
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
    },
    /// Three-point venc design.
    Design,
    /// Monte Carlo recipes.
    Simulate,
    /// Analysis recipes.
    Analyze,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Estimate { .. } => "estimate",
            Command::Design => "design",
            Command::Simulate => "simulate",
            Command::Analyze => "analyze",
        }
    }
}

/// Parses `args` (program name first), runs, and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let PromError::InfeasibleDesign { diagnostics, .. } = &e {
                for d in diagnostics {
                    eprintln!("  {d}");
                }
            }
            e.exit_code()
        }
    }
}

/// Config file merged with the flags.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let c = &cli.common;
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    if c.threads.is_some() {
        cfg.threads = c.threads;
    }
    if c.output.is_some() {
        cfg.output = c.output.clone();
    }
    if let Some(e) = &c.estimator {
        cfg.estimator = Some(e.parse()?);
    }
    if c.recipe.is_some() {
        cfg.recipe = c.recipe.clone();
    }
    if let Command::Estimate { input, truth } = &cli.command {
        if input.is_some() {
            cfg.input = input.clone();
        }
        if truth.is_some() {
            cfg.truth = truth.clone();
        }
    }
    if cfg.threads.is_none() {
        if let Ok(v) = std::env::var(THREADS_ENV) {
            let n = v
                .trim()
                .parse()
                .map_err(|_| PromError::Validation(format!("{THREADS_ENV}={v} is not a thread count")))?;
            cfg.threads = Some(n);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| PromError::Validation(format!("thread pool: {e}")))?;
    let out = cfg.output.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
    let command = cli.command.name();
    let files = pool.install(|| match &cli.command {
        Command::Estimate { .. } => estimate(&cfg),
        Command::Design => design(&cfg),
        Command::Simulate => recipe(&cfg, RecipeKind::Simulate),
        Command::Analyze => recipe(&cfg, RecipeKind::Analyze),
    })?;
    write_outputs(&out, command, &cfg, files)
}

fn write_outputs(out: &Path, command: &str, cfg: &RunConfig, mut files: Vec<Artifact>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(cfg).map_err(|e| PromError::io(e.to_string()))?;
    text.push('\n');
    files.push(Artifact {
        name: "config.json".into(),
        bytes: text.into_bytes(),
    });
    let mut listed = Vec::new();
    for f in &files {
        write_atomic(&out.join(&f.name), &f.bytes)?;
        listed.push(json!({"name": f.name, "bytes": f.bytes.len(), "sha256": sha256_hex(&f.bytes)}));
        println!("wrote {}", out.join(&f.name).display());
    }
    let manifest = json!({
        "tool": "promkit",
        "version": env!("CARGO_PKG_VERSION"),
        "container_version": crate::container::VERSION,
        "command": command,
        "seed": cfg.seed.unwrap_or(0),
        "threads": cfg.threads,
        "config_sha256": cfg.digest(),
        "files": listed,
    });
    crate::container::write_json(&out.join("manifest.json"), &manifest)
}

fn json_artifact(name: &str, value: &Value) -> Result<Artifact> {
    let mut b = serde_json::to_vec_pretty(value).map_err(|e| PromError::io(e.to_string()))?;
    b.push(b'\n');
    Ok(Artifact {
        name: name.into(),
        bytes: b,
    })
}

fn recipe(cfg: &RunConfig, kind: RecipeKind) -> Result<Vec<Artifact>> {
    let name = cfg
        .recipe
        .as_deref()
        .ok_or_else(|| PromError::Validation("--recipe is required".into()))?;
    let want = recipe_kind(name)?;
    if want != kind {
        let other = if want == RecipeKind::Simulate {
            "simulate"
        } else {
            "analyze"
        };
        return Err(PromError::Validation(format!("recipe '{name}' belongs to '{other}'")));
    }
    let seed = cfg.seed.unwrap_or(0);
    let out = run_recipe(name, cfg, seed)?;
    let mut files = out.artifacts;
    files.push(json_artifact(
        "summary.json",
        &json!({"recipe": name, "seed": seed, "summary": out.summary}),
    )?);
    Ok(files)
}

fn design(cfg: &RunConfig) -> Result<Vec<Artifact>> {
    let mut spec = cfg
        .design
        .clone()
        .ok_or_else(|| PromError::Validation("config has no design section".into()))?;
    if let Some(s) = cfg.seed {
        spec.seed = s;
    }
    let result = design_three_point(&spec)?;
    for c in &result.candidates {
        eprintln!("{}", c.summary());
    }
    let mut value = serde_json::to_value(&result).map_err(|e| PromError::io(e.to_string()))?;
    value["seed"] = json!(spec.seed);
    Ok(vec![json_artifact("design.json", &value)?])
}

/// Counts against a truth map; only voxels with both values take part.
fn truth_stats(est: &VoxelEstimator, v: &[Option<f64>], truth: &[Option<f64>]) -> Value {
    let limit = est.vencs().values().iter().copied().fold(f64::INFINITY, f64::min);
    let (mut n, mut aliased, mut sq) = (0u64, 0u64, 0.0);
    for (a, t) in v.iter().zip(truth) {
        if let (Some(a), Some(t)) = (a, t) {
            n += 1;
            let e = est.error(*a, *t);
            if e.abs() > limit {
                aliased += 1;
            } else {
                sq += e * e;
            }
        }
    }
    let kept = (n - aliased).max(1) as f64;
    json!({
        "compared_voxels": n,
        "aliased_voxels": aliased,
        "alias_threshold": limit,
        "rss_error": sq.sqrt(),
        "rmse": (sq / kept).sqrt(),
    })
}

fn estimate(cfg: &RunConfig) -> Result<Vec<Artifact>> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| PromError::Validation("--input is required".into()))?;
    let (field, sidecar) = read_container(input)?;
    let scheme = sidecar.scheme()?;
    let choice = cfg.estimator.unwrap_or(EstimatorChoice::Voxel(EstimatorId::Prom));
    let opts = EstimatorOptions {
        offset: cfg.offset.or(sidecar.offset),
        cov: cfg.covariance.cov_mode()?,
        ..EstimatorOptions::default()
    };
    let id = match choice {
        EstimatorChoice::Voxel(id) => id,
        EstimatorChoice::PromPlus => EstimatorId::Prom,
    };
    let est = VoxelEstimator::new(id, &scheme, &opts)?;
    let pp = cfg.postprocess.unwrap_or_default();
    let n = field.num_voxels();

    let start = Instant::now();
    let mut extra = json!({});
    let mut files = Vec::new();
    let velocities: Vec<Option<f64>> = match choice {
        EstimatorChoice::Voxel(EstimatorId::Prom) => {
            let f = VelocityField::estimate(&est, &field, pp.top_m, 0.0)?;
            files.push(json_artifact(
                "candidates.json",
                &serde_json::to_value(&f.voxels).expect("serializable"),
            )?);
            f.velocities()
        }
        EstimatorChoice::Voxel(_) => (0..n)
            .into_par_iter()
            .map(|p| est.estimate(&field.voxel(p)).ok())
            .collect(),
        EstimatorChoice::PromPlus => {
            let f = VelocityField::estimate(&est, &field, pp.top_m, pp.mask_fraction)?;
            let r = prom_plus(&f, pp.span, pp.lambda, pp.max_iter)?;
            extra = json!({
                "iterations": r.iterations,
                "changes": r.changes,
                "converged": r.converged,
                "cost_trace": r.cost_trace,
            });
            files.push(json_artifact(
                "candidates.json",
                &serde_json::to_value(&r.field.voxels).expect("serializable"),
            )?);
            r.field.velocities()
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let estimated = velocities.iter().filter(|v| v.is_some()).count();

    let mut meta = MapMeta::new(field.ny, field.nx);
    meta.omega = Some(est.omega());
    meta.offset = Some(est.offset());
    meta.estimator = Some(choice.to_string());
    files.insert(
        0,
        Artifact {
            name: "velocity.f32".into(),
            bytes: encode_map(&velocities),
        },
    );
    files.insert(
        1,
        json_artifact("velocity.json", &serde_json::to_value(&meta).expect("serializable"))?,
    );

    let mut summary = json!({
        "estimator": choice.to_string(),
        "input": input,
        "voxels": n,
        "estimated_voxels": estimated,
        "masked_voxels": n - estimated,
        "seconds": seconds,
        "voxels_per_second": if seconds > 0.0 { n as f64 / seconds } else { f64::INFINITY },
        "omega": est.omega(),
        "offset": est.offset(),
    });
    if choice == EstimatorChoice::PromPlus {
        summary["prom_plus"] = extra;
        summary["iterations"] = summary["prom_plus"]["iterations"].clone();
    }
    if let Some(t) = &cfg.truth {
        let bytes = std::fs::read(t).map_err(|e| PromError::io(format!("{}: {e}", t.display())))?;
        let truth = decode_map(&bytes)?;
        if truth.len() != n {
            return Err(PromError::io_at(
                format!("truth map has {} values for {n} voxels", truth.len()),
                bytes.len() as u64,
            ));
        }
        summary["truth"] = truth_stats(&est, &velocities, &truth);
    }
    if estimated == 0 {
        eprintln!("warning: every voxel is masked; the velocity map is empty");
        summary["warning"] = json!({"code": "empty_output", "message": "every voxel is masked"});
    }
    files.push(json_artifact("summary.json", &summary)?);
    Ok(files)
}
