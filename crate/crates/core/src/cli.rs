//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ate::AteMethod;
use crate::cvboot::{
    run_cv_pipeline, BootstrapSummary, Centering, CvResult, OrMethod, PipelineConfig, PointsPolicy, PsiAggregation,
};
use crate::data::{load_dataset, save_dataset, CovPoint};
use crate::error::{Error, Result};
use crate::orest::{ate_from_marginal_or, Bandwidth, KernelConfig, ResolvedBandwidth, Scale};
use crate::rng::RngStream;
use crate::scenario::{run_scenario, ScenarioKind, ScenarioSpec};
use crate::simgen::{default_config, generate_selected, generate_unbiased, simple_config, SimConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "cvate", version, about = "ATE estimation with odds-ratio control variates from outcome-selected data")]
pub struct Cli {
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an unbiased and an outcome-selected dataset with known truth.
    Simulate(SimulateArgs),
    /// Estimate the ATE from O2 with control variates built from O1.
    Estimate(EstimateArgs),
    /// Run an outer Monte Carlo experiment over dataset sizes.
    Scenario(ScenarioArgs),
    /// Print exact reference values.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Default,
    Simple,
}

#[derive(Debug, Args)]
pub struct SeedArgs {
    /// Master seed; falls back to CVC_SEED, then 0.
    #[arg(long, env = "CVC_SEED")]
    pub seed: Option<u64>,
    /// JSON config (bare or a provenance file); replaces all other settings
    /// except output location, --jobs and --timing.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// P(S=1 | Y=1).
    #[arg(long)]
    pub sel1: Option<f64>,
    /// P(S=1 | Y=0).
    #[arg(long)]
    pub sel0: Option<f64>,
}

impl SimArgs {
    fn resolve(&self) -> SimConfig {
        let mut cfg = match self.preset {
            Preset::Default => default_config(),
            Preset::Simple => simple_config(),
        };
        if let Some(v) = self.sel1 {
            cfg.sel1 = v;
        }
        if let Some(v) = self.sel0 {
            cfg.sel0 = v;
        }
        cfg
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n2: usize,
    #[arg(long, default_value_t = 10000)]
    pub n1: usize,
    #[command(flatten)]
    pub sim: SimArgs,
    #[command(flatten)]
    pub common: SeedArgs,
}

#[derive(Debug, Args)]
pub struct EstimatorArgs {
    #[arg(long, default_value = "stratified")]
    pub ate: AteMethod,
    #[arg(long = "or", default_value = "stratified")]
    pub or_method: OrMethod,
    #[arg(long, default_value = "vector")]
    pub psi: PsiAggregation,
    #[arg(long, default_value = "log")]
    pub scale: Scale,
    /// `auto`, `all`, or a count of sampled points.
    #[arg(long, default_value = "auto")]
    pub points: String,
    /// Kernel bandwidth: `auto` or a positive number.
    #[arg(long, default_value = "auto")]
    pub bandwidth: Bandwidth,
    #[arg(long)]
    pub continuity_correction: bool,
    /// Bootstrap replicates B.
    #[arg(long = "replicates", visible_alias = "B", default_value_t = 100)]
    pub replicates: usize,
    #[arg(long, default_value = "full-sample")]
    pub centering: Centering,
    /// Fixed multiplier on the correction term.
    #[arg(long)]
    pub scale_override: Option<f64>,
    #[arg(long)]
    pub force_zero_gamma: bool,
}

impl EstimatorArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let points = match self.points.as_str() {
            "auto" => PointsPolicy::Auto,
            "all" => PointsPolicy::AllDistinct,
            s => PointsPolicy::Subsample {
                count: s
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("points: expected auto, all or a count, got `{s}`")))?,
            },
        };
        let cfg = PipelineConfig {
            ate: self.ate,
            or: self.or_method,
            psi: self.psi,
            scale: self.scale,
            points,
            kernel: KernelConfig {
                bandwidth: self.bandwidth,
            },
            continuity_correction: self.continuity_correction,
            replicates: self.replicates,
            centering: self.centering,
            scale_override: self.scale_override,
            force_zero_gamma: self.force_zero_gamma,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Outcome-selected dataset.
    #[arg(long)]
    pub o1: Option<PathBuf>,
    /// Unbiased dataset.
    #[arg(long)]
    pub o2: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Treat the O2 file as outcome-selected.
    #[arg(long)]
    pub o2_biased: bool,
    /// Also write the bootstrap replicates as CSV.
    #[arg(long)]
    pub write_replicates: bool,
    /// Write wall-clock timings to timing.json.
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[command(flatten)]
    pub common: SeedArgs,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long, default_value = "ratio-fixed")]
    pub kind: ScenarioKind,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated sizes; defaults depend on the kind.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    /// n2/n1 for ratio-fixed, otherwise the held size.
    #[arg(long)]
    pub fixed: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub seeds: usize,
    #[command(flatten)]
    pub sim: SimArgs,
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[command(flatten)]
    pub common: SeedArgs,
}

#[derive(Debug, Subcommand)]
pub enum OracleCommand {
    /// ATE of a simulation config by cell enumeration.
    TrueAte {
        #[command(flatten)]
        sim: SimArgs,
        /// Simulation config JSON, replacing the flags.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// ATE of the single-binary-covariate logistic model from its odds ratio.
    MarginalOr {
        #[arg(long)]
        a: f64,
        #[arg(long)]
        b: f64,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        psi: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub seed: u64,
    pub n1: usize,
    pub n2: usize,
    pub sim: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub seed: u64,
    pub o1: PathBuf,
    pub o2: PathBuf,
    pub o2_biased: bool,
    pub write_replicates: bool,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub spec: ScenarioSpec,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Provenance<C> {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: C,
}

#[derive(Debug, Serialize)]
pub struct EstimateReport<'a> {
    pub schema_version: u32,
    pub seed: u64,
    pub n1: usize,
    pub n2: usize,
    pub replicates: usize,
    #[serde(flatten)]
    pub result: &'a CvResult,
    pub relative_reduction: Option<f64>,
    pub tau2_method: AteMethod,
    pub points: &'a [CovPoint],
    pub psi1: &'a [f64],
    pub psi2: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<&'a ResolvedBandwidth>,
    pub bootstrap: &'a BootstrapSummary,
    pub warnings: &'a [String],
}

/// Failure of a CLI run; `usage` errors exit with status 2.
#[derive(Debug)]
pub struct CliError {
    pub error: Error,
    pub usage: bool,
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        let usage = matches!(error.root(), Error::InvalidConfig(_));
        CliError { error, usage }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        if self.usage {
            2
        } else {
            1
        }
    }
}

/// Stream for the whole run: `RngStream::new(seed, 0)`.
pub fn root_stream(seed: u64) -> RngStream {
    RngStream::new(seed, 0)
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Domain(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Reads a command config from a bare config file or from the `config`
/// field of a provenance file written by the same command.
pub fn read_config<C: DeserializeOwned>(path: &Path, command: &str) -> Result<C> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let inner = match value.get("config") {
        Some(cfg) if value.get("command").is_some() => {
            let found = value["command"].as_str().unwrap_or_default();
            if found != command {
                return Err(Error::InvalidConfig(format!(
                    "{} was written by `{found}`, not `{command}`",
                    path.display()
                )));
            }
            cfg.clone()
        }
        _ => value,
    };
    serde_json::from_value(inner).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn provenance<C: Serialize>(command: &str, config: C) -> Provenance<C> {
    Provenance {
        schema_version: SCHEMA_VERSION,
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config,
    }
}

pub fn simulate_config(args: &SimulateArgs) -> Result<SimulateConfig> {
    let cfg = match &args.common.config {
        Some(p) => read_config(p, "simulate")?,
        None => SimulateConfig {
            seed: args.common.seed.unwrap_or(0),
            n1: args.n1,
            n2: args.n2,
            sim: args.sim.resolve(),
        },
    };
    cfg.sim.validate()?;
    Ok(cfg)
}

/// O₂ from `root.substream(0)`, O₁ from `root.substream(1)`.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = simulate_config(args)?;
    let root = root_stream(cfg.seed);
    let truth = cfg.sim.truth().map_err(|e| e.staged("truth"))?;
    let o2 = generate_unbiased(&cfg.sim, cfg.n2, &root.substream(0)).map_err(|e| e.staged("simulate O2"))?;
    let o1 = generate_selected(&cfg.sim, cfg.n1, &root.substream(1)).map_err(|e| e.staged("simulate O1"))?;
    create_dir(&args.out_dir)?;
    save_dataset(&o2, args.out_dir.join("o2.csv"))?;
    save_dataset(&o1, args.out_dir.join("o1.csv"))?;

    #[derive(Serialize)]
    struct TruthFile<'a> {
        schema_version: u32,
        #[serde(flatten)]
        truth: &'a crate::simgen::TruthSummary,
    }
    write_json(
        &args.out_dir.join("truth.json"),
        &TruthFile {
            schema_version: SCHEMA_VERSION,
            truth: &truth,
        },
    )?;
    write_json(&args.out_dir.join("provenance.json"), &provenance("simulate", &cfg))
}

pub fn estimate_config(args: &EstimateArgs) -> Result<EstimateConfig> {
    let cfg = match &args.common.config {
        Some(p) => read_config(p, "estimate")?,
        None => {
            let need = |p: &Option<PathBuf>, name: &str| {
                p.clone()
                    .ok_or_else(|| Error::InvalidConfig(format!("{name}: required unless --config is given")))
            };
            EstimateConfig {
                seed: args.common.seed.unwrap_or(0),
                o1: need(&args.o1, "o1")?,
                o2: need(&args.o2, "o2")?,
                o2_biased: args.o2_biased,
                write_replicates: args.write_replicates,
                pipeline: args.est.resolve()?,
            }
        }
    };
    cfg.pipeline.validate()?;
    Ok(cfg)
}

/// Estimation uses `root.substream(2)`.
pub fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = estimate_config(args)?;
    let o2 = load_dataset(&cfg.o2, cfg.o2_biased).map_err(|e| e.staged("load O2"))?;
    let o1 = load_dataset(&cfg.o1, true).map_err(|e| e.staged("load O1"))?;
    let loaded = start.elapsed();
    let out = run_cv_pipeline(&o1, &o2, &cfg.pipeline, &root_stream(cfg.seed).substream(2))?;
    let estimated = start.elapsed();

    create_dir(&args.out_dir)?;
    let report = EstimateReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        n1: o1.len(),
        n2: o2.len(),
        replicates: cfg.pipeline.replicates,
        result: &out.result,
        relative_reduction: out.result.relative_reduction(),
        tau2_method: out.tau2_estimate.method,
        points: &out.points,
        psi1: &out.psi1,
        psi2: &out.psi2,
        bandwidth: out.bandwidth.as_ref(),
        bootstrap: &out.bootstrap,
        warnings: &out.warnings,
    };
    write_json(&args.out_dir.join("report.json"), &report)?;
    if cfg.write_replicates {
        if let Some(rm) = &out.replicates {
            let path = args.out_dir.join("replicates.csv");
            let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            rm.write_csv(std::io::BufWriter::new(f)).map_err(|e| io_err(&path, e))?;
        }
    }
    write_json(&args.out_dir.join("provenance.json"), &provenance("estimate", &cfg))?;
    if args.timing {
        #[derive(Serialize)]
        struct Timing {
            schema_version: u32,
            load_seconds: f64,
            estimate_seconds: f64,
            total_seconds: f64,
        }
        write_json(
            &args.out_dir.join("timing.json"),
            &Timing {
                schema_version: SCHEMA_VERSION,
                load_seconds: loaded.as_secs_f64(),
                estimate_seconds: (estimated - loaded).as_secs_f64(),
                total_seconds: start.elapsed().as_secs_f64(),
            },
        )?;
    }
    Ok(())
}

pub fn scenario_config(args: &ScenarioArgs) -> Result<ScenarioConfig> {
    let cfg = match &args.common.config {
        Some(p) => read_config(p, "scenario")?,
        None => {
            let mut spec = ScenarioSpec::new(args.kind);
            if let Some(g) = &args.grid {
                spec.grid = g.clone();
            }
            if let Some(f) = args.fixed {
                spec.fixed = f;
            }
            spec.seeds = args.seeds;
            spec.sim = args.sim.resolve();
            spec.pipeline = args.est.resolve()?;
            ScenarioConfig {
                seed: args.common.seed.unwrap_or(0),
                spec,
            }
        }
    };
    cfg.spec.validate()?;
    Ok(cfg)
}

/// The scenario draws from `root` directly.
pub fn cmd_scenario(args: &ScenarioArgs) -> Result<()> {
    let cfg = scenario_config(args)?;
    let result = run_scenario(&cfg.spec, &root_stream(cfg.seed))?;
    create_dir(&args.out_dir)?;
    let path = args.out_dir.join("scenario.csv");
    let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    result
        .write_csv(std::io::BufWriter::new(f))
        .map_err(|e| io_err(&path, e))?;

    #[derive(Serialize)]
    struct Sidecar<'a> {
        schema_version: u32,
        #[serde(flatten)]
        result: &'a crate::scenario::ScenarioResult,
    }
    write_json(
        &args.out_dir.join("scenario.json"),
        &Sidecar {
            schema_version: SCHEMA_VERSION,
            result: &result,
        },
    )?;
    write_json(&args.out_dir.join("provenance.json"), &provenance("scenario", &cfg))
}

pub fn cmd_oracle(cmd: &OracleCommand) -> Result<String> {
    let value = match cmd {
        OracleCommand::TrueAte { sim, config } => {
            let cfg: SimConfig = match config {
                Some(p) => read_config(p, "oracle")?,
                None => sim.resolve(),
            };
            cfg.validate()?;
            let truth = cfg.truth()?;
            serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "true_ate": truth.true_ate,
                "true_log_or": truth.true_log_or,
            })
        }
        OracleCommand::MarginalOr { a, b, gamma, psi } => {
            let r = ate_from_marginal_or(*a, *b, *gamma, *psi)?;
            serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "a": a,
                "b": b,
                "gamma": gamma,
                "psi": psi,
                "enumerated": r.enumerated,
                "closed_form": r.closed_form,
                "discrepancy": r.discrepancy,
            })
        }
    };
    serde_json::to_string_pretty(&value).map_err(|e| Error::Domain(e.to_string()))
}

pub fn run(cli: &Cli) -> std::result::Result<(), CliError> {
    let work = || -> Result<()> {
        match &cli.command {
            Command::Simulate(a) => cmd_simulate(a),
            Command::Estimate(a) => cmd_estimate(a),
            Command::Scenario(a) => cmd_scenario(a),
            Command::Oracle(o) => {
                use std::io::Write;
                let text = cmd_oracle(o)?;
                // a closed pipe on stdout is not an estimation failure
                let _ = writeln!(std::io::stdout().lock(), "{text}");
                Ok(())
            }
        }
    };
    match cli.jobs {
        Some(0) => Err(Error::InvalidConfig("jobs: must be at least 1".into()).into()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Domain(e.to_string()))?;
            pool.install(work).map_err(CliError::from)
        }
        None => work().map_err(CliError::from),
    }
}
