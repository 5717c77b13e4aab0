//! Configuration-driven experiment runner behind the `nce-lab` binary.

mod output;
mod presets;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::asymptotics::ScoreTable;
use crate::bregman::BregmanLoss;
use crate::densities::{Density, Family, HistogramDensity, Histogram2D, ParametricModel, PartitionModel, ScoreModel};
use crate::empirical::empirical_mse;
use crate::error::{Error, Result};
use crate::integrate::GridSpec;
use crate::noisedesign::{
    default_param_range, linear_grid, log_nu_grid, optimal_noise_from_table, optimize_noise_histogram,
    optimize_noise_parametric, optimize_nu, HistogramOptConfig, NuMode, Objective, SimplexHandling,
};
use crate::optim::NcgConfig;
use crate::partition::z_benchmark;

pub use output::{Cell, Output};

/// Exit status for invalid configurations and unusable inputs.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for numerical failures.
pub const EXIT_NUMERICAL: i32 = 3;

const COMMANDS: [&str; 8] = ["mse", "zbench", "optimize-noise", "optimize-nu", "validate", "landscape", "preset", "run"];

#[derive(Debug, Parser)]
#[command(name = "nce-lab", version, about = "Asymptotic error analysis and noise design for noise-contrastive estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Asymptotic covariance, parameter error and distributional error.
    Mse {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte-Carlo benchmark of a normalizer estimator against its theory.
    Zbench {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        mc: McArgs,
        /// True normalizer of the unnormalized density.
        #[arg(long)]
        z: Option<f64>,
    },
    /// Optimize a parametric or histogram noise.
    OptimizeNoise {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        design: DesignArgs,
    },
    /// Optimize the noise-data ratio at a fixed budget.
    OptimizeNu {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fit NCE on simulated samples and compare the error with theory.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        mc: McArgs,
    },
    /// Error over a one-parameter noise family.
    Landscape {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        design: DesignArgs,
    },
    /// Reproduce one of the figure data sets (fig1 to fig7).
    Preset {
        /// fig1, fig2, ..., fig7.
        name: String,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        design: DesignArgs,
    },
    /// Run a TOML configuration file; flags override file values.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        design: DesignArgs,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// gauss-mean, gauss-var or gauss-corr.
    #[arg(long)]
    pub model: Option<String>,
    /// True data parameter.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Also estimate the log-normalizer.
    #[arg(long)]
    pub unnormalized: bool,
    /// data | param:v | normal:mean:var | optimal | optimal-kl | histogram:path
    #[arg(long)]
    pub noise: Option<String>,
    /// Noise-data ratio.
    #[arg(long)]
    pub nu: Option<f64>,
    /// Comma-separated ν grid.
    #[arg(long, value_delimiter = ',')]
    pub nu_grid: Option<Vec<f64>>,
    /// kl, revkl, js or h2.
    #[arg(long)]
    pub loss: Option<BregmanLoss>,
    /// Total sample budget.
    #[arg(long = "T")]
    pub t: Option<f64>,
    /// mse or kl.
    #[arg(long)]
    pub objective: Option<String>,
    /// Quadrature nodes per axis.
    #[arg(long)]
    pub grid_n: Option<usize>,
    /// Lower end of the quadrature range.
    #[arg(long, allow_hyphen_values = true)]
    pub grid_lo: Option<f64>,
    /// Upper end of the quadrature range.
    #[arg(long, allow_hyphen_values = true)]
    pub grid_hi: Option<f64>,
    /// Base seed for Monte-Carlo replicates.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a gnuplot script next to every CSV.
    #[arg(long)]
    pub gnuplot: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct McArgs {
    /// Monte-Carlo replicates.
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DesignArgs {
    /// parametric or histogram.
    #[arg(long)]
    pub mode: Option<String>,
    /// Noise family for parametric search (defaults to the model's family).
    #[arg(long)]
    pub noise_family: Option<String>,
    /// Lower end of the noise-parameter grid.
    #[arg(long, allow_hyphen_values = true)]
    pub param_lo: Option<f64>,
    /// Upper end of the noise-parameter grid.
    #[arg(long, allow_hyphen_values = true)]
    pub param_hi: Option<f64>,
    /// Points in the noise-parameter grid.
    #[arg(long)]
    pub param_points: Option<usize>,
    /// Optimize ν jointly with the noise parameter.
    #[arg(long)]
    pub joint_nu: bool,
    /// Iteration cap of the histogram optimizer.
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// clip-renormalize or softmax.
    #[arg(long)]
    pub simplex: Option<String>,
    /// Histogram bins (per axis in 2-D).
    #[arg(long)]
    pub bins: Option<usize>,
    /// Lower histogram edge.
    #[arg(long, allow_hyphen_values = true)]
    pub bin_lo: Option<f64>,
    /// Upper histogram edge.
    #[arg(long, allow_hyphen_values = true)]
    pub bin_hi: Option<f64>,
}

/// Declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default = "yes")]
    pub normalized: bool,
    #[serde(default = "default_noise")]
    pub noise: String,
    #[serde(default = "one")]
    pub nu: f64,
    #[serde(default)]
    pub nu_grid: Option<Vec<f64>>,
    #[serde(default = "default_loss")]
    pub loss: BregmanLoss,
    #[serde(default = "default_t", rename = "T")]
    pub t: f64,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default)]
    pub grid_n: Option<usize>,
    #[serde(default)]
    pub grid_lo: Option<f64>,
    #[serde(default)]
    pub grid_hi: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "one")]
    pub z: f64,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub noise_family: Option<String>,
    #[serde(default)]
    pub param_lo: Option<f64>,
    #[serde(default)]
    pub param_hi: Option<f64>,
    #[serde(default = "default_param_points")]
    pub param_points: usize,
    #[serde(default)]
    pub joint_nu: bool,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub simplex: SimplexHandling,
    #[serde(default)]
    pub bins: Option<usize>,
    #[serde(default)]
    pub bin_lo: Option<f64>,
    #[serde(default)]
    pub bin_hi: Option<f64>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub gnuplot: bool,
}

fn default_model() -> String {
    "gauss-mean".into()
}
fn yes() -> bool {
    true
}
fn default_noise() -> String {
    "data".into()
}
fn one() -> f64 {
    1.0
}
fn default_loss() -> BregmanLoss {
    BregmanLoss::JS
}
fn default_t() -> f64 {
    10_000.0
}
fn default_objective() -> Objective {
    Objective::Mse
}
fn default_reps() -> usize {
    500
}
fn default_mode() -> String {
    "parametric".into()
}
fn default_param_points() -> usize {
    400
}
fn default_max_iter() -> usize {
    100
}
fn default_out() -> PathBuf {
    PathBuf::from("nce-out")
}

impl ExperimentConfig {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            preset: None,
            model: default_model(),
            theta: None,
            normalized: true,
            noise: default_noise(),
            nu: 1.0,
            nu_grid: None,
            loss: default_loss(),
            t: default_t(),
            objective: default_objective(),
            grid_n: None,
            grid_lo: None,
            grid_hi: None,
            seed: 0,
            reps: default_reps(),
            z: 1.0,
            mode: default_mode(),
            noise_family: None,
            param_lo: None,
            param_hi: None,
            param_points: default_param_points(),
            joint_nu: false,
            max_iter: default_max_iter(),
            simplex: SimplexHandling::default(),
            bins: None,
            bin_lo: None,
            bin_hi: None,
            output_dir: default_out(),
            gnuplot: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn family(&self) -> Result<Family> {
        Family::parse(&self.model)
    }

    pub fn model(&self) -> Result<ParametricModel> {
        let f = self.family()?;
        ParametricModel::new(f, self.theta.unwrap_or(f.default_theta()), self.normalized).map_err(to_config)
    }

    /// Quadrature grid: the family default, with overrides.
    pub fn grid(&self, dims: usize, base: GridSpec) -> Result<GridSpec> {
        let b = if base.dims == dims { base } else { GridSpec::default_for(dims) };
        GridSpec::new(self.grid_lo.unwrap_or(b.lo), self.grid_hi.unwrap_or(b.hi), self.grid_n.unwrap_or(b.n), dims)
            .map_err(to_config)
    }

    pub fn noise_family(&self) -> Result<Family> {
        match &self.noise_family {
            Some(s) => Family::parse(s),
            None => self.family(),
        }
    }

    pub fn param_grid(&self, family: Family) -> Vec<f64> {
        let (lo, hi) = default_param_range(family);
        linear_grid(self.param_lo.unwrap_or(lo), self.param_hi.unwrap_or(hi), self.param_points)
    }

    pub fn nu_grid_or_default(&self) -> Vec<f64> {
        self.nu_grid.clone().unwrap_or_else(|| log_nu_grid(-2, 2, 20))
    }

    /// Check every field before any computation.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !COMMANDS.contains(&self.command.as_str()) || self.command == "run" {
            return bad(format!("unknown command `{}`", self.command));
        }
        if self.command == "preset" {
            match &self.preset {
                Some(p) => presets::Preset::parse(p).map(|_| ())?,
                None => return bad("missing field `preset`".into()),
            }
        }
        let fam = self.family()?;
        if let Some(t) = self.theta {
            fam.check_theta(t).map_err(to_config)?;
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return bad(format!("nu must be positive, got {}", self.nu));
        }
        if let Some(g) = &self.nu_grid {
            if g.is_empty() || g.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad("nu_grid must be a nonempty list of positive numbers".into());
            }
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return bad(format!("T must be positive, got {}", self.t));
        }
        if matches!(self.command.as_str(), "validate" | "zbench") && self.t < 2.0 {
            return bad("sampling commands need T ≥ 2".into());
        }
        if self.command == "validate" && self.reps < 100 {
            return bad(format!("validate needs reps ≥ 100, got {}", self.reps));
        }
        if self.command == "zbench" && self.reps < 2 {
            return bad(format!("zbench needs reps ≥ 2, got {}", self.reps));
        }
        if !(self.z > 0.0 && self.z.is_finite()) {
            return bad(format!("z must be positive, got {}", self.z));
        }
        if !matches!(self.mode.as_str(), "parametric" | "histogram") {
            return bad(format!("mode must be parametric or histogram, got `{}`", self.mode));
        }
        self.noise_family()?;
        if self.param_points == 0 {
            return bad("param_points must be positive".into());
        }
        if let (Some(lo), Some(hi)) = (self.param_lo, self.param_hi) {
            if !(lo <= hi) {
                return bad(format!("param_lo {lo} exceeds param_hi {hi}"));
            }
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive".into());
        }
        if let Some(b) = self.bins {
            if b < 2 {
                return bad("bins must be at least 2".into());
            }
        }
        self.grid(fam.x_dims(), GridSpec::default_for(fam.x_dims()))?;
        NoiseSpec::parse(&self.noise)?;
        Ok(())
    }

    fn apply_common(&mut self, c: &CommonArgs) -> Result<()> {
        set(&mut self.model, c.model.clone());
        if c.theta.is_some() {
            self.theta = c.theta;
        }
        if c.unnormalized {
            self.normalized = false;
        }
        set(&mut self.noise, c.noise.clone());
        set(&mut self.nu, c.nu);
        if c.nu_grid.is_some() {
            self.nu_grid = c.nu_grid.clone();
        }
        set(&mut self.loss, c.loss);
        set(&mut self.t, c.t);
        if let Some(o) = &c.objective {
            self.objective = Objective::parse(o)?;
        }
        for (dst, src) in [(&mut self.grid_lo, c.grid_lo), (&mut self.grid_hi, c.grid_hi)] {
            if src.is_some() {
                *dst = src;
            }
        }
        if c.grid_n.is_some() {
            self.grid_n = c.grid_n;
        }
        set(&mut self.seed, c.seed);
        set(&mut self.output_dir, c.out.clone());
        self.gnuplot |= c.gnuplot;
        Ok(())
    }

    fn apply_mc(&mut self, m: &McArgs) {
        set(&mut self.reps, m.reps);
    }

    fn apply_design(&mut self, d: &DesignArgs) -> Result<()> {
        set(&mut self.mode, d.mode.clone());
        if d.noise_family.is_some() {
            self.noise_family = d.noise_family.clone();
        }
        for (dst, src) in [
            (&mut self.param_lo, d.param_lo),
            (&mut self.param_hi, d.param_hi),
            (&mut self.bin_lo, d.bin_lo),
            (&mut self.bin_hi, d.bin_hi),
        ] {
            if src.is_some() {
                *dst = src;
            }
        }
        set(&mut self.param_points, d.param_points);
        self.joint_nu |= d.joint_nu;
        set(&mut self.max_iter, d.max_iter);
        if let Some(s) = &d.simplex {
            self.simplex = match s.as_str() {
                "clip-renormalize" | "clip" => SimplexHandling::ClipRenormalize,
                "softmax" => SimplexHandling::Softmax,
                other => return Err(Error::Config(format!("unknown simplex handling `{other}`"))),
            };
        }
        if d.bins.is_some() {
            self.bins = d.bins;
        }
        Ok(())
    }
}

fn set<T>(dst: &mut T, src: Option<T>) {
    if let Some(v) = src {
        *dst = v;
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Noise choice as written in configs and on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Data,
    Param(f64),
    Normal { mean: f64, var: f64 },
    Optimal(Objective),
    Histogram(PathBuf),
}

impl NoiseSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let num = |v: &str| {
            v.parse::<f64>().map_err(|_| Error::Config(format!("bad number `{v}` in noise spec `{s}`")))
        };
        let parts: Vec<&str> = s.splitn(3, ':').collect();
        match parts.as_slice() {
            ["data"] => Ok(NoiseSpec::Data),
            ["optimal"] => Ok(NoiseSpec::Optimal(Objective::Mse)),
            ["optimal-kl"] => Ok(NoiseSpec::Optimal(Objective::Kl)),
            ["param", v] => Ok(NoiseSpec::Param(num(v)?)),
            ["normal", m, v] => Ok(NoiseSpec::Normal { mean: num(m)?, var: num(v)? }),
            ["histogram", rest @ ..] if !rest.is_empty() => Ok(NoiseSpec::Histogram(PathBuf::from(&s["histogram:".len()..]))),
            _ => Err(Error::Config(format!(
                "unknown noise `{s}` (expected data, param:v, normal:mean:var, optimal, optimal-kl or histogram:path)"
            ))),
        }
    }

    /// The noise density; `table` supplies the score for optimal noises.
    pub fn build(&self, family: Family, data: &Density, table: &ScoreTable) -> Result<Density> {
        match self {
            NoiseSpec::Data => Ok(data.clone()),
            NoiseSpec::Param(v) => family.density(*v).map_err(to_config),
            NoiseSpec::Normal { mean, var } => {
                if family.x_dims() != 1 {
                    return Err(Error::Config("normal:mean:var noise is one-dimensional".into()));
                }
                Density::normal(*mean, *var).map_err(to_config)
            }
            NoiseSpec::Optimal(o) => Ok(optimal_noise_from_table(table, *o)?.density),
            NoiseSpec::Histogram(path) => {
                if family.x_dims() != 1 {
                    return Err(Error::Config("histogram noise files are one-dimensional".into()));
                }
                let f = std::fs::File::open(path)
                    .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
                Ok(Density::Histogram(HistogramDensity::read_csv(f)?))
            }
        }
    }
}

/// Summary of one run, printed to stdout.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config: ExperimentConfig,
    /// `sha256("blob <len>\0" + canonical config JSON)`.
    pub artifact_hash: String,
    pub files: Vec<String>,
    pub wall_seconds: f64,
    pub summary: serde_json::Value,
}

/// Git-style content hash of a configuration.
pub fn artifact_hash(cfg: &ExperimentConfig) -> String {
    let body = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Execute a validated configuration.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut out = Output::new(&cfg.output_dir, cfg.gnuplot)?;
    let summary = match cfg.command.as_str() {
        "mse" => cmd_mse(cfg, &mut out)?,
        "zbench" => cmd_zbench(cfg, &mut out)?,
        "optimize-noise" => cmd_optimize_noise(cfg, &mut out)?,
        "optimize-nu" => cmd_optimize_nu(cfg, &mut out)?,
        "validate" => cmd_validate(cfg, &mut out)?,
        "landscape" => cmd_landscape(cfg, &mut out)?,
        "preset" => presets::run_preset(cfg, &mut out)?,
        other => return Err(Error::Config(format!("unknown command `{other}`"))),
    };
    Ok(RunReport {
        command: cfg.command.clone(),
        config: cfg.clone(),
        artifact_hash: artifact_hash(cfg),
        files: out.into_files(),
        wall_seconds: start.elapsed().as_secs_f64(),
        summary,
    })
}

struct Setup {
    model: ParametricModel,
    table: ScoreTable,
    noise: Density,
    grid: GridSpec,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let model = cfg.model()?;
    let grid = cfg.grid(model.x_dims(), GridSpec::default_for(model.x_dims()))?;
    let table = ScoreTable::new(&model, &grid)?;
    let noise = NoiseSpec::parse(&cfg.noise)?.build(model.family, &model.data_density(), &table)?;
    Ok(Setup { model, table, noise, grid })
}

fn cmd_mse(cfg: &ExperimentConfig, out: &mut Output) -> Result<serde_json::Value> {
    let s = setup(cfg)?;
    let r = s.table.report(&s.noise, cfg.nu, cfg.loss, cfg.t)?;
    out.json("mse.json", &r)?;
    Ok(serde_json::to_value(&r).expect("report serializes"))
}

fn cmd_zbench(cfg: &ExperimentConfig, out: &mut Output) -> Result<serde_json::Value> {
    let model = cfg.model()?;
    let grid = cfg.grid(model.x_dims(), GridSpec::default_for(model.x_dims()))?;
    let f = PartitionModel::new(model.data_density(), cfg.z).map_err(to_config)?;
    let table = ScoreTable::new(&f, &grid)?;
    let noise = NoiseSpec::parse(&cfg.noise)?.build(model.family, &model.data_density(), &table)?;
    let r = z_benchmark(cfg.loss, &f, &noise, cfg.nu, cfg.t as usize, cfg.reps, cfg.seed, &grid)?;
    out.csv(
        "z_hats.csv",
        &["replicate", "z_hat"],
        r.z_hats.iter().enumerate().map(|(i, z)| vec![Cell::Int(i as u64), Cell::Num(*z)]),
    )?;
    out.json("zbench.json", &r)?;
    Ok(serde_json::to_value(&r).expect("report serializes"))
}

fn cmd_optimize_noise(cfg: &ExperimentConfig, out: &mut Output) -> Result<serde_json::Value> {
    let s = setup(cfg)?;
    if cfg.mode == "parametric" {
        parametric_search(cfg, &s, out, "curve.csv", true)
    } else {
        let init = binned_data(cfg, &s.model)?;
        let hcfg = HistogramOptConfig {
            ncg: NcgConfig { max_iter: cfg.max_iter, ..NcgConfig::default() },
            simplex: cfg.simplex,
            ..HistogramOptConfig::default()
        };
        let r = optimize_noise_histogram(&s.table, cfg.nu, cfg.loss, cfg.objective, cfg.t, &init, &hcfg)?;
        out.density("histogram.csv", &r.density)?;
        out.trace("trace.csv", &r.trace)?;
        let v = json!({
            "mode": "histogram",
            "nu": cfg.nu,
            "loss": cfg.loss,
            "objective": cfg.objective,
            "mse_initial": r.trace.first(),
            "mse_final": r.trace.last(),
            "iterations": r.iterations,
            "stop": r.stop,
        });
        out.json("optimum.json", &v)?;
        Ok(v)
    }
}

/// Initial histogram: the data density binned on the configured edges.
fn binned_data(cfg: &ExperimentConfig, model: &ParametricModel) -> Result<Density> {
    let pd = model.data_density();
    if model.x_dims() == 1 {
        let k = cfg.bins.unwrap_or(50);
        let edges = HistogramDensity::uniform_edges(cfg.bin_lo.unwrap_or(-5.0), cfg.bin_hi.unwrap_or(5.0), k);
        Ok(Density::Histogram(HistogramDensity::binned(&pd, edges).map_err(to_config)?))
    } else {
        let k = cfg.bins.unwrap_or(40);
        let edges = HistogramDensity::uniform_edges(cfg.bin_lo.unwrap_or(-4.0), cfg.bin_hi.unwrap_or(4.0), k);
        Ok(Density::Histogram2D(Histogram2D::binned(&pd, edges).map_err(to_config)?))
    }
}

fn parametric_search(
    cfg: &ExperimentConfig,
    s: &Setup,
    out: &mut Output,
    curve_name: &str,
    with_nu: bool,
) -> Result<serde_json::Value> {
    let family = cfg.noise_family()?;
    if family.x_dims() != s.model.x_dims() {
        return Err(Error::Config(format!("noise family {} does not match the model's dimension", family.name())));
    }
    let mode = if cfg.joint_nu && with_nu { NuMode::Joint(cfg.nu_grid_or_default()) } else { NuMode::Fixed(cfg.nu) };
    let r = optimize_noise_parametric(&s.table, family, &mode, &cfg.param_grid(family), cfg.loss, cfg.objective, cfg.t)?;
    if with_nu {
        out.csv(
            curve_name,
            &["noise_param", "nu", "mse"],
            r.curve.iter().map(|p| vec![Cell::Num(p.param), Cell::opt(p.mse.map(|_| p.nu)), Cell::opt(p.mse)]),
        )?;
    } else {
        out.csv(curve_name, &["noise_param", "mse"], r.curve.iter().map(|p| vec![Cell::Num(p.param), Cell::opt(p.mse)]))?;
    }
    let v = json!({
        "mode": "parametric",
        "noise_family": family.name(),
        "noise_param": r.noise_param,
        "nu": r.nu,
        "mse": r.mse,
        "local_minima": r.local_minima,
        "skipped": r.skipped,
    });
    out.json("optimum.json", &v)?;
    Ok(v)
}

fn cmd_optimize_nu(cfg: &ExperimentConfig, out: &mut Output) -> Result<serde_json::Value> {
    let s = setup(cfg)?;
    let r = optimize_nu(&s.table, &s.noise, cfg.loss, cfg.objective, &cfg.nu_grid_or_default(), cfg.t)?;
    out.csv("nu_curve.csv", &["nu", "mse"], r.curve.iter().map(|(nu, m)| vec![Cell::Num(*nu), Cell::opt(*m)]))?;
    let v = json!({ "nu_star": r.nu_star, "mse": r.mse, "noise": s.noise.id() });
    out.json("optimum.json", &v)?;
    Ok(v)
}

fn cmd_validate(cfg: &ExperimentConfig, out: &mut Output) -> Result<serde_json::Value> {
    let s = setup(cfg)?;
    let r = empirical_mse(&s.model, &s.noise, cfg.nu, cfg.t as usize, cfg.loss, cfg.reps, cfg.seed, &s.grid)?;
    let d = s.model.beta_dim();
    let mut header = vec!["replicate".to_string()];
    header.extend((0..d).map(|a| format!("beta_{a}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "beta_hats.csv",
        &header,
        r.beta_hats.iter().enumerate().map(|(i, b)| {
            let mut row = vec![Cell::Int(i as u64)];
            row.extend(b.iter().map(|v| Cell::Num(*v)));
            row
        }),
    )?;
    out.json("validate.json", &r)?;
    Ok(serde_json::to_value(&r).expect("report serializes"))
}

fn cmd_landscape(cfg: &ExperimentConfig, out: &mut Output) -> Result<serde_json::Value> {
    let s = setup(cfg)?;
    parametric_search(cfg, &s, out, "landscape.csv", false)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Io(_) => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NCE_LAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("NCE_LAB_THREADS must be a positive integer, got `{v}`")))?;
        // a pool that already exists keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Build the configuration a command line describes.
pub fn config_from_cli(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.command {
        CliCommand::Mse { common } => {
            let mut c = ExperimentConfig::new("mse");
            c.apply_common(common)?;
            c
        }
        CliCommand::Zbench { common, mc, z } => {
            let mut c = ExperimentConfig::new("zbench");
            c.apply_common(common)?;
            c.apply_mc(mc);
            set(&mut c.z, *z);
            c
        }
        CliCommand::OptimizeNoise { common, design } => {
            let mut c = ExperimentConfig::new("optimize-noise");
            c.apply_common(common)?;
            c.apply_design(design)?;
            c
        }
        CliCommand::OptimizeNu { common } => {
            let mut c = ExperimentConfig::new("optimize-nu");
            c.apply_common(common)?;
            c
        }
        CliCommand::Validate { common, mc } => {
            let mut c = ExperimentConfig::new("validate");
            c.apply_common(common)?;
            c.apply_mc(mc);
            c
        }
        CliCommand::Landscape { common, design } => {
            let mut c = ExperimentConfig::new("landscape");
            c.apply_common(common)?;
            c.apply_design(design)?;
            c
        }
        CliCommand::Preset { name, common, design } => {
            let mut c = ExperimentConfig::new("preset");
            c.preset = Some(name.clone());
            c.apply_common(common)?;
            c.apply_design(design)?;
            c
        }
        CliCommand::Run { config, common, mc, design } => {
            let mut c = ExperimentConfig::load(config)?;
            c.apply_common(common)?;
            c.apply_mc(mc);
            c.apply_design(design)?;
            c
        }
    };
    Ok(cfg)
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_CONFIG,
            };
        }
    };
    let result = configure_threads().and_then(|_| config_from_cli(&cli)).and_then(|cfg| run(&cfg));
    match result {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            0
        }
        Err(e) => {
            eprintln!("nce-lab: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_names_missing_field() {
        let e = ExperimentConfig::from_toml("").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("command")), "{e}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = ExperimentConfig::from_toml("command = \"mse\"\nfoo = 1\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("foo")), "{e}");
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = ExperimentConfig::from_toml("command = \"mse\"\nT = 500\nloss = \"kl\"\n").unwrap();
        assert_eq!(c.t, 500.0);
        assert_eq!(c.loss, BregmanLoss::KL);
        assert_eq!(c, { let mut d = ExperimentConfig::new("mse"); d.t = 500.0; d.loss = BregmanLoss::KL; d });
        c.validate().unwrap();
        let mut bad = c.clone();
        bad.nu = -1.0;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = c.clone();
        bad.noise = "laplace".into();
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = c;
        bad.command = "preset".into();
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("preset")));
    }

    #[test]
    fn noise_specs() {
        assert_eq!(NoiseSpec::parse("normal:0.5:2").unwrap(), NoiseSpec::Normal { mean: 0.5, var: 2.0 });
        assert_eq!(NoiseSpec::parse("param:-1.5").unwrap(), NoiseSpec::Param(-1.5));
        assert_eq!(NoiseSpec::parse("histogram:a:b.csv").unwrap(), NoiseSpec::Histogram("a:b.csv".into()));
        assert!(NoiseSpec::parse("normal:x:1").is_err());
    }

    #[test]
    fn hash_depends_on_content_only() {
        let a = ExperimentConfig::new("mse");
        let mut b = a.clone();
        assert_eq!(artifact_hash(&a), artifact_hash(&b));
        b.nu = 2.0;
        assert_ne!(artifact_hash(&a), artifact_hash(&b));
        assert_eq!(artifact_hash(&a).len(), 64);
    }
}
