//! Figure data sets: parametric optima, histogram optima, error curves over
//! ν and over the noise parameter, for the three toy models.

use serde_json::{json, Value};

use super::{binned_data, to_config, Cell, ExperimentConfig, Output};
use crate::asymptotics::{spd_inverse, ScoreTable};
use crate::densities::{Family, ParametricModel, ScoreModel};
use crate::error::{Error, Result};
use crate::integrate::GridSpec;
use crate::noisedesign::{
    alldata_candidates, default_param_range, linear_grid, log_nu_grid, noise_error, optimal_noise_from_table,
    optimize_noise_histogram, optimize_noise_parametric, optimize_nu, HistogramOptConfig, NuMode, Objective,
};
use crate::optim::NcgConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Optimal parametric noise against the data parameter.
    Fig1,
    /// Histogram optima, normalized 1-D models.
    Fig2,
    /// Histogram optima, correlation model.
    Fig3,
    /// Error against ν for data, parametric and all-noise optimal noise.
    Fig4,
    /// Optimal ν against the noise parameter.
    Fig5,
    /// Error against the noise parameter.
    Fig6,
    /// Histogram optima, unnormalized 1-D models.
    Fig7,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "fig1" => Preset::Fig1,
            "fig2" => Preset::Fig2,
            "fig3" => Preset::Fig3,
            "fig4" => Preset::Fig4,
            "fig5" => Preset::Fig5,
            "fig6" => Preset::Fig6,
            "fig7" => Preset::Fig7,
            other => return Err(Error::Config(format!("unknown preset `{other}` (expected fig1 to fig7)"))),
        })
    }
}

const FAMILIES: [Family; 3] = [Family::GaussMean1D, Family::GaussVar1D, Family::GaussCorr2D];

/// Grid for preset sweeps; the 2-D default is coarser to keep runs short.
fn preset_grid(cfg: &ExperimentConfig, family: Family) -> Result<GridSpec> {
    let base = match family.x_dims() {
        1 => GridSpec::default_1d(),
        _ => GridSpec::new(-6.0, 6.0, 121, 2)?,
    };
    cfg.grid(family.x_dims(), base)
}

fn table_for(cfg: &ExperimentConfig, model: &ParametricModel) -> Result<ScoreTable> {
    ScoreTable::new(model, &preset_grid(cfg, model.family)?)
}

pub fn run_preset(cfg: &ExperimentConfig, out: &mut Output) -> Result<Value> {
    let p = Preset::parse(cfg.preset.as_deref().unwrap_or_default())?;
    match p {
        Preset::Fig1 => fig1(cfg, out),
        Preset::Fig2 => histogram_rows(cfg, out, "fig2", &[(Family::GaussMean1D, 0.0, true), (Family::GaussVar1D, 1.0, true)]),
        Preset::Fig3 => histogram_rows(cfg, out, "fig3", &[(Family::GaussCorr2D, 0.0, true), (Family::GaussCorr2D, 0.3, true)]),
        Preset::Fig4 => fig4(cfg, out),
        Preset::Fig5 => fig5(cfg, out),
        Preset::Fig6 => fig6(cfg, out),
        Preset::Fig7 => histogram_rows(cfg, out, "fig7", &[(Family::GaussMean1D, 0.0, false), (Family::GaussVar1D, 1.0, false)]),
    }
}

fn data_params(f: Family) -> Vec<f64> {
    match f {
        Family::GaussMean1D => linear_grid(-2.0, 2.0, 9),
        Family::GaussVar1D => linear_grid(0.25, 4.0, 16),
        Family::GaussCorr2D => linear_grid(-0.8, 0.8, 9),
    }
}

/// Noise-parameter search range around a data parameter.
fn search_range(f: Family, theta: f64) -> (f64, f64) {
    match f {
        Family::GaussMean1D => (theta - 3.0, theta + 3.0),
        Family::GaussVar1D => (0.05 * theta, 10.0 * theta),
        Family::GaussCorr2D => default_param_range(f),
    }
}

fn fig1(cfg: &ExperimentConfig, out: &mut Output) -> Result<Value> {
    let joint_grid = log_nu_grid(-1, 1, 10);
    let mut summary = Vec::new();
    for f in FAMILIES {
        let mut rows = Vec::new();
        for theta in data_params(f) {
            let model = ParametricModel::normalized(f, theta).map_err(to_config)?;
            let table = table_for(cfg, &model)?;
            let (lo, hi) = search_range(f, theta);
            let fixed = optimize_noise_parametric(
                &table,
                f,
                &NuMode::Fixed(cfg.nu),
                &linear_grid(lo, hi, cfg.param_points),
                cfg.loss,
                cfg.objective,
                cfg.t,
            )?;
            let joint = optimize_noise_parametric(
                &table,
                f,
                &NuMode::Joint(joint_grid.clone()),
                &linear_grid(lo, hi, 101),
                cfg.loss,
                cfg.objective,
                cfg.t,
            )?;
            rows.push(vec![
                Cell::Num(theta),
                Cell::Num(fixed.noise_param),
                Cell::Num(fixed.mse),
                Cell::Num(joint.noise_param),
                Cell::Num(joint.nu),
                Cell::Num(joint.mse),
            ]);
            summary.push(json!({ "model": f.name(), "data_param": theta, "noise_param": fixed.noise_param }));
        }
        out.csv(
            &format!("fig1_{}.csv", f.name()),
            &["data_param", "noise_param", "mse", "noise_param_joint", "nu_joint", "mse_joint"],
            rows,
        )?;
    }
    Ok(json!({ "preset": "fig1", "nu": cfg.nu, "optima": summary }))
}

fn fig_nus(cfg: &ExperimentConfig) -> Vec<f64> {
    cfg.nu_grid.clone().unwrap_or_else(|| vec![0.01, 0.1, 1.0, 10.0, 100.0])
}

fn histogram_rows(cfg: &ExperimentConfig, out: &mut Output, tag: &str, models: &[(Family, f64, bool)]) -> Result<Value> {
    let hcfg = HistogramOptConfig {
        ncg: NcgConfig { max_iter: cfg.max_iter, ..NcgConfig::default() },
        simplex: cfg.simplex,
        ..HistogramOptConfig::default()
    };
    let mut summary = Vec::new();
    for &(f, theta, normalized) in models {
        let model = ParametricModel::new(f, theta, normalized).map_err(to_config)?;
        let table = table_for(cfg, &model)?;
        let init = binned_data(cfg, &model)?;
        let stem = format!("{tag}_{}_theta{theta}", f.name());
        for nu in fig_nus(cfg) {
            let r = optimize_noise_histogram(&table, nu, cfg.loss, cfg.objective, cfg.t, &init, &hcfg)?;
            out.density(&format!("{stem}_nu{nu}.csv"), &r.density)?;
            out.trace(&format!("{stem}_nu{nu}_trace.csv"), &r.trace)?;
            summary.push(json!({
                "model": f.name(),
                "theta": theta,
                "normalized": normalized,
                "nu": nu,
                "mse_initial": r.trace.first(),
                "mse_final": r.trace.last(),
                "iterations": r.iterations,
            }));
        }
        theory_overlay(&model, &table, cfg.objective, out, &format!("{stem}_theory.csv"))?;
    }
    Ok(json!({ "preset": tag, "rows": summary }))
}

/// Data density, all-noise optimum and (scalar models) the relaxed
/// all-data optimum on the grid nodes.
fn theory_overlay(model: &ParametricModel, table: &ScoreTable, objective: Objective, out: &mut Output, name: &str) -> Result<()> {
    let allnoise = optimal_noise_from_table(table, objective)?.density;
    let pd = model.data_density();
    let grid = table.grid();
    if grid.dims() == 1 {
        let relaxed = if model.beta_dim() == 1 {
            alldata_candidates(model, objective, grid.spec(), 0.01)?.relaxed_density
        } else {
            None
        };
        let rows = (0..grid.len()).step_by(5).map(|k| {
            let x = grid.point(k);
            vec![
                Cell::Num(x[0]),
                Cell::Num(pd.pdf(x)),
                Cell::Num(allnoise.pdf(x)),
                Cell::opt(relaxed.as_ref().map(|d| d.pdf(x))),
            ]
        });
        out.csv(name, &["x", "data_density", "allnoise_opt", "alldata_relaxed"], rows.collect::<Vec<_>>())
    } else {
        let rows = (0..grid.len()).map(|k| {
            let x = grid.point(k);
            vec![Cell::Num(x[0]), Cell::Num(x[1]), Cell::Num(pd.pdf(x)), Cell::Num(allnoise.pdf(x))]
        });
        out.csv(name, &["x", "y", "data_density", "allnoise_opt"], rows.collect::<Vec<_>>())
    }
}

fn fig4(cfg: &ExperimentConfig, out: &mut Output) -> Result<Value> {
    let nus = cfg.nu_grid.clone().unwrap_or_else(|| log_nu_grid(-2, 2, 10));
    let mut summary = Vec::new();
    for f in FAMILIES {
        let model = ParametricModel::normalized(f, f.default_theta()).map_err(to_config)?;
        let table = table_for(cfg, &model)?;
        let (lo, hi) = default_param_range(f);
        let best = optimize_noise_parametric(
            &table,
            f,
            &NuMode::Fixed(1.0),
            &linear_grid(lo, hi, cfg.param_points),
            cfg.loss,
            cfg.objective,
            cfg.t,
        )?;
        let lp_data = table.log_noise(&model.data_density())?;
        let lp_param = table.log_noise(&f.density(best.noise_param)?)?;
        let lp_opt = table.log_noise(&optimal_noise_from_table(&table, Objective::Mse)?.density)?;
        let inv_trace = spd_inverse(table.fisher())?.trace();
        let mut rows = Vec::new();
        for &nu in &nus {
            let e = |lp: &[f64]| noise_error(&table, lp, nu, cfg.loss, cfg.objective, cfg.t).ok();
            let t_d = cfg.t / (1.0 + nu);
            let bound = match cfg.objective {
                Objective::Mse => inv_trace / t_d,
                // the efficient distributional error is d/(2 T_d)
                Objective::Kl => table.dim() as f64 / (2.0 * t_d),
            };
            rows.push(vec![Cell::Num(nu), Cell::opt(e(&lp_data)), Cell::opt(e(&lp_param)), Cell::opt(e(&lp_opt)), Cell::Num(bound)]);
        }
        out.csv(
            &format!("fig4_{}.csv", f.name()),
            &["nu", "mse_data_noise", "mse_param_noise", "mse_opt_noise", "cramer_rao"],
            rows,
        )?;
        summary.push(json!({ "model": f.name(), "param_noise": best.noise_param }));
    }
    Ok(json!({ "preset": "fig4", "models": summary }))
}

fn fig5(cfg: &ExperimentConfig, out: &mut Output) -> Result<Value> {
    let nus = cfg.nu_grid.clone().unwrap_or_else(|| log_nu_grid(-2, 2, 20));
    let mut summary = Vec::new();
    for f in FAMILIES {
        let model = ParametricModel::normalized(f, f.default_theta()).map_err(to_config)?;
        let table = table_for(cfg, &model)?;
        let (lo, hi) = default_param_range(f);
        let mut rows = Vec::new();
        for p in linear_grid(lo, hi, 61) {
            let r = f.density(p).and_then(|d| optimize_nu(&table, &d, cfg.loss, cfg.objective, &nus, cfg.t));
            match r {
                Ok(r) => rows.push(vec![Cell::Num(p), Cell::Num(r.nu_star), Cell::Num(r.mse)]),
                Err(_) => rows.push(vec![Cell::Num(p), Cell::Missing, Cell::Missing]),
            }
        }
        out.csv(&format!("fig5_{}.csv", f.name()), &["noise_param", "nu_star", "mse"], rows)?;
        summary.push(json!({ "model": f.name(), "data_param": f.default_theta() }));
    }
    Ok(json!({ "preset": "fig5", "models": summary }))
}

fn fig6(cfg: &ExperimentConfig, out: &mut Output) -> Result<Value> {
    let mut summary = Vec::new();
    for f in FAMILIES {
        let model = ParametricModel::normalized(f, f.default_theta()).map_err(to_config)?;
        let table = table_for(cfg, &model)?;
        let (lo, hi) = default_param_range(f);
        let r = optimize_noise_parametric(
            &table,
            f,
            &NuMode::Fixed(cfg.nu),
            &linear_grid(lo, hi, cfg.param_points),
            cfg.loss,
            cfg.objective,
            cfg.t,
        )?;
        out.csv(
            &format!("fig6_{}.csv", f.name()),
            &["noise_param", "mse"],
            r.curve.iter().map(|p| vec![Cell::Num(p.param), Cell::opt(p.mse)]).collect::<Vec<_>>(),
        )?;
        summary.push(json!({ "model": f.name(), "noise_param": r.noise_param, "mse": r.mse }));
    }
    Ok(json!({ "preset": "fig6", "nu": cfg.nu, "optima": summary }))
}
