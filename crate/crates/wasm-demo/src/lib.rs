//! Browser bindings: error landscape over a noise parameter, the all-noise
//! optimal noise density, and error against the noise-data ratio.
//!
//! The plain functions return flat `[x0, y0, x1, y1, ...]` vectors and are
//! usable natively; the `#[wasm_bindgen]` wrappers expose them to JS.

use nce_lab::asymptotics::ScoreTable;
use nce_lab::bregman::BregmanLoss;
use nce_lab::densities::{Family, ParametricModel};
use nce_lab::integrate::GridSpec;
use nce_lab::noisedesign::{linear_grid, log_nu_grid, noise_error, optimal_noise_from_table, Objective};
use wasm_bindgen::prelude::*;

fn one_d_model(family: &str, unnormalized: bool) -> Result<ParametricModel, String> {
    let f = Family::parse(family).map_err(|e| e.to_string())?;
    if f.x_dims() != 1 {
        return Err(format!("the demo plots one-dimensional models, got {}", f.name()));
    }
    ParametricModel::new(f, f.default_theta(), !unnormalized).map_err(|e| e.to_string())
}

fn table(model: &ParametricModel) -> Result<ScoreTable, String> {
    ScoreTable::new(model, &GridSpec::default_1d()).map_err(|e| e.to_string())
}

fn loss(name: &str) -> Result<BregmanLoss, String> {
    name.parse().map_err(|e: nce_lab::Error| e.to_string())
}

/// `T·MSE` over `n` noise parameters in `[lo, hi]` at ratio `nu`; NaN where
/// the error is not finite.
pub fn landscape(family: &str, unnormalized: bool, loss_name: &str, nu: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, String> {
    let model = one_d_model(family, unnormalized)?;
    let t = table(&model)?;
    let l = loss(loss_name)?;
    let mut out = Vec::with_capacity(2 * n);
    for p in linear_grid(lo, hi, n) {
        let v = model
            .family
            .density(p)
            .and_then(|d| t.log_noise(&d))
            .and_then(|lp| noise_error(&t, &lp, nu, l, Objective::Mse, 1.0))
            .unwrap_or(f64::NAN);
        out.extend([p, v]);
    }
    Ok(out)
}

/// Data density and all-noise optimal noise on every fourth grid node:
/// `[x, p_d(x), p_opt(x), ...]`.
pub fn optimal_noise(family: &str, unnormalized: bool, kl_objective: bool) -> Result<Vec<f64>, String> {
    let model = one_d_model(family, unnormalized)?;
    let t = table(&model)?;
    let obj = if kl_objective { Objective::Kl } else { Objective::Mse };
    let opt = optimal_noise_from_table(&t, obj).map_err(|e| e.to_string())?.density;
    let pd = model.family.density(model.theta).map_err(|e| e.to_string())?;
    let grid = t.grid();
    let mut out = Vec::new();
    for k in (0..grid.len()).step_by(4) {
        let x = grid.point(k);
        out.extend([x[0], pd.pdf(x), opt.pdf(x)]);
    }
    Ok(out)
}

/// `T·MSE` against ν (10 points per decade on [0.01, 100]) for the noise
/// with parameter `noise_param`.
pub fn error_vs_nu(family: &str, unnormalized: bool, loss_name: &str, noise_param: f64) -> Result<Vec<f64>, String> {
    let model = one_d_model(family, unnormalized)?;
    let t = table(&model)?;
    let l = loss(loss_name)?;
    let noise = model.family.density(noise_param).map_err(|e| e.to_string())?;
    let lp = t.log_noise(&noise).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for nu in log_nu_grid(-2, 2, 10) {
        out.extend([nu, noise_error(&t, &lp, nu, l, Objective::Mse, 1.0).unwrap_or(f64::NAN)]);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = landscape)]
pub fn landscape_js(family: &str, unnormalized: bool, loss: &str, nu: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, JsError> {
    landscape(family, unnormalized, loss, nu, lo, hi, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = optimalNoise)]
pub fn optimal_noise_js(family: &str, unnormalized: bool, kl_objective: bool) -> Result<Vec<f64>, JsError> {
    optimal_noise(family, unnormalized, kl_objective).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = errorVsNu)]
pub fn error_vs_nu_js(family: &str, unnormalized: bool, loss: &str, noise_param: f64) -> Result<Vec<f64>, JsError> {
    error_vs_nu(family, unnormalized, loss, noise_param).map_err(|e| JsError::new(&e))
}
