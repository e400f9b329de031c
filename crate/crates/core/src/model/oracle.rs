//! Plain Monte Carlo estimate of the discounted cost functional.

use serde::{Deserialize, Serialize};

use super::params::{ModelParams, SystemState, TimeGrid};
use super::simulate::{simulate_records, Policy, Scheme};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub paths: usize,
}

/// Sample mean and standard error of the mean, summed in index order.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 || values.iter().all(|&x| x == values[0]) {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-path realized costs `running + kappa * c(T)`.
pub fn path_costs(
    params: &ModelParams,
    grid: &TimeGrid,
    policy: Policy<'_>,
    scheme: Scheme,
    paths: usize,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    let records = simulate_records(params, grid, &policy, scheme, paths, rng, false)?;
    Ok(records
        .iter()
        .map(|r| r.running_cost + params.kappa * r.final_state.c)
        .collect())
}

/// States at the horizon, without keeping whole trajectories.
pub fn terminal_states(
    params: &ModelParams,
    grid: &TimeGrid,
    policy: Policy<'_>,
    scheme: Scheme,
    paths: usize,
    rng: &RngStream,
) -> Result<Vec<SystemState>> {
    let records = simulate_records(params, grid, &policy, scheme, paths, rng, false)?;
    Ok(records.iter().map(|r| r.final_state).collect())
}

/// Monte Carlo estimate of `J(0, x0)` under `policy` from `paths` paths.
pub fn mc_cost(
    params: &ModelParams,
    grid: &TimeGrid,
    policy: Policy<'_>,
    scheme: Scheme,
    paths: usize,
    rng: &RngStream,
) -> Result<McEstimate> {
    if paths < 2 {
        return Err(Error::param("paths", format!("need at least 2 paths, got {paths}")));
    }
    let costs = path_costs(params, grid, policy, scheme, paths, rng)?;
    let (estimate, std_error) = mean_and_se(&costs);
    Ok(McEstimate {
        estimate,
        std_error,
        paths,
    })
}
