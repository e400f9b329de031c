//! Drift and jump coefficients of `(v, d, c)` and the Euler step with jumps.
//!
//! Jumps are simulated raw (uncompensated), so the drifts below are the
//! compensated drifts minus the jump compensators. For `v` the compensator
//! terms cancel exactly and only the mean-reversion part remains.

use super::params::{ModelParams, SystemState, TimeGrid, V_CEILING};
use crate::error::{Error, Result};
use crate::rng::JumpSample;

/// Uncompensated drift of the capacity factor:
/// `(1 - v) (xi1 - s'(t)/s(t)) ln(1 - v)`.
pub fn drift_v(t: f64, v: f64, params: &ModelParams) -> Result<f64> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::Domain(format!("capacity factor v = {v} outside [0, 1)")));
    }
    Ok(drift_v_unchecked(t, v, params))
}

#[inline]
pub(crate) fn drift_v_unchecked(t: f64, v: f64, params: &ModelParams) -> f64 {
    let speed = params.xi1 - params.seasonal_rate(t) / params.seasonal(t);
    (1.0 - v) * speed * (-v).ln_1p()
}

/// Uncompensated drift of demand: `(p'(t)/p(t) - xi2) d`.
pub fn drift_d(t: f64, d: f64, params: &ModelParams) -> f64 {
    (params.load_rate(t) / params.load(t) - params.xi2) * d
}

/// Jump of `v` caused by a jump of size `z` in source `source` (0-based):
/// `(1 - v)(1 - exp(-s(t) sigma_{1i} z))`, always in `[0, 1 - v)`.
#[inline]
pub fn jump_impact_v(t: f64, v: f64, z: f64, source: usize, params: &ModelParams) -> f64 {
    let exponent = params.seasonal(t) * params.sigma_v(source) * z;
    -(1.0 - v) * (-exponent).exp_m1()
}

/// Jump of demand for a source-2 jump of size `z`: `p(t) sigma22 z`.
#[inline]
pub fn jump_impact_d(z: f64, t: f64, params: &ModelParams) -> f64 {
    params.load(t) * params.sigma22 * z
}

/// Capacity added by the threshold rule: `(A - v_pre)^+ dv`.
#[inline]
pub fn threshold_install(threshold: f64, v_pre: f64, dv: f64) -> f64 {
    (threshold - v_pre).max(0.0) * dv
}

/// Installation rule applied during one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Control {
    /// Threshold rule with level `A`.
    Threshold(f64),
    /// Feedback amplitudes `(a1, a2)` multiplying the per-source jumps of `v`.
    Amplitudes(f64, f64),
}

impl Control {
    pub fn install(&self, v_pre: f64, dv: [f64; 2]) -> f64 {
        match *self {
            Control::Threshold(a) => threshold_install(a, v_pre, dv[0] + dv[1]),
            Control::Amplitudes(a1, a2) => a1 * dv[0] + a2 * dv[1],
        }
    }
}

/// Result of one Euler step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: SystemState,
    /// Jump-induced increments of `v` split by source.
    pub dv: [f64; 2],
    /// Capacity installed during the step.
    pub install: f64,
}

/// Per-source jump increments of `v`, all evaluated at the step-start state.
#[inline]
pub fn jump_increments_v(t: f64, v: f64, jumps: &JumpSample, params: &ModelParams) -> [f64; 2] {
    let mut dv = [0.0; 2];
    for (source, acc) in dv.iter_mut().enumerate() {
        *acc = jumps.sources[source]
            .sizes
            .iter()
            .map(|&z| jump_impact_v(t, v, z, source, params))
            .sum();
    }
    dv
}

/// Euler step with jumps over `[t_n, t_n + dt)`.
pub fn step_euler(
    state: &SystemState,
    t_n: f64,
    jumps: &JumpSample,
    control: Control,
    grid: &TimeGrid,
    params: &ModelParams,
) -> Result<StepOutcome> {
    state.validate()?;
    Ok(step_euler_unchecked(state, t_n, jumps, control, grid.dt(), params))
}

#[inline]
pub(crate) fn step_euler_unchecked(
    state: &SystemState,
    t_n: f64,
    jumps: &JumpSample,
    control: Control,
    dt: f64,
    params: &ModelParams,
) -> StepOutcome {
    let dv = jump_increments_v(t_n, state.v, jumps, params);
    let dd: f64 = jumps.sources[1].sizes.iter().map(|&z| jump_impact_d(z, t_n, params)).sum();
    let v = state.v + drift_v_unchecked(t_n, state.v, params) * dt + dv[0] + dv[1];
    let d = state.d + drift_d(t_n, state.d, params) * dt + dd;
    let install = control.install(state.v, dv);
    StepOutcome {
        next: SystemState {
            v: v.clamp(0.0, V_CEILING),
            d: d.max(0.0),
            c: (state.c + install).max(0.0),
        },
        dv,
        install,
    }
}
