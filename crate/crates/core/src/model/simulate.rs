//! Forward simulation of path batches under a threshold or feedback policy.
//!
//! Paths are processed in fixed-size chunks that advance in lock-step so a
//! feedback policy can be evaluated on a whole chunk at once. Path `j` always
//! draws from `rng.substream(j)` and chunk results are concatenated in path
//! order, so output does not depend on the thread count.

use rayon::prelude::*;
use smallvec::SmallVec;

use super::dynamics::{step_euler_unchecked, Control};
use super::params::{LatentState, ModelParams, SystemState, TimeGrid};
use crate::error::{Error, Result};
use crate::rng::{sample_pair_unchecked, JumpSample, RngStream};

/// Paths advanced together; fixed so that results are partition-independent.
pub const CHUNK: usize = 256;

/// Feedback rule producing install amplitudes `(a1, a2)` from `(t, state)`.
pub trait FeedbackPolicy: Sync {
    fn amplitudes(&self, t: f64, state: &SystemState) -> [f64; 2];

    /// Batched evaluation; `out` has the same length as `states`.
    fn amplitudes_batch(&self, t: f64, states: &[SystemState], out: &mut [[f64; 2]]) {
        for (state, slot) in states.iter().zip(out.iter_mut()) {
            *slot = self.amplitudes(t, state);
        }
    }
}

impl<F> FeedbackPolicy for F
where
    F: Fn(f64, &SystemState) -> [f64; 2] + Sync,
{
    fn amplitudes(&self, t: f64, state: &SystemState) -> [f64; 2] {
        self(t, state)
    }
}

#[derive(Clone, Copy)]
pub enum Policy<'a> {
    Threshold(f64),
    Feedback(&'a dyn FeedbackPolicy),
}

impl std::fmt::Debug for Policy<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::Threshold(a) => write!(f, "Threshold({a})"),
            Policy::Feedback(_) => write!(f, "Feedback(..)"),
        }
    }
}

/// Discretization of the forward dynamics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Euler step with jumps on `(v, d, c)`.
    #[default]
    Euler,
    /// Exact simulation of the OU drivers, with jump arrival times drawn
    /// inside each step.
    ExactLatent,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Scheme::Euler),
            "exact-latent" => Ok(Scheme::ExactLatent),
            other => Err(Error::param("scheme", format!("expected `euler` or `exact-latent`, got `{other}`"))),
        }
    }
}

/// A batch of simulated trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    /// `states[j][n]` for `n = 0..=M`.
    pub states: Vec<Vec<SystemState>>,
    /// `jumps[j][n]`: jumps over `[t_n, t_{n+1})`.
    pub jumps: Vec<Vec<JumpSample>>,
    /// Jump-induced increments of `v` split by source, `dv[j][n]`.
    pub dv: Vec<Vec<[f64; 2]>>,
    /// Amplitudes applied at each step (threshold runs record `(A - v)^+` for both).
    pub controls: Vec<Vec<[f64; 2]>>,
    /// `dt * sum_n e^{-r t_n} (d_n - v_n c_n)^+` per path.
    pub running_cost: Vec<f64>,
}

impl PathBundle {
    pub fn batch_size(&self) -> usize {
        self.states.len()
    }

    /// Running cost plus `kappa * c(T)` per path.
    pub fn total_costs(&self, params: &ModelParams) -> Vec<f64> {
        self.states
            .iter()
            .zip(&self.running_cost)
            .map(|(path, run)| run + params.kappa * path.last().map_or(0.0, |s| s.c))
            .collect()
    }
}

/// Running shortfall cost contribution of one step.
#[inline]
pub fn shortfall_cost(state: &SystemState, t: f64, dt: f64, params: &ModelParams) -> f64 {
    dt * (-params.r * t).exp() * (state.d - state.v * state.c).max(0.0)
}

pub(crate) struct PathRecord {
    pub running_cost: f64,
    pub final_state: SystemState,
    pub trace: Option<PathTrace>,
}

pub(crate) struct PathTrace {
    pub states: Vec<SystemState>,
    pub jumps: Vec<JumpSample>,
    pub dv: Vec<[f64; 2]>,
    pub controls: Vec<[f64; 2]>,
}

/// Latent-driver exact step. Each jump arrives at a uniform time inside the
/// step and installs against the capacity factor just before it; the drivers
/// decay exactly between arrivals.
#[allow(clippy::too_many_arguments)]
fn step_exact(
    latent: &mut LatentState,
    state: &SystemState,
    t_n: f64,
    jumps: &JumpSample,
    control: Control,
    dt: f64,
    params: &ModelParams,
    timing: &mut RngStream,
) -> ([f64; 2], SystemState) {
    let mut arrivals: SmallVec<[(f64, usize, f64); 8]> = SmallVec::new();
    for (source, jumps) in jumps.sources.iter().enumerate() {
        for &z in &jumps.sizes {
            arrivals.push((timing.uniform_open() * dt, source, z));
        }
    }
    arrivals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let decay = |latent: &mut LatentState, span: f64| {
        latent.h1 *= (-params.xi1 * span).exp();
        latent.h2 *= (-params.xi2 * span).exp();
    };
    let mut dv = [0.0; 2];
    let mut c = state.c;
    let mut elapsed = 0.0;
    for (tau, source, z) in arrivals {
        decay(latent, tau - elapsed);
        elapsed = tau;
        let before = latent.capacity_factor(params, t_n + tau);
        latent.h1 += params.sigma_v(source) * z;
        if source == 1 {
            latent.h2 += params.sigma22 * z;
        }
        let jump = latent.capacity_factor(params, t_n + tau) - before;
        dv[source] += jump;
        let mut split = [0.0; 2];
        split[source] = jump;
        c += control.install(before, split);
    }
    decay(latent, dt - elapsed);
    let t_next = t_n + dt;
    let next = SystemState {
        v: latent.capacity_factor(params, t_next),
        d: latent.demand(params, t_next),
        c: c.max(0.0),
    };
    (dv, next)
}

fn control_for(policy: &Policy<'_>, state: &SystemState, amplitudes: [f64; 2]) -> (Control, [f64; 2]) {
    match *policy {
        Policy::Threshold(a) => {
            let gap = (a - state.v).max(0.0);
            (Control::Threshold(a), [gap, gap])
        }
        Policy::Feedback(_) => (Control::Amplitudes(amplitudes[0], amplitudes[1]), amplitudes),
    }
}

fn simulate_chunk(
    params: &ModelParams,
    grid: &TimeGrid,
    policy: &Policy<'_>,
    scheme: Scheme,
    rng: &RngStream,
    first: usize,
    len: usize,
    record: bool,
) -> Vec<PathRecord> {
    let dt = grid.dt();
    let laws = params.jump_laws();
    let x0 = params.x0();
    let mut rngs: Vec<RngStream> = (first..first + len).map(|j| rng.substream(j as u64)).collect();
    // arrival times inside a step, kept apart so both schemes see the same jumps
    let mut timings: Vec<RngStream> = match scheme {
        Scheme::Euler => Vec::new(),
        Scheme::ExactLatent => rngs.iter().map(|r| r.substream(0)).collect(),
    };
    let mut states = vec![x0; len];
    let mut latents = vec![params.latent0(); len];
    let mut running = vec![0.0; len];
    let mut amplitudes = vec![[0.0; 2]; len];
    let mut traces: Vec<PathTrace> = if record {
        (0..len)
            .map(|_| PathTrace {
                states: {
                    let mut v = Vec::with_capacity(grid.steps() + 1);
                    v.push(x0);
                    v
                },
                jumps: Vec::with_capacity(grid.steps()),
                dv: Vec::with_capacity(grid.steps()),
                controls: Vec::with_capacity(grid.steps()),
            })
            .collect()
    } else {
        Vec::new()
    };

    for n in 0..grid.steps() {
        let t = grid.t(n);
        if let Policy::Feedback(rule) = policy {
            rule.amplitudes_batch(t, &states, &mut amplitudes);
        }
        for j in 0..len {
            let state = states[j];
            running[j] += shortfall_cost(&state, t, dt, params);
            let jumps = sample_pair_unchecked(&laws, dt, &mut rngs[j]);
            let (control, applied) = control_for(policy, &state, amplitudes[j]);
            let (dv, next) = match scheme {
                Scheme::Euler => {
                    let out = step_euler_unchecked(&state, t, &jumps, control, dt, params);
                    (out.dv, out.next)
                }
                Scheme::ExactLatent => {
                    step_exact(&mut latents[j], &state, t, &jumps, control, dt, params, &mut timings[j])
                }
            };
            states[j] = next;
            if record {
                let trace = &mut traces[j];
                trace.states.push(next);
                trace.jumps.push(jumps);
                trace.dv.push(dv);
                trace.controls.push(applied);
            }
        }
    }

    let mut traces = traces.into_iter();
    (0..len)
        .map(|j| PathRecord {
            running_cost: running[j],
            final_state: states[j],
            trace: if record { traces.next() } else { None },
        })
        .collect()
}

pub(crate) fn simulate_records(
    params: &ModelParams,
    grid: &TimeGrid,
    policy: &Policy<'_>,
    scheme: Scheme,
    batch: usize,
    rng: &RngStream,
    record: bool,
) -> Result<Vec<PathRecord>> {
    params.validate()?;
    if batch == 0 {
        return Err(Error::param("batch", "need at least one path"));
    }
    if let Policy::Threshold(a) = policy {
        if !a.is_finite() || *a < 0.0 {
            return Err(Error::param("threshold", format!("must be finite and >= 0, got {a}")));
        }
    }
    let starts: Vec<usize> = (0..batch).step_by(CHUNK).collect();
    let chunks: Vec<Vec<PathRecord>> = starts
        .par_iter()
        .map(|&first| simulate_chunk(params, grid, policy, scheme, rng, first, CHUNK.min(batch - first), record))
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

fn bundle(records: Vec<PathRecord>) -> PathBundle {
    let mut out = PathBundle {
        states: Vec::with_capacity(records.len()),
        jumps: Vec::with_capacity(records.len()),
        dv: Vec::with_capacity(records.len()),
        controls: Vec::with_capacity(records.len()),
        running_cost: Vec::with_capacity(records.len()),
    };
    for rec in records {
        let trace = rec.trace.expect("recorded simulation");
        out.states.push(trace.states);
        out.jumps.push(trace.jumps);
        out.dv.push(trace.dv);
        out.controls.push(trace.controls);
        out.running_cost.push(rec.running_cost);
    }
    out
}

/// Euler-with-jumps simulation of `batch` paths from `x0`.
pub fn simulate_paths(
    params: &ModelParams,
    grid: &TimeGrid,
    policy: Policy<'_>,
    batch: usize,
    rng: &RngStream,
) -> Result<PathBundle> {
    simulate_records(params, grid, &policy, Scheme::Euler, batch, rng, true).map(bundle)
}

/// Simulation through the OU drivers with exact decay between jump arrivals.
/// Uses the same jump draws as [`simulate_paths`] for a given stream.
pub fn simulate_exact_latent(
    params: &ModelParams,
    grid: &TimeGrid,
    policy: Policy<'_>,
    batch: usize,
    rng: &RngStream,
) -> Result<PathBundle> {
    simulate_records(params, grid, &policy, Scheme::ExactLatent, batch, rng, true).map(bundle)
}

/// Dispatch on `scheme`.
pub fn simulate(
    params: &ModelParams,
    grid: &TimeGrid,
    policy: Policy<'_>,
    scheme: Scheme,
    batch: usize,
    rng: &RngStream,
) -> Result<PathBundle> {
    simulate_records(params, grid, &policy, scheme, batch, rng, true).map(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_jumps() -> ModelParams {
        ModelParams {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn exact_scheme_matches_closed_form_without_jumps() {
        let params = no_jumps();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let paths = simulate_exact_latent(&params, &grid, Policy::Threshold(1.0), 3, &RngStream::new(1, 0)).unwrap();
        for path in &paths.states {
            for (n, s) in path.iter().enumerate() {
                let t = grid.t(n);
                assert!((s.v - params.no_jump_v(t)).abs() < 1e-10);
                assert!((s.d - params.no_jump_d(t)).abs() < 1e-10);
                assert_eq!(s.c, 0.0);
            }
        }
        let last = paths.states[0][50];
        assert!((last.v - 0.341_788_287_335_102).abs() < 1e-10);
        assert!((last.d - 0.573_111_527_154_587).abs() < 1e-10);
    }

    #[test]
    fn zero_threshold_and_capacity_costs_whole_demand() {
        let params = no_jumps();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let paths = simulate_paths(&params, &grid, Policy::Threshold(0.0), 1, &RngStream::new(1, 0)).unwrap();
        let expected: f64 = (0..50)
            .map(|n| grid.dt() * (-params.r * grid.t(n)).exp() * paths.states[0][n].d)
            .sum();
        assert!((paths.running_cost[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn capacity_is_monotone_and_v_in_range() {
        let params = ModelParams::default();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        for scheme in [Scheme::Euler, Scheme::ExactLatent] {
            let paths = simulate(&params, &grid, Policy::Threshold(2.0), scheme, 300, &RngStream::new(9, 0)).unwrap();
            for path in &paths.states {
                for w in path.windows(2) {
                    assert!(w[1].c >= w[0].c);
                }
                assert!(path.iter().all(|s| (0.0..1.0).contains(&s.v) && s.d >= 0.0));
            }
        }
    }

    #[test]
    fn bundle_is_seed_deterministic() {
        let params = ModelParams::default();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let a = simulate_paths(&params, &grid, Policy::Threshold(1.5), 600, &RngStream::new(4, 2)).unwrap();
        let b = simulate_paths(&params, &grid, Policy::Threshold(1.5), 600, &RngStream::new(4, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schemes_share_jump_draws() {
        let params = ModelParams::default();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let rng = RngStream::new(8, 0);
        let a = simulate_paths(&params, &grid, Policy::Threshold(1.5), 10, &rng).unwrap();
        let b = simulate_exact_latent(&params, &grid, Policy::Threshold(1.5), 10, &rng).unwrap();
        assert_eq!(a.jumps, b.jumps);
    }

    #[test]
    fn rejects_empty_batch() {
        let grid = TimeGrid::new(1.0, 5).unwrap();
        assert!(simulate_paths(&ModelParams::default(), &grid, Policy::Threshold(1.0), 0, &RngStream::new(1, 1)).is_err());
    }
}
