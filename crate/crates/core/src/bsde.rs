//! Backward deep BSDE solver for the pure-jump value of a threshold rule.
//!
//! For each time step, from the last to the first, a value network
//! `Y_n(t, v, d, c)` and a jump network `U_n(t, v, d, c, dv)` are fitted to
//! the one-step residual
//!
//! ```text
//! Y_{n+1} - (Y_n - f(t_n, X_n) dt + U_n - mean_k W_n^k)
//! ```
//!
//! where `Y_{n+1}` is the terminal cost at the last step and the frozen
//! next-step value network otherwise, and `W_n^k` re-evaluates the jump
//! network on freshly resampled jumps from the same `X_n` to estimate the
//! compensator. Each step warm-starts from the networks of the step after it.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::dynamics::{jump_increments_v, step_euler_unchecked, Control};
use crate::model::{ModelParams, SystemState, TimeGrid};
use crate::nn::{Activation, AdamState, InitScheme, Mlp, MlpGrads, OutputTransform};
use crate::rng::{sample_pair_unchecked, RngStream};

/// Value of a threshold rule as a BSDE: driver `e^{-rt}(d - v c)^+`,
/// terminal condition `kappa c`.
#[derive(Clone, Debug, PartialEq)]
pub struct BsdeProblem {
    pub params: ModelParams,
    pub grid: TimeGrid,
    pub threshold: f64,
}

impl BsdeProblem {
    pub fn new(params: ModelParams, grid: TimeGrid, threshold: f64) -> Result<Self> {
        params.validate()?;
        if !threshold.is_finite() || threshold < 0.0 {
            return Err(Error::param("threshold", format!("must be finite and >= 0, got {threshold}")));
        }
        Ok(Self {
            params,
            grid,
            threshold,
        })
    }

    pub fn driver(&self, t: f64, state: &SystemState) -> f64 {
        (-self.params.r * t).exp() * (state.d - state.v * state.c).max(0.0)
    }

    pub fn terminal(&self, state: &SystemState) -> f64 {
        self.params.kappa * state.c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BsdeTrainConfig {
    pub batch_size: usize,
    /// Jump resamples per path for the compensator estimate.
    pub aux_batch: usize,
    pub epochs_terminal: usize,
    pub epochs_other: usize,
    pub learning_rate: f64,
    pub width: usize,
    /// Reuse one path batch per step instead of re-simulating every epoch.
    pub cache_paths: bool,
}

impl Default for BsdeTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            aux_batch: 5000,
            epochs_terminal: 4000,
            epochs_other: 200,
            learning_rate: 1e-4,
            width: 100,
            cache_paths: false,
        }
    }
}

impl BsdeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if self.aux_batch == 0 {
            return Err(Error::param("aux_batch", "must be positive"));
        }
        if self.width == 0 {
            return Err(Error::param("width", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }

    /// Epoch counts and the auxiliary batch multiplied by `scale`
    /// (rounded up, at least one).
    pub fn scaled(&self, scale: f64) -> Self {
        let apply = |n: usize| -> usize {
            if n == 0 {
                0
            } else {
                ((n as f64 * scale).ceil() as usize).max(1)
            }
        };
        Self {
            epochs_terminal: apply(self.epochs_terminal),
            epochs_other: apply(self.epochs_other),
            aux_batch: apply(self.aux_batch),
            ..self.clone()
        }
    }

    pub fn epochs_for(&self, n: usize, steps: usize) -> usize {
        if n + 1 == steps {
            self.epochs_terminal
        } else {
            self.epochs_other
        }
    }
}

/// Value and jump networks of one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNets {
    pub value: Mlp,
    pub jump: Mlp,
}

impl StepNets {
    pub fn init(width: usize, rng: &mut RngStream) -> Result<Self> {
        let value = Mlp::init(
            &[4, width, width, 1],
            Activation::Tanh,
            OutputTransform::Identity,
            InitScheme::GlorotUniform,
            rng,
        )?;
        let jump = Mlp::init(
            &[5, width, width, 1],
            Activation::Tanh,
            OutputTransform::Identity,
            InitScheme::GlorotUniform,
            rng,
        )?;
        Ok(Self { value, jump })
    }

    pub fn value_at(&self, t: f64, state: &SystemState) -> f64 {
        self.value.forward(&state.features(t)).map(|y| y[0]).unwrap_or(f64::NAN)
    }
}

/// Compensator resamples for one path: how many drew no jump at all, and
/// the jump features of the rest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuxFeatures {
    pub zeros: usize,
    pub values: Vec<f64>,
}

impl AuxFeatures {
    pub fn total(&self) -> usize {
        self.zeros + self.values.len()
    }
}

/// Everything the step-`n` loss needs, for a batch of paths.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    pub t_n: f64,
    pub dt: f64,
    /// `X_n^j`.
    pub states: Vec<SystemState>,
    /// `f(t_n, X_n^j)`.
    pub drivers: Vec<f64>,
    /// Jump feature of the realized step, `dv^{(1)} + dv^{(2)}`.
    pub features: Vec<f64>,
    /// Regression target `Y_{n+1}^j`.
    pub targets: Vec<f64>,
    pub aux: Vec<AuxFeatures>,
}

/// Simulated paths from `x0` up to `t_{n+1}` with the realized step-`n` jumps.
struct StepPaths {
    states: Vec<SystemState>,
    next: Vec<SystemState>,
    features: Vec<f64>,
}

fn simulate_to_step(problem: &BsdeProblem, n: usize, batch: usize, rng: &RngStream) -> StepPaths {
    let params = &problem.params;
    let dt = problem.grid.dt();
    let laws = params.jump_laws();
    let control = Control::Threshold(problem.threshold);
    let mut out = StepPaths {
        states: Vec::with_capacity(batch),
        next: Vec::with_capacity(batch),
        features: Vec::with_capacity(batch),
    };
    for j in 0..batch {
        let mut path_rng = rng.substream(j as u64);
        let mut state = params.x0();
        for i in 0..n {
            let jumps = sample_pair_unchecked(&laws, dt, &mut path_rng);
            state = step_euler_unchecked(&state, problem.grid.t(i), &jumps, control, dt, params).next;
        }
        let jumps = sample_pair_unchecked(&laws, dt, &mut path_rng);
        let step = step_euler_unchecked(&state, problem.grid.t(n), &jumps, control, dt, params);
        out.states.push(state);
        out.next.push(step.next);
        out.features.push(step.dv[0] + step.dv[1]);
    }
    out
}

fn sample_aux(problem: &BsdeProblem, t_n: f64, states: &[SystemState], size: usize, rng: &RngStream) -> Vec<AuxFeatures> {
    let params = &problem.params;
    let laws = params.jump_laws();
    let dt = problem.grid.dt();
    states
        .iter()
        .enumerate()
        .map(|(j, state)| {
            let mut aux_rng = rng.substream(j as u64);
            let mut aux = AuxFeatures::default();
            for _ in 0..size {
                let jumps = sample_pair_unchecked(&laws, dt, &mut aux_rng);
                if jumps.is_empty() {
                    aux.zeros += 1;
                } else {
                    let dv = jump_increments_v(t_n, state.v, &jumps, params);
                    aux.values.push(dv[0] + dv[1]);
                }
            }
            aux
        })
        .collect()
}

/// Draws the step-`n` batch: fresh paths, targets and compensator resamples.
pub fn draw_step_batch(
    problem: &BsdeProblem,
    n: usize,
    frozen_next: Option<&Mlp>,
    batch_size: usize,
    aux_batch: usize,
    path_rng: &RngStream,
    aux_rng: &RngStream,
) -> Result<StepBatch> {
    let steps = problem.grid.steps();
    if n >= steps {
        return Err(Error::param("step", format!("step {n} outside 0..{steps}")));
    }
    let t_n = problem.grid.t(n);
    let paths = simulate_to_step(problem, n, batch_size, path_rng);
    let targets = if n + 1 == steps {
        paths.next.iter().map(|s| problem.terminal(s)).collect()
    } else {
        let net = frozen_next.ok_or_else(|| Error::param("frozen_next", "needed before the last step"))?;
        let t_next = problem.grid.t(n + 1);
        let x = state_rows(&paths.next, t_next, None);
        net.forward_batch(x.view())?.column(0).to_vec()
    };
    let drivers = paths.states.iter().map(|s| problem.driver(t_n, s)).collect();
    let aux = sample_aux(problem, t_n, &paths.states, aux_batch, aux_rng);
    Ok(StepBatch {
        t_n,
        dt: problem.grid.dt(),
        states: paths.states,
        drivers,
        features: paths.features,
        targets,
        aux,
    })
}

fn state_rows(states: &[SystemState], t: f64, feature: Option<&[f64]>) -> Array2<f64> {
    let cols = if feature.is_some() { 5 } else { 4 };
    let mut x = Array2::zeros((states.len(), cols));
    for (j, s) in states.iter().enumerate() {
        let row = s.features(t);
        for k in 0..4 {
            x[[j, k]] = row[k];
        }
        if let Some(f) = feature {
            x[[j, 4]] = f[j];
        }
    }
    x
}

/// Jump-network input rows: realized features, one zero-feature row per
/// path, then every nonzero resample.
fn jump_rows(batch: &StepBatch) -> Array2<f64> {
    let b = batch.states.len();
    let extra: usize = batch.aux.iter().map(|a| a.values.len()).sum();
    let mut x = Array2::zeros((2 * b + extra, 5));
    let mut row = 2 * b;
    for (j, s) in batch.states.iter().enumerate() {
        let base = s.features(batch.t_n);
        for k in 0..4 {
            x[[j, k]] = base[k];
            x[[b + j, k]] = base[k];
        }
        x[[j, 4]] = batch.features[j];
        for &value in &batch.aux[j].values {
            for k in 0..4 {
                x[[row, k]] = base[k];
            }
            x[[row, 4]] = value;
            row += 1;
        }
    }
    x
}

struct LossParts {
    loss: f64,
    value_grads: Option<MlpGrads>,
    jump_grads: Option<MlpGrads>,
}

fn evaluate(nets: &StepNets, batch: &StepBatch, with_grads: bool) -> Result<LossParts> {
    let b = batch.states.len();
    if b == 0 {
        return Err(Error::param("batch", "empty batch"));
    }
    let value_x = state_rows(&batch.states, batch.t_n, None);
    let jump_x = jump_rows(batch);
    let value_cache = nets.value.forward_cached(value_x.view())?;
    let jump_cache = nets.jump.forward_cached(jump_x.view())?;
    let y = value_cache.output.column(0);
    let u = jump_cache.output.column(0);

    let mut residuals = Vec::with_capacity(b);
    let mut offset = 2 * b;
    let mut offsets = Vec::with_capacity(b);
    for j in 0..b {
        let aux = &batch.aux[j];
        let total = aux.total();
        if total == 0 {
            return Err(Error::param("aux_batch", "must be positive"));
        }
        let count = aux.values.len();
        let sum_nonzero: f64 = (offset..offset + count).map(|r| u[r]).sum();
        let compensator = (aux.zeros as f64 * u[b + j] + sum_nonzero) / total as f64;
        offsets.push(offset);
        offset += count;
        let e = batch.targets[j] - (y[j] - batch.drivers[j] * batch.dt + u[j] - compensator);
        if !e.is_finite() {
            let s = batch.states[j];
            return Err(Error::NonFinite {
                index: j,
                detail: format!(
                    "residual {e} at t={} state (v={}, d={}, c={}), target {}",
                    batch.t_n, s.v, s.d, s.c, batch.targets[j]
                ),
            });
        }
        residuals.push(e);
    }
    let loss = residuals.iter().map(|e| e * e).sum::<f64>() / b as f64;
    if !with_grads {
        return Ok(LossParts {
            loss,
            value_grads: None,
            jump_grads: None,
        });
    }

    let mut dy = Array2::zeros((b, 1));
    let mut du = Array2::zeros((jump_x.nrows(), 1));
    for j in 0..b {
        let g = 2.0 * residuals[j] / b as f64;
        dy[[j, 0]] = -g;
        du[[j, 0]] = -g;
        let aux = &batch.aux[j];
        let per_sample = g / aux.total() as f64;
        du[[b + j, 0]] = per_sample * aux.zeros as f64;
        for r in offsets[j]..offsets[j] + aux.values.len() {
            du[[r, 0]] = per_sample;
        }
    }
    let (value_grads, _) = nets.value.backward(&value_cache, dy.view());
    let (jump_grads, _) = nets.jump.backward(&jump_cache, du.view());
    Ok(LossParts {
        loss,
        value_grads: Some(value_grads),
        jump_grads: Some(jump_grads),
    })
}

/// Mean squared one-step residual of the batch.
pub fn bsde_step_loss(nets: &StepNets, batch: &StepBatch) -> Result<f64> {
    evaluate(nets, batch, false).map(|p| p.loss)
}

/// Loss and its gradients with respect to the value and jump networks.
pub fn bsde_step_loss_and_grad(nets: &StepNets, batch: &StepBatch) -> Result<(f64, MlpGrads, MlpGrads)> {
    let parts = evaluate(nets, batch, true)?;
    Ok((
        parts.loss,
        parts.value_grads.expect("requested"),
        parts.jump_grads.expect("requested"),
    ))
}

/// Streams used for step `n`: paths per epoch and compensator resamples.
fn step_streams(master: &RngStream, n: usize) -> (RngStream, RngStream) {
    let step = master.substream(n as u64);
    (step.substream(0), step.substream(1))
}

/// Fits the networks of step `n`, starting from `warm`.
pub fn train_timestep(
    n: usize,
    problem: &BsdeProblem,
    config: &BsdeTrainConfig,
    warm: StepNets,
    frozen_next: Option<&Mlp>,
    master: &RngStream,
) -> Result<(StepNets, Vec<f64>)> {
    config.validate()?;
    let epochs = config.epochs_for(n, problem.grid.steps());
    let mut nets = warm;
    let mut value_opt = AdamState::new(&nets.value, config.learning_rate);
    let mut jump_opt = AdamState::new(&nets.jump, config.learning_rate);
    let (paths_rng, aux_rng) = step_streams(master, n);
    let mut history = Vec::with_capacity(epochs);
    let mut cached: Option<StepBatch> = None;
    for epoch in 0..epochs {
        let epoch_aux = aux_rng.substream(epoch as u64);
        let batch = if config.cache_paths {
            match cached.take() {
                Some(mut batch) => {
                    batch.aux = sample_aux(problem, batch.t_n, &batch.states, config.aux_batch, &epoch_aux);
                    batch
                }
                None => draw_step_batch(
                    problem,
                    n,
                    frozen_next,
                    config.batch_size,
                    config.aux_batch,
                    &paths_rng.substream(0),
                    &epoch_aux,
                )?,
            }
        } else {
            draw_step_batch(
                problem,
                n,
                frozen_next,
                config.batch_size,
                config.aux_batch,
                &paths_rng.substream(epoch as u64),
                &epoch_aux,
            )?
        };
        let (loss, value_grads, jump_grads) = bsde_step_loss_and_grad(&nets, &batch)?;
        history.push(loss);
        value_opt.update(&mut nets.value, &value_grads);
        jump_opt.update(&mut nets.jump, &jump_grads);
        if config.cache_paths {
            cached = Some(batch);
        }
    }
    Ok((nets, history))
}

#[derive(Clone, Debug)]
pub struct BsdeSolution {
    /// Networks for steps `0..M`.
    pub nets: Vec<StepNets>,
    /// Value network of step 0 evaluated at `(0, x0)`.
    pub y0: f64,
    /// Per-step loss histories, indexed by step.
    pub loss_histories: Vec<Vec<f64>>,
}

impl BsdeSolution {
    /// Last recorded loss of each step (NaN for steps trained zero epochs).
    pub fn final_losses(&self) -> Vec<f64> {
        self.loss_histories
            .iter()
            .map(|h| h.last().copied().unwrap_or(f64::NAN))
            .collect()
    }
}

/// Backward sweep over all steps, warm-starting each from its successor.
pub fn solve_bsde(problem: &BsdeProblem, config: &BsdeTrainConfig, master: &RngStream) -> Result<BsdeSolution> {
    config.validate()?;
    let steps = problem.grid.steps();
    let mut init_rng = master.substream(u64::MAX);
    let mut current = StepNets::init(config.width, &mut init_rng)?;
    let mut nets: Vec<Option<StepNets>> = vec![None; steps];
    let mut histories = vec![Vec::new(); steps];
    let training = master.substream(u64::MAX - 1);
    for n in (0..steps).rev() {
        let frozen = nets.get(n + 1).and_then(|o| o.as_ref()).map(|s| &s.value);
        let (trained, history) = train_timestep(n, problem, config, current.clone(), frozen, &training)?;
        log::debug!(
            "A={} step {n}: {} epochs, final loss {:?}",
            problem.threshold,
            history.len(),
            history.last()
        );
        current = trained.clone();
        nets[n] = Some(trained);
        histories[n] = history;
    }
    let nets: Vec<StepNets> = nets.into_iter().map(|n| n.expect("every step trained")).collect();
    let y0 = nets[0].value_at(0.0, &problem.params.x0());
    if !y0.is_finite() {
        return Err(Error::NonFinite {
            index: 0,
            detail: format!("Y0 = {y0}"),
        });
    }
    Ok(BsdeSolution {
        nets,
        y0,
        loss_histories: histories,
    })
}
