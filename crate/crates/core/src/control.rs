//! Global feedback control trained on simulated rollouts.
//!
//! A policy network maps `(t, v, d, c)` to two nonnegative amplitudes
//! `(a1, a2)`; at each step the installed capacity grows by
//! `a1 dv1 + a2 dv2`. The training loss is the batch mean of the realized
//! discounted shortfall plus terminal installation cost, differentiated
//! pathwise with the jump draws held fixed.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::dynamics::{step_euler_unchecked, Control};
use crate::model::{mc_cost, shortfall_cost, FeedbackPolicy, McEstimate, ModelParams, Policy, Scheme, SystemState, TimeGrid};
use crate::nn::{Activation, AdamState, InitScheme, Mlp, MlpGrads, OutputTransform};
use crate::rng::{sample_pair_unchecked, RngStream};

/// Feedback policy `(t, v, d, c) -> (a1, a2)` with softplus outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    net: Mlp,
}

impl PolicyNet {
    pub fn init(width: usize, rng: &mut RngStream) -> Result<Self> {
        let net = Mlp::init(
            &[4, width, width, 2],
            Activation::Relu,
            OutputTransform::Softplus,
            InitScheme::HeNormal,
            rng,
        )?;
        Ok(Self { net })
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.input_dim() != 4 {
            return Err(Error::Shape {
                expected: 4,
                got: net.input_dim(),
            });
        }
        if net.output_dim() != 2 {
            return Err(Error::Shape {
                expected: 2,
                got: net.output_dim(),
            });
        }
        if net.output_transform() != OutputTransform::Softplus {
            return Err(Error::NetworkFormat("policy output must be softplus".into()));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn into_mlp(self) -> Mlp {
        self.net
    }
}

fn input_rows(t: f64, states: &[SystemState]) -> Array2<f64> {
    let mut x = Array2::zeros((states.len(), 4));
    for (j, s) in states.iter().enumerate() {
        for (k, value) in s.features(t).into_iter().enumerate() {
            x[[j, k]] = value;
        }
    }
    x
}

impl FeedbackPolicy for PolicyNet {
    fn amplitudes(&self, t: f64, state: &SystemState) -> [f64; 2] {
        let mut out = [[0.0; 2]];
        self.amplitudes_batch(t, std::slice::from_ref(state), &mut out);
        out[0]
    }

    fn amplitudes_batch(&self, t: f64, states: &[SystemState], out: &mut [[f64; 2]]) {
        let x = input_rows(t, states);
        let y = self.net.forward_batch(x.view()).expect("policy input width is fixed");
        for (slot, row) in out.iter_mut().zip(y.rows()) {
            *slot = [row[0], row[1]];
        }
    }
}

/// Policy that never installs.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPolicy;

impl FeedbackPolicy for ZeroPolicy {
    fn amplitudes(&self, _t: f64, _state: &SystemState) -> [f64; 2] {
        [0.0, 0.0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub width: usize,
    /// Paths of the out-of-sample evaluation after training.
    pub eval_paths: usize,
}

impl Default for ControlTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2000,
            epochs: 50,
            learning_rate: 1e-4,
            width: 256,
            eval_paths: 100_000,
        }
    }
}

impl ControlTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if self.width == 0 {
            return Err(Error::param("width", "must be positive"));
        }
        if self.eval_paths < 2 {
            return Err(Error::param("eval_paths", format!("need at least 2, got {}", self.eval_paths)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }

    /// Epoch count multiplied by `scale`, rounded up.
    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            epochs: if self.epochs == 0 {
                0
            } else {
                ((self.epochs as f64 * scale).ceil() as usize).max(1)
            },
            ..self.clone()
        }
    }
}

/// Batch loss and the realized cost of every path.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub loss: f64,
    pub path_costs: Vec<f64>,
}

/// What the reverse pass needs from the forward rollout.
struct Tape {
    inputs: Vec<Array2<f64>>,
    dv: Vec<Vec<[f64; 2]>>,
    /// `d(running cost)/dc` per step and path.
    cost_slopes: Vec<Vec<f64>>,
}

fn run(
    policy: &PolicyNet,
    params: &ModelParams,
    grid: &TimeGrid,
    batch: usize,
    rng: &RngStream,
    record: bool,
) -> Result<(Rollout, Option<Tape>)> {
    params.validate()?;
    if batch == 0 {
        return Err(Error::param("batch", "need at least one path"));
    }
    let dt = grid.dt();
    let laws = params.jump_laws();
    let mut rngs: Vec<RngStream> = (0..batch).map(|j| rng.substream(j as u64)).collect();
    let mut states = vec![params.x0(); batch];
    let mut running = vec![0.0; batch];
    let mut tape = record.then(|| Tape {
        inputs: Vec::with_capacity(grid.steps()),
        dv: Vec::with_capacity(grid.steps()),
        cost_slopes: Vec::with_capacity(grid.steps()),
    });
    for n in 0..grid.steps() {
        let t = grid.t(n);
        let x = input_rows(t, &states);
        let a = policy.net.forward_batch(x.view())?;
        let mut dvs = Vec::with_capacity(if record { batch } else { 0 });
        let mut slopes = Vec::with_capacity(if record { batch } else { 0 });
        for j in 0..batch {
            let state = states[j];
            running[j] += shortfall_cost(&state, t, dt, params);
            let jumps = sample_pair_unchecked(&laws, dt, &mut rngs[j]);
            let step = step_euler_unchecked(&state, t, &jumps, Control::Amplitudes(a[[j, 0]], a[[j, 1]]), dt, params);
            if record {
                dvs.push(step.dv);
                slopes.push(if state.d > state.v * state.c {
                    -dt * (-params.r * t).exp() * state.v
                } else {
                    0.0
                });
            }
            states[j] = step.next;
        }
        if let Some(tape) = tape.as_mut() {
            tape.inputs.push(x);
            tape.dv.push(dvs);
            tape.cost_slopes.push(slopes);
        }
    }
    let path_costs: Vec<f64> = running
        .iter()
        .zip(&states)
        .map(|(run, s)| run + params.kappa * s.c)
        .collect();
    if let Some(j) = path_costs.iter().position(|c| !c.is_finite()) {
        let s = states[j];
        return Err(Error::NonFinite {
            index: j,
            detail: format!("path cost {} with final state (v={}, d={}, c={})", path_costs[j], s.v, s.d, s.c),
        });
    }
    let loss = path_costs.iter().sum::<f64>() / batch as f64;
    Ok((Rollout { loss, path_costs }, tape))
}

/// Mean realized cost of `batch` rollouts under `policy` (Euler scheme).
/// Path `j` uses `rng.substream(j)`, the same draws as the Monte Carlo oracle.
pub fn rollout_loss(
    policy: &PolicyNet,
    params: &ModelParams,
    grid: &TimeGrid,
    batch: usize,
    rng: &RngStream,
) -> Result<Rollout> {
    run(policy, params, grid, batch, rng, false).map(|(r, _)| r)
}

/// Rollout loss and its gradient in the policy parameters, by reverse
/// accumulation through time with the jumps held fixed.
pub fn rollout_loss_and_grad(
    policy: &PolicyNet,
    params: &ModelParams,
    grid: &TimeGrid,
    batch: usize,
    rng: &RngStream,
) -> Result<(Rollout, MlpGrads)> {
    let (rollout, tape) = run(policy, params, grid, batch, rng, true)?;
    let tape = tape.expect("recorded");
    let scale = 1.0 / batch as f64;
    // adjoint of c_n
    let mut adjoint = vec![params.kappa * scale; batch];
    let mut grads = MlpGrads::zeros_like(&policy.net);
    let mut dy = Array2::zeros((batch, 2));
    for n in (0..grid.steps()).rev() {
        let cache = policy.net.forward_cached(tape.inputs[n].view())?;
        for j in 0..batch {
            dy[[j, 0]] = adjoint[j] * tape.dv[n][j][0];
            dy[[j, 1]] = adjoint[j] * tape.dv[n][j][1];
        }
        let (step_grads, dx) = policy.net.backward(&cache, dy.view());
        grads.add_assign(&step_grads);
        for j in 0..batch {
            adjoint[j] += dx[[j, 3]] + tape.cost_slopes[n][j] * scale;
        }
    }
    Ok((rollout, grads))
}

/// Stream of epoch `e`'s training batch.
pub fn training_stream(master: &RngStream, epoch: usize) -> RngStream {
    master.substream(0).substream(epoch as u64)
}

/// Stream of the out-of-sample evaluation, disjoint from every training batch.
pub fn evaluation_stream(master: &RngStream) -> RngStream {
    master.substream(2)
}

#[derive(Clone, Debug)]
pub struct ControlTraining {
    pub policy: PolicyNet,
    pub loss_history: Vec<f64>,
    pub out_of_sample: McEstimate,
}

/// Adam on the rollout loss, one fresh batch per epoch, followed by an
/// out-of-sample Monte Carlo evaluation of the final policy.
pub fn train_policy(
    params: &ModelParams,
    grid: &TimeGrid,
    config: &ControlTrainConfig,
    master: &RngStream,
) -> Result<ControlTraining> {
    config.validate()?;
    params.validate()?;
    let mut policy = PolicyNet::init(config.width, &mut master.substream(1))?;
    let mut adam = AdamState::new(&policy.net, config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let rng = training_stream(master, epoch);
        let (rollout, grads) =
            rollout_loss_and_grad(&policy, params, grid, config.batch_size, &rng).map_err(|e| match e {
                Error::NonFinite { index, detail } => Error::NonFinite {
                    index,
                    detail: format!("epoch {epoch}: {detail}"),
                },
                other => other,
            })?;
        log::debug!("epoch {epoch}: loss {:.6}", rollout.loss);
        history.push(rollout.loss);
        adam.update(&mut policy.net, &grads);
    }
    let out_of_sample = evaluate_policy(&policy, params, grid, config.eval_paths, &evaluation_stream(master))?;
    Ok(ControlTraining {
        policy,
        loss_history: history,
        out_of_sample,
    })
}

/// Monte Carlo cost of a trained policy.
pub fn evaluate_policy(
    policy: &PolicyNet,
    params: &ModelParams,
    grid: &TimeGrid,
    paths: usize,
    rng: &RngStream,
) -> Result<McEstimate> {
    mc_cost(params, grid, Policy::Feedback(policy), Scheme::Euler, paths, rng)
}

/// State coordinate swept by a policy surface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceAxis {
    T,
    V,
    D,
    C,
}

impl SurfaceAxis {
    fn index(self) -> usize {
        match self {
            SurfaceAxis::T => 0,
            SurfaceAxis::V => 1,
            SurfaceAxis::D => 2,
            SurfaceAxis::C => 3,
        }
    }
}

impl std::str::FromStr for SurfaceAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" => Ok(SurfaceAxis::T),
            "v" => Ok(SurfaceAxis::V),
            "d" => Ok(SurfaceAxis::D),
            "c" => Ok(SurfaceAxis::C),
            other => Err(Error::param("axis", format!("expected one of t, v, d, c, got `{other}`"))),
        }
    }
}

/// Two-dimensional slice through `(t, v, d, c)`; the other coordinates stay
/// at `t = 0` and `x0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceSpec {
    pub axis1: SurfaceAxis,
    pub range1: [f64; 2],
    pub axis2: SurfaceAxis,
    pub range2: [f64; 2],
    pub resolution: [usize; 2],
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        Self {
            axis1: SurfaceAxis::T,
            range1: [0.0, 1.0],
            axis2: SurfaceAxis::V,
            range2: [0.0, 0.95],
            resolution: [21, 21],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub x1: f64,
    pub x2: f64,
    pub a1: f64,
    pub a2: f64,
}

fn linspace(range: [f64; 2], n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![range[0]];
    }
    (0..n)
        .map(|i| range[0] + (range[1] - range[0]) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Tabulates the amplitudes over a grid, `axis1` outermost.
pub fn policy_surface(policy: &dyn FeedbackPolicy, params: &ModelParams, spec: &SurfaceSpec) -> Result<Vec<SurfacePoint>> {
    if spec.axis1 == spec.axis2 {
        return Err(Error::param("axis2", "must differ from axis1"));
    }
    if spec.resolution.contains(&0) {
        return Err(Error::param("resolution", "must be positive"));
    }
    for range in [spec.range1, spec.range2] {
        if !(range[0].is_finite() && range[1].is_finite()) {
            return Err(Error::param("range", "bounds must be finite"));
        }
    }
    let x0 = params.x0();
    let base = x0.features(0.0);
    let mut out = Vec::with_capacity(spec.resolution[0] * spec.resolution[1]);
    for x1 in linspace(spec.range1, spec.resolution[0]) {
        for x2 in linspace(spec.range2, spec.resolution[1]) {
            let mut coords = base;
            coords[spec.axis1.index()] = x1;
            coords[spec.axis2.index()] = x2;
            let state = SystemState::new(coords[1], coords[2], coords[3]);
            let [a1, a2] = policy.amplitudes(coords[0], &state);
            out.push(SurfacePoint { x1, x2, a1, a2 });
        }
    }
    Ok(out)
}

/// Mean amplitudes of a policy over the rows of `inputs` (`t, v, d, c`).
pub fn mean_controls(policy: &PolicyNet, inputs: ArrayView2<'_, f64>) -> Result<[f64; 2]> {
    let y = policy.net.forward_batch(inputs)?;
    let n = y.nrows().max(1) as f64;
    Ok([y.column(0).sum() / n, y.column(1).sum() / n])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(width: usize, seed: u64) -> PolicyNet {
        PolicyNet::init(width, &mut RngStream::new(seed, 9)).unwrap()
    }

    #[test]
    fn outputs_are_positive() {
        let policy = tiny(8, 1);
        for v in [0.0, 0.3, 0.9] {
            let a = policy.amplitudes(0.5, &SystemState::new(v, 0.7, 2.0));
            assert!(a[0] > 0.0 && a[1] > 0.0);
        }
    }

    #[test]
    fn single_and_batched_agree() {
        let policy = tiny(8, 2);
        let states = [SystemState::new(0.1, 0.5, 0.0), SystemState::new(0.6, 1.0, 0.3)];
        let mut out = [[0.0; 2]; 2];
        policy.amplitudes_batch(0.25, &states, &mut out);
        for (s, o) in states.iter().zip(out) {
            assert_eq!(policy.amplitudes(0.25, s), o);
        }
    }

    #[test]
    fn rollout_matches_oracle_paths() {
        let params = ModelParams::default();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let policy = tiny(8, 3);
        let rng = RngStream::new(4, 4);
        let rollout = rollout_loss(&policy, &params, &grid, 300, &rng).unwrap();
        let oracle = mc_cost(&params, &grid, Policy::Feedback(&policy), Scheme::Euler, 300, &rng).unwrap();
        assert!((rollout.loss - oracle.estimate).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let params = ModelParams::default();
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let policy = tiny(4, 5);
        let rng = RngStream::new(6, 6);
        let (_, grads) = rollout_loss_and_grad(&policy, &params, &grid, 2, &rng).unwrap();
        let analytic = grads.flat();
        let flat = policy.net().params_flat();
        let h = 1e-6;
        for i in 0..flat.len() {
            let eval = |delta: f64| {
                let mut p = flat.clone();
                p[i] += delta;
                let mut q = policy.clone();
                q.net_mut().set_params_flat(&p).unwrap();
                rollout_loss(&q, &params, &grid, 2, &rng).unwrap().loss
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs()).max(1e-7);
            assert!((fd - analytic[i]).abs() / scale < 1e-3, "param {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn zero_policy_surface_is_zero() {
        let surface = policy_surface(&ZeroPolicy, &ModelParams::default(), &SurfaceSpec::default()).unwrap();
        assert_eq!(surface.len(), 21 * 21);
        assert!(surface.iter().all(|p| p.a1 == 0.0 && p.a2 == 0.0));
    }

    #[test]
    fn surface_is_nonnegative() {
        let spec = SurfaceSpec {
            axis1: SurfaceAxis::D,
            range1: [0.0, 2.0],
            axis2: SurfaceAxis::C,
            range2: [0.0, 3.0],
            resolution: [5, 4],
        };
        let surface = policy_surface(&tiny(8, 7), &ModelParams::default(), &spec).unwrap();
        assert_eq!(surface.len(), 20);
        assert!(surface.iter().all(|p| p.a1 >= 0.0 && p.a2 >= 0.0));
        assert_eq!(surface[0].x1, 0.0);
        assert_eq!(surface[19].x2, 3.0);
    }

    #[test]
    fn surface_rejects_repeated_axis() {
        let spec = SurfaceSpec {
            axis2: SurfaceAxis::T,
            ..Default::default()
        };
        assert!(policy_surface(&ZeroPolicy, &ModelParams::default(), &spec).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let params = ModelParams::default();
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let config = ControlTrainConfig {
            batch_size: 16,
            epochs: 3,
            width: 8,
            eval_paths: 50,
            ..Default::default()
        };
        let a = train_policy(&params, &grid, &config, &RngStream::new(8, 0)).unwrap();
        let b = train_policy(&params, &grid, &config, &RngStream::new(8, 0)).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.out_of_sample, b.out_of_sample);
    }

    #[test]
    fn heavy_installation_cost_suppresses_installs() {
        let params = ModelParams {
            kappa: 1e3,
            ..Default::default()
        };
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let config = ControlTrainConfig {
            batch_size: 64,
            epochs: 40,
            learning_rate: 1e-2,
            width: 16,
            eval_paths: 2000,
        };
        let master = RngStream::new(9, 0);
        let initial = PolicyNet::init(16, &mut master.substream(1)).unwrap();
        let trained = train_policy(&params, &grid, &config, &master).unwrap();
        let inputs = input_rows(0.5, &[params.x0(), SystemState::new(0.2, 1.0, 0.1)]);
        let before = mean_controls(&initial, inputs.view()).unwrap();
        let after = mean_controls(&trained.policy, inputs.view()).unwrap();
        assert!(after[0] + after[1] < 0.1 * (before[0] + before[1]), "{before:?} -> {after:?}");
        let zero = mc_cost(&params, &grid, Policy::Feedback(&ZeroPolicy), Scheme::Euler, 2000, &evaluation_stream(&master))
            .unwrap();
        assert!(trained.out_of_sample.estimate - zero.estimate < 0.5 * initial_excess(&params, &grid, &initial, &master, zero.estimate));
    }

    fn initial_excess(params: &ModelParams, grid: &TimeGrid, policy: &PolicyNet, master: &RngStream, zero: f64) -> f64 {
        evaluate_policy(policy, params, grid, 2000, &evaluation_stream(master)).unwrap().estimate - zero
    }
}
