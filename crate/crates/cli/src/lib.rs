//! Experiment driver: configuration overrides, command dispatch and artifact
//! emission. The binary in `main.rs` is a thin wrapper around [`run`].

pub mod artifacts;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use capinstall::bsde::{solve_bsde, BsdeProblem};
use capinstall::config::ExperimentConfig;
use capinstall::control::{evaluate_policy, evaluation_stream, policy_surface, train_policy, PolicyNet, SurfacePoint};
use capinstall::model::{mc_cost, simulate, FeedbackPolicy, PathBundle, Policy, Scheme};
use capinstall::nn::io as netio;
use capinstall::rng::RngStream;
use capinstall::selector::{build_grid, select_threshold, SelectorMode};

pub use artifacts::{Manifest, MANIFEST_FILE};
use artifacts::{fmt_f64, ArtifactDir, Row};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    McOracle,
    SolveBsde,
    SelectThreshold,
    TrainPolicy,
    EvaluatePolicy,
    Report,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Simulate,
        Command::McOracle,
        Command::SolveBsde,
        Command::SelectThreshold,
        Command::TrainPolicy,
        Command::EvaluatePolicy,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::McOracle => "mc-oracle",
            Command::SolveBsde => "solve-bsde",
            Command::SelectThreshold => "select-threshold",
            Command::TrainPolicy => "train-policy",
            Command::EvaluatePolicy => "evaluate-policy",
            Command::Report => "report",
        }
    }

    /// Root stream of the command; commands never share draws by accident.
    fn stream(self, seed: u64) -> RngStream {
        let tag = match self {
            Command::Simulate => 1,
            Command::McOracle => 2,
            Command::SolveBsde => 3,
            Command::SelectThreshold => 4,
            Command::TrainPolicy | Command::EvaluatePolicy => 5,
            Command::Report => 6,
        };
        RngStream::new(seed, tag)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .with_context(|| format!("unknown command `{s}`"))
    }
}

/// Command-line overrides on top of the configuration file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub scale: Option<f64>,
    pub out: Option<PathBuf>,
    pub scheme: Option<Scheme>,
    pub oracle_mode: bool,
    pub paths: Option<usize>,
    pub threshold: Option<f64>,
    pub policy: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// Loads the configuration and applies the command-line overrides.
pub fn resolve_config(command: Command, opts: &RunOptions) -> Result<ExperimentConfig> {
    let mut config = match &opts.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    if let Some(scale) = opts.scale {
        config.scale = scale;
    }
    if let Some(out) = &opts.out {
        config.out_dir = out.clone();
    }
    if let Some(scheme) = opts.scheme {
        config.scheme = scheme;
    }
    if opts.oracle_mode {
        config.selector.oracle_mode = true;
    }
    if let Some(paths) = opts.paths {
        match command {
            Command::Simulate => config.simulate.paths = paths,
            Command::McOracle => config.oracle.paths = paths,
            Command::SelectThreshold => config.selector.oracle_paths = paths,
            Command::TrainPolicy | Command::EvaluatePolicy => config.control.eval_paths = paths,
            Command::SolveBsde | Command::Report => {}
        }
    }
    if let Some(a) = opts.threshold {
        match command {
            Command::Simulate => config.simulate.threshold = a,
            _ => config.oracle.threshold = a,
        }
    }
    config.validate()?;
    Ok(config)
}

/// Runs one command and returns its manifest (also written to disk).
pub fn run(command: Command, opts: &RunOptions) -> Result<Manifest> {
    let config = resolve_config(command, opts)?;
    match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building thread pool")?
            .install(|| execute(command, &config, opts)),
        None => execute(command, &config, opts),
    }
}

pub fn command_dir(config: &ExperimentConfig, command: Command) -> PathBuf {
    config.out_dir.join(command.name())
}

struct Outcome {
    headline: BTreeMap<String, f64>,
}

fn execute(command: Command, config: &ExperimentConfig, opts: &RunOptions) -> Result<Manifest> {
    let start = Instant::now();
    let mut dir = ArtifactDir::create(&command_dir(config, command))?;
    let outcome = match command {
        Command::Simulate => cmd_simulate(config, &mut dir),
        Command::McOracle => cmd_mc_oracle(config, &mut dir),
        Command::SolveBsde => cmd_solve_bsde(config, &mut dir),
        Command::SelectThreshold => cmd_select_threshold(config, &mut dir),
        Command::TrainPolicy => cmd_train_policy(config, &mut dir),
        Command::EvaluatePolicy => cmd_evaluate_policy(config, opts, &mut dir),
        Command::Report => cmd_report(config, &mut dir),
    }
    .with_context(|| format!("{command} failed"))?;
    let mut artifacts = dir.names();
    artifacts.push(MANIFEST_FILE.to_string());
    let manifest = Manifest {
        command: command.name().to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        wall_time_secs: start.elapsed().as_secs_f64(),
        headline: outcome.headline,
        artifacts,
        config: serde_json::to_value(config)?,
    };
    dir.write_bytes(MANIFEST_FILE, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    dir.commit();
    Ok(manifest)
}

fn headline<const N: usize>(entries: [(&str, f64); N]) -> Outcome {
    Outcome {
        headline: entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    }
}

fn path_rows(bundle: &PathBundle, grid_dt: f64) -> Vec<Row> {
    let mut rows = Vec::new();
    for (j, states) in bundle.states.iter().enumerate() {
        for (n, s) in states.iter().enumerate() {
            let (a1, a2) = match bundle.controls[j].get(n) {
                Some(a) => (fmt_f64(a[0]), fmt_f64(a[1])),
                None => (String::new(), String::new()),
            };
            rows.push(vec![
                j.to_string(),
                n.to_string(),
                fmt_f64(n as f64 * grid_dt),
                fmt_f64(s.v),
                fmt_f64(s.d),
                fmt_f64(s.c),
                a1,
                a2,
            ]);
        }
    }
    rows
}

const PATH_HEADER: [&str; 8] = ["path_id", "n", "t", "v", "d", "c", "a1", "a2"];
const LOSS_HEADER: [&str; 3] = ["step", "epoch", "loss"];

fn loss_rows(histories: &[Vec<f64>]) -> Vec<Row> {
    histories
        .iter()
        .enumerate()
        .flat_map(|(n, h)| {
            h.iter()
                .enumerate()
                .map(move |(e, loss)| vec![n.to_string(), e.to_string(), fmt_f64(*loss)])
        })
        .collect()
}

fn cmd_simulate(config: &ExperimentConfig, dir: &mut ArtifactDir) -> Result<Outcome> {
    let grid = config.grid()?;
    let rng = Command::Simulate.stream(config.seed);
    let bundle = simulate(
        &config.model,
        &grid,
        Policy::Threshold(config.simulate.threshold),
        config.scheme,
        config.simulate.paths,
        &rng,
    )?;
    dir.write_csv("paths.csv", &PATH_HEADER, path_rows(&bundle, grid.dt()))?;
    let costs = bundle.total_costs(&config.model);
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    Ok(headline([("threshold", config.simulate.threshold), ("mean_cost", mean)]))
}

fn cmd_mc_oracle(config: &ExperimentConfig, dir: &mut ArtifactDir) -> Result<Outcome> {
    let grid = config.grid()?;
    let a = config.oracle.threshold;
    let rng = Command::McOracle.stream(config.seed);
    let estimate = mc_cost(&config.model, &grid, Policy::Threshold(a), config.scheme, config.oracle.paths, &rng)?;
    dir.write_csv(
        "oracle.csv",
        &["A", "estimate", "std_error", "paths"],
        vec![vec![
            fmt_f64(a),
            fmt_f64(estimate.estimate),
            fmt_f64(estimate.std_error),
            estimate.paths.to_string(),
        ]],
    )?;
    Ok(headline([
        ("threshold", a),
        ("estimate", estimate.estimate),
        ("std_error", estimate.std_error),
    ]))
}

fn cmd_solve_bsde(config: &ExperimentConfig, dir: &mut ArtifactDir) -> Result<Outcome> {
    let grid = config.grid()?;
    let a = config.oracle.threshold;
    let problem = BsdeProblem::new(config.model.clone(), grid, a)?;
    let solution = solve_bsde(&problem, &config.effective_bsde(), &Command::SolveBsde.stream(config.seed))?;
    dir.write_csv("loss.csv", &LOSS_HEADER, loss_rows(&solution.loss_histories))?;
    dir.write_csv(
        "final_loss.csv",
        &["step", "loss"],
        solution
            .final_losses()
            .iter()
            .enumerate()
            .map(|(n, l)| vec![n.to_string(), fmt_f64(*l)]),
    )?;
    Ok(headline([("threshold", a), ("y0", solution.y0)]))
}

fn cmd_select_threshold(config: &ExperimentConfig, dir: &mut ArtifactDir) -> Result<Outcome> {
    let grid = config.grid()?;
    let thresholds = build_grid(config.model.a_min, config.model.a_max, config.selector.points)?;
    let mode = if config.selector.oracle_mode {
        SelectorMode::Oracle {
            paths: config.selector.oracle_paths,
            scheme: config.scheme,
        }
    } else {
        SelectorMode::Bsde(config.effective_bsde())
    };
    let result = select_threshold(
        &config.model,
        &grid,
        &mode,
        &thresholds,
        &Command::SelectThreshold.stream(config.seed),
    )?;
    let rows = result.records.iter().enumerate().map(|(i, r)| {
        vec![
            fmt_f64(r.threshold),
            fmt_f64(r.y0),
            r.std_error.map(fmt_f64).unwrap_or_default(),
            u8::from(i == result.best).to_string(),
        ]
    });
    dir.write_csv("scatter.csv", &["A", "Y0", "std_error", "argmin"], rows)?;
    let best = &result.records[result.best];
    if !best.loss_histories.is_empty() {
        dir.write_csv("loss_best.csv", &LOSS_HEADER, loss_rows(&best.loss_histories))?;
    }
    Ok(headline([
        ("a_star", result.a_star()),
        ("y0_star", result.y0_star()),
        ("oracle_mode", f64::from(u8::from(config.selector.oracle_mode))),
    ]))
}

fn surface_rows(points: &[SurfacePoint]) -> Vec<Row> {
    points
        .iter()
        .map(|p| vec![fmt_f64(p.x1), fmt_f64(p.x2), fmt_f64(p.a1), fmt_f64(p.a2)])
        .collect()
}

const SURFACE_HEADER: [&str; 4] = ["axis1", "axis2", "a1", "a2"];

fn write_policy_views(
    config: &ExperimentConfig,
    policy: &PolicyNet,
    master: &RngStream,
    dir: &mut ArtifactDir,
) -> Result<()> {
    let grid = config.grid()?;
    let surface = policy_surface(policy, &config.model, &config.surface)?;
    dir.write_csv("surface.csv", &SURFACE_HEADER, surface_rows(&surface))?;
    let feedback: &dyn FeedbackPolicy = policy;
    let bundle = simulate(
        &config.model,
        &grid,
        Policy::Feedback(feedback),
        capinstall::model::Scheme::Euler,
        config.simulate.paths,
        &master.substream(3),
    )?;
    dir.write_csv("paths.csv", &PATH_HEADER, path_rows(&bundle, grid.dt()))?;
    Ok(())
}

fn cmd_train_policy(config: &ExperimentConfig, dir: &mut ArtifactDir) -> Result<Outcome> {
    let grid = config.grid()?;
    let master = Command::TrainPolicy.stream(config.seed);
    let training = train_policy(&config.model, &grid, &config.effective_control(), &master)?;
    dir.write_csv(
        "loss.csv",
        &LOSS_HEADER,
        training
            .loss_history
            .iter()
            .enumerate()
            .map(|(e, l)| vec!["0".to_string(), e.to_string(), fmt_f64(*l)]),
    )?;
    dir.write_bytes("policy.capnet", &netio::encode(training.policy.net()))?;
    write_policy_views(config, &training.policy, &master, dir)?;
    let first = training.loss_history.first().copied().unwrap_or(f64::NAN);
    let last = training.loss_history.last().copied().unwrap_or(f64::NAN);
    Ok(headline([
        ("out_of_sample", training.out_of_sample.estimate),
        ("std_error", training.out_of_sample.std_error),
        ("first_loss", first),
        ("final_loss", last),
    ]))
}

fn cmd_evaluate_policy(config: &ExperimentConfig, opts: &RunOptions, dir: &mut ArtifactDir) -> Result<Outcome> {
    let path = opts
        .policy
        .clone()
        .unwrap_or_else(|| command_dir(config, Command::TrainPolicy).join("policy.capnet"));
    let bytes = std::fs::read(&path).with_context(|| format!("reading policy {}", path.display()))?;
    let policy = PolicyNet::from_mlp(netio::decode(&bytes)?)?;
    let grid = config.grid()?;
    let master = Command::EvaluatePolicy.stream(config.seed);
    let estimate = evaluate_policy(&policy, &config.model, &grid, config.control.eval_paths, &evaluation_stream(&master))?;
    dir.write_csv(
        "evaluation.csv",
        &["estimate", "std_error", "paths"],
        vec![vec![
            fmt_f64(estimate.estimate),
            fmt_f64(estimate.std_error),
            estimate.paths.to_string(),
        ]],
    )?;
    write_policy_views(config, &policy, &master, dir)?;
    Ok(headline([("estimate", estimate.estimate), ("std_error", estimate.std_error)]))
}

/// Comparison of the threshold optimum with the trained feedback policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub a_star: f64,
    pub y0_star: f64,
    pub control_cost: f64,
    pub control_std_error: f64,
}

impl Report {
    pub fn from_dir(out_dir: &Path) -> Result<Self> {
        let threshold = Manifest::read(&out_dir.join(Command::SelectThreshold.name()).join(MANIFEST_FILE))?;
        let control = Manifest::read(&out_dir.join(Command::TrainPolicy.name()).join(MANIFEST_FILE))?;
        if threshold.command != Command::SelectThreshold.name() || control.command != Command::TrainPolicy.name() {
            bail!("manifests in {} belong to other commands", out_dir.display());
        }
        Ok(Self {
            a_star: threshold.headline("a_star")?,
            y0_star: threshold.headline("y0_star")?,
            control_cost: control.headline("out_of_sample")?,
            control_std_error: control.headline("std_error")?,
        })
    }

    pub fn control_wins(&self) -> bool {
        self.control_cost < self.y0_star
    }

    pub fn table(&self) -> String {
        format!(
            "{:<28}{:>14}\n{:<28}{:>14.6}\n{:<28}{:>14.6}\n{:<28}{:>14.6}\n{:<28}{:>14.6}\n{:<28}{:>14}\n",
            "quantity",
            "value",
            "threshold A*",
            self.a_star,
            "threshold Y0*",
            self.y0_star,
            "feedback out-of-sample",
            self.control_cost,
            "feedback std error",
            self.control_std_error,
            "feedback below threshold",
            self.control_wins()
        )
    }
}

fn cmd_report(config: &ExperimentConfig, dir: &mut ArtifactDir) -> Result<Outcome> {
    let report = Report::from_dir(&config.out_dir)?;
    dir.write_csv(
        "report.csv",
        &["quantity", "value"],
        vec![
            vec!["a_star".into(), fmt_f64(report.a_star)],
            vec!["y0_star".into(), fmt_f64(report.y0_star)],
            vec!["control_out_of_sample".into(), fmt_f64(report.control_cost)],
            vec!["control_std_error".into(), fmt_f64(report.control_std_error)],
            vec!["control_below_threshold".into(), u8::from(report.control_wins()).to_string()],
        ],
    )?;
    dir.write_bytes("report.txt", report.table().as_bytes())?;
    Ok(headline([
        ("a_star", report.a_star),
        ("y0_star", report.y0_star),
        ("control_out_of_sample", report.control_cost),
        ("control_below_threshold", f64::from(u8::from(report.control_wins()))),
    ]))
}
