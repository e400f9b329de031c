//! Grid search over threshold levels.
//!
//! Each candidate `A` is valued either by the BSDE solver or by the Monte
//! Carlo oracle, and the smallest value wins (ties go to the smaller `A`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{solve_bsde, BsdeProblem, BsdeTrainConfig};
use crate::error::{Error, Result};
use crate::model::{mc_cost, ModelParams, Policy, Scheme, TimeGrid};
use crate::rng::RngStream;

/// `n` equidistant thresholds from `a_min` to `a_max`, endpoints included.
/// A single point is allowed only when the bounds coincide.
pub fn build_grid(a_min: f64, a_max: f64, n: usize) -> Result<Vec<f64>> {
    if !(a_min.is_finite() && a_max.is_finite()) || a_min < 0.0 {
        return Err(Error::param("grid", format!("bounds must be finite and >= 0, got [{a_min}, {a_max}]")));
    }
    if n == 1 && a_min == a_max {
        return Ok(vec![a_min]);
    }
    if a_min >= a_max {
        return Err(Error::param("grid", format!("a_min = {a_min} must be below a_max = {a_max}")));
    }
    if n < 2 {
        return Err(Error::param("grid", format!("need at least 2 points, got {n}")));
    }
    let step = (a_max - a_min) / (n - 1) as f64;
    Ok((0..n)
        .map(|i| if i + 1 == n { a_max } else { a_min + i as f64 * step })
        .collect())
}

/// How each candidate threshold is valued.
#[derive(Clone, Debug, PartialEq)]
pub enum SelectorMode {
    Bsde(BsdeTrainConfig),
    /// Monte Carlo cost with the same path seeds for every threshold.
    Oracle { paths: usize, scheme: Scheme },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub threshold: f64,
    pub y0: f64,
    /// Monte Carlo standard error in oracle mode.
    pub std_error: Option<f64>,
    /// Per-step loss histories in BSDE mode.
    #[serde(skip)]
    pub loss_histories: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorResult {
    /// One record per grid point, in grid order.
    pub records: Vec<ThresholdRecord>,
    pub best: usize,
}

impl SelectorResult {
    pub fn a_star(&self) -> f64 {
        self.records[self.best].threshold
    }

    pub fn y0_star(&self) -> f64 {
        self.records[self.best].y0
    }
}

/// Index of the smallest value, the first one on ties.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] <= v => {}
            _ => best = Some(i),
        }
    }
    best
}

fn evaluate(
    params: &ModelParams,
    grid: &TimeGrid,
    mode: &SelectorMode,
    threshold: f64,
    index: usize,
    master: &RngStream,
) -> Result<ThresholdRecord> {
    match mode {
        SelectorMode::Bsde(config) => {
            let problem = BsdeProblem::new(params.clone(), *grid, threshold)?;
            let solution = solve_bsde(&problem, config, &master.substream(index as u64))?;
            log::info!("A={threshold:.6}: Y0={:.6}", solution.y0);
            Ok(ThresholdRecord {
                threshold,
                y0: solution.y0,
                std_error: None,
                loss_histories: solution.loss_histories,
            })
        }
        SelectorMode::Oracle { paths, scheme } => {
            let estimate = mc_cost(params, grid, Policy::Threshold(threshold), *scheme, *paths, master)?;
            Ok(ThresholdRecord {
                threshold,
                y0: estimate.estimate,
                std_error: Some(estimate.std_error),
                loss_histories: Vec::new(),
            })
        }
    }
}

/// Values every threshold in `thresholds` and returns the argmin.
pub fn select_threshold(
    params: &ModelParams,
    grid: &TimeGrid,
    mode: &SelectorMode,
    thresholds: &[f64],
    master: &RngStream,
) -> Result<SelectorResult> {
    params.validate()?;
    if thresholds.is_empty() {
        return Err(Error::param("grid", "no thresholds to evaluate"));
    }
    let records = thresholds
        .par_iter()
        .enumerate()
        .map(|(i, &a)| {
            evaluate(params, grid, mode, a, i, master).map_err(|e| Error::Threshold {
                threshold: a,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for record in &records {
        if !record.y0.is_finite() {
            return Err(Error::Threshold {
                threshold: record.threshold,
                source: Box::new(Error::NonFinite {
                    index: 0,
                    detail: format!("Y0 = {}", record.y0),
                }),
            });
        }
    }
    let values: Vec<f64> = records.iter().map(|r| r.y0).collect();
    let best = argmin(&values).expect("nonempty");
    Ok(SelectorResult { records, best })
}
