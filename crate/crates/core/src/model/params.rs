use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::JumpLaw;

/// Upper clamp for the capacity factor, which lives on `[0, 1)`.
pub const V_CEILING: f64 = 1.0 - 1e-12;

/// Constants of the one-technology capacity/demand model.
///
/// The seasonal factor `s` and load factor `p` are constant in time; the
/// derivative accessors exist so the drift formulas keep their general shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Horizon `T`.
    pub horizon: f64,
    /// Initial capacity factor.
    pub v0: f64,
    /// Initial demand.
    pub d0: f64,
    /// Initial installed capacity.
    pub c0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Inverse mean jump size of source 1.
    pub m1: f64,
    /// Inverse mean jump size of source 2.
    pub m2: f64,
    pub sigma11: f64,
    pub sigma12: f64,
    pub sigma22: f64,
    /// Mean-reversion speed of the capacity factor driver.
    pub xi1: f64,
    /// Mean-reversion speed of the demand driver.
    pub xi2: f64,
    /// Demand load factor.
    pub p: f64,
    /// Seasonal factor of the capacity factor map.
    pub s: f64,
    /// Discount rate.
    pub r: f64,
    /// Unit installation cost.
    pub kappa: f64,
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            v0: 0.4,
            d0: 0.7,
            c0: 0.0,
            lambda1: 5.0,
            lambda2: 5.0,
            m1: 0.5,
            m2: 1.0,
            sigma11: 0.2,
            sigma12: 0.2,
            sigma22: 0.05,
            xi1: 0.2,
            xi2: 0.2,
            p: 0.7,
            s: 1.0,
            r: 0.4,
            kappa: 0.1,
            a_min: 0.0,
            a_max: 3.0,
        }
    }
}

fn require(ok: bool, name: &'static str, reason: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::param(name, reason()))
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon),
            ("m1", self.m1),
            ("m2", self.m2),
            ("sigma11", self.sigma11),
            ("sigma22", self.sigma22),
            ("xi1", self.xi1),
            ("xi2", self.xi2),
            ("p", self.p),
            ("s", self.s),
        ];
        for (name, value) in positive {
            require(value > 0.0 && value.is_finite(), name, || format!("must be finite and > 0, got {value}"))?;
        }
        // Zero intensities and cost are allowed for the degenerate regimes.
        let nonnegative = [
            ("kappa", self.kappa),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("sigma12", self.sigma12),
            ("r", self.r),
            ("a_min", self.a_min),
            ("d0", self.d0),
            ("c0", self.c0),
        ];
        for (name, value) in nonnegative {
            require(value >= 0.0 && value.is_finite(), name, || format!("must be finite and >= 0, got {value}"))?;
        }
        require(self.a_max.is_finite() && self.a_max > self.a_min, "a_max", || {
            format!("must exceed a_min = {}, got {}", self.a_min, self.a_max)
        })?;
        require((0.0..1.0).contains(&self.v0), "v0", || format!("must lie in [0, 1), got {}", self.v0))?;
        Ok(())
    }

    pub fn x0(&self) -> SystemState {
        SystemState {
            v: self.v0,
            d: self.d0,
            c: self.c0,
        }
    }

    pub fn jump_laws(&self) -> [JumpLaw; 2] {
        [
            JumpLaw {
                intensity: self.lambda1,
                rate: self.m1,
            },
            JumpLaw {
                intensity: self.lambda2,
                rate: self.m2,
            },
        ]
    }

    /// Loading of source `i` (0-based) on the capacity factor driver.
    pub fn sigma_v(&self, source: usize) -> f64 {
        if source == 0 {
            self.sigma11
        } else {
            self.sigma12
        }
    }

    pub fn seasonal(&self, _t: f64) -> f64 {
        self.s
    }

    pub fn seasonal_rate(&self, _t: f64) -> f64 {
        0.0
    }

    pub fn load(&self, _t: f64) -> f64 {
        self.p
    }

    pub fn load_rate(&self, _t: f64) -> f64 {
        0.0
    }

    /// Latent drivers consistent with `x0`: `v0 = 1 - exp(-s h1)`, `d0 = p h2`.
    pub fn latent0(&self) -> LatentState {
        LatentState {
            h1: -(1.0 - self.v0).ln() / self.seasonal(0.0),
            h2: self.d0 / self.load(0.0),
        }
    }

    /// Capacity factor without jumps: `1 - (1 - v0)^{exp(-xi1 t)}`.
    pub fn no_jump_v(&self, t: f64) -> f64 {
        1.0 - (1.0 - self.v0).powf((-self.xi1 * t).exp())
    }

    /// Demand without jumps: `d0 exp(-xi2 t)`.
    pub fn no_jump_d(&self, t: f64) -> f64 {
        self.d0 * (-self.xi2 * t).exp()
    }

    /// Mean demand at `t` from the first moment of the OU driver.
    pub fn mean_demand(&self, t: f64) -> f64 {
        let h20 = self.d0 / self.p;
        let decay = (-self.xi2 * t).exp();
        self.p * (h20 * decay + self.sigma22 * self.lambda2 / self.m2 * (1.0 - decay) / self.xi2)
    }

    /// `int_0^T e^{-r t} E[D(t)] dt`, in closed form.
    pub fn discounted_mean_demand_integral(&self) -> f64 {
        let h20 = self.d0 / self.p;
        let level = self.sigma22 * self.lambda2 / (self.m2 * self.xi2);
        let t = self.horizon;
        // int e^{-a t} dt over [0, T]
        let integral = |a: f64| {
            if a.abs() < 1e-14 {
                t
            } else {
                (1.0 - (-a * t).exp()) / a
            }
        };
        self.p * ((h20 - level) * integral(self.r + self.xi2) + level * integral(self.r))
    }
}

/// Controlled state `(v, d, c)`: capacity factor, demand, installed capacity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub v: f64,
    pub d: f64,
    pub c: f64,
}

impl SystemState {
    pub fn new(v: f64, d: f64, c: f64) -> Self {
        Self { v, d, c }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v >= 0.0 && self.v < 1.0) {
            return Err(Error::Domain(format!("capacity factor v = {} outside [0, 1)", self.v)));
        }
        if !(self.d >= 0.0 && self.d.is_finite()) {
            return Err(Error::Domain(format!("demand d = {} must be finite and >= 0", self.d)));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(Error::Domain(format!("capacity c = {} must be finite and >= 0", self.c)));
        }
        Ok(())
    }

    /// Network input row `(t, v, d, c)`.
    pub fn features(&self, t: f64) -> [f64; 4] {
        [t, self.v, self.d, self.c]
    }
}

/// OU drivers behind `(v, d)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentState {
    pub h1: f64,
    pub h2: f64,
}

impl LatentState {
    pub fn capacity_factor(&self, params: &ModelParams, t: f64) -> f64 {
        (-(-params.seasonal(t) * self.h1).exp_m1()).min(V_CEILING)
    }

    pub fn demand(&self, params: &ModelParams, t: f64) -> f64 {
        params.load(t) * self.h2
    }
}

/// Uniform partition of `[0, T]` into `steps` intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("steps", "time grid needs at least one step"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::param("horizon", format!("must be finite and > 0, got {horizon}")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |n| self.t(n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelParams::default().validate().unwrap();
    }

    #[test]
    fn rejects_negative_kappa_by_name() {
        let params = ModelParams {
            kappa: -0.1,
            ..Default::default()
        };
        let err = params.validate().unwrap_err().to_string();
        assert!(err.contains("kappa"), "{err}");
    }

    #[test]
    fn rejects_inverted_threshold_bounds() {
        let params = ModelParams {
            a_min: 2.0,
            a_max: 1.0,
            ..Default::default()
        };
        assert!(params.validate().is_err());
    }

    #[test]
    fn latent_round_trips_initial_state() {
        let params = ModelParams::default();
        let h = params.latent0();
        assert!((h.capacity_factor(&params, 0.0) - params.v0).abs() < 1e-15);
        assert!((h.demand(&params, 0.0) - params.d0).abs() < 1e-15);
    }

    #[test]
    fn no_jump_values_at_unit_time() {
        let params = ModelParams::default();
        // 1 - 0.6^{e^{-0.2}} and 0.7 e^{-0.2}
        assert!((params.no_jump_v(1.0) - 0.341_788_287_335_102).abs() < 1e-12);
        assert!((params.no_jump_d(1.0) - 0.573_111_527_154_587).abs() < 1e-12);
    }

    #[test]
    fn discounted_demand_integral_matches_quadrature() {
        let params = ModelParams::default();
        let n = 200_000;
        let h = params.horizon / n as f64;
        // composite Simpson
        let f = |t: f64| (-params.r * t).exp() * params.mean_demand(t);
        let mut acc = f(0.0) + f(params.horizon);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        let simpson = acc * h / 3.0;
        assert!((simpson - params.discounted_mean_demand_integral()).abs() < 1e-12);
    }

    #[test]
    fn grid_spacing() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        assert_eq!(grid.dt(), 0.02);
        assert_eq!(grid.nodes().count(), 51);
        assert!(TimeGrid::new(1.0, 0).is_err());
    }
}
