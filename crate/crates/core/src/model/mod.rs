//! One-technology capacity factor / demand / installed capacity model.

pub mod dynamics;
pub mod oracle;
pub mod params;
pub mod simulate;

pub use dynamics::{
    drift_d, drift_v, jump_impact_d, jump_impact_v, jump_increments_v, step_euler, threshold_install, Control,
    StepOutcome,
};
pub use oracle::{mc_cost, mean_and_se, path_costs, terminal_states, McEstimate};
pub use params::{LatentState, ModelParams, SystemState, TimeGrid, V_CEILING};
pub use simulate::{
    shortfall_cost, simulate, simulate_exact_latent, simulate_paths, FeedbackPolicy, PathBundle, Policy, Scheme,
};
