//! Small dense networks with hand-written reverse mode and Adam.

mod adam;
pub mod io;
mod mlp;

pub use adam::AdamState;
pub use mlp::{
    param_count_formula, softplus, Activation, ForwardCache, GradBundle, InitScheme, Layer, Mlp, MlpGrads,
    OutputTransform,
};
