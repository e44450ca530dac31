//! Small differentiable function approximators over flat parameter vectors.

pub mod checkpoint;
mod mlp;
mod objective;
mod params;
mod policy;
mod value;

pub use mlp::{Activations, Mlp};
pub use objective::{grad_scalar, hvp, FnObjective, ScalarObjective};
pub use params::{Layout, ParamVector};
pub use policy::{Action, ActionBatch, Head, PolicyEval, PolicyNet, LOG_STD_MAX, LOG_STD_MIN};
pub use checkpoint::{read_params, write_params};
pub use value::ValueNet;
