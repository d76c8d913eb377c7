//! Dense tensors, reverse-mode gradients, layers, optimiser and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{gelu, mish, softplus, Gradients, Graph, Var};
pub use optim::{adamw_step, clip_global_norm, global_norm, AdamWConfig, AdamWState};
pub use params::ParamSet;
pub use tensor::Tensor;

use crate::Result;

/// Value and gradient of a scalar loss with respect to every parameter.
///
/// `loss` receives the tape and one differentiable leaf per parameter, in
/// `ParamSet` order, and returns the scalar loss node.
pub fn grad<F>(params: &ParamSet, loss: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = g.bind(params);
    let l = loss(&mut g, &vars)?;
    let grads = g.backward(l)?;
    Ok((g.value(l).item(), grads.collect(&vars)))
}
