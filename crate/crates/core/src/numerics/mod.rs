//! Dense tensors, the reverse-mode tape, and the handful of nonlinearities the
//! detector is built from.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{check_graph_fn, check_inputs, check_params, finite_diff_grad, relative_error};
pub use graph::{Gradients, Graph, LevelDims, Var, OP_NAMES};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{kaiming_uniform, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Clamp used before every inverse sigmoid.
pub const INV_SIGMOID_EPS: f64 = 1e-5;

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(kernels::sigmoid)
}

pub fn inverse_sigmoid(y: &Tensor) -> Tensor {
    y.map(|v| kernels::inverse_sigmoid(v, INV_SIGMOID_EPS))
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Argument(format!("softmax axis {axis} for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    let mut data = x.data().to_vec();
    kernels::softmax_strided(&mut data, outer, shape[axis], inner);
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// `x Wᵀ + b` on plain values.
pub fn linear(x: &Tensor, w: &Parameter, b: &Parameter) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.tensor.clone());
    let bv = g.constant(b.tensor.clone());
    let y = g.linear(xv, wv, Some(bv))?;
    Ok(g.value(y).clone())
}
