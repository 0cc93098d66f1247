//! Parameterized building blocks shared by the attention modules and the
//! detector: affine maps, layer normalization and small MLPs.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{kaiming_uniform, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = kaiming_uniform(rng, &[out_dim, in_dim], in_dim);
        Self::from_tensors(store, name, w, bias.then(|| Tensor::zeros(&[out_dim])))
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::from_tensors(store, name, Tensor::zeros(&[out_dim, in_dim]), Some(Tensor::zeros(&[out_dim])))
    }

    pub fn from_tensors(store: &mut ParamStore, name: &str, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
        let weight = store.add(format!("{name}.weight"), weight, true)?;
        let bias = bias.map(|b| store.add(format!("{name}.bias"), b, true)).transpose()?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`. With `zero_last`, the final layer starts
    /// at zero so the network initially outputs zeros.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
        zero_last: bool,
    ) -> Result<Self> {
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, pair) in dims.windows(2).enumerate() {
            let lname = format!("{name}.{i}");
            layers.push(if zero_last && i + 1 == n {
                Linear::zeros(store, &lname, pair[0], pair[1])?
            } else {
                Linear::new(store, rng, &lname, pair[0], pair[1], true)?
            });
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Post-norm feed-forward block: `LN(x + MLP(x))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub mlp: Mlp,
    pub norm: LayerNorm,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), &[dim, hidden, dim], false)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.mlp.forward(g, x)?;
        let s = g.add(x, y)?;
        self.norm.forward(g, s)
    }
}
