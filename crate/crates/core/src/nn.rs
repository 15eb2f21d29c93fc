//! Dense layers and multilayer perceptrons with Xavier initialization.
//!
//! Every layer exists in two execution modes: a plain forward pass on
//! [`Tensor`]s (used in inference hot loops) and a taped forward pass on a
//! [`Graph`] (used during training). The finite-difference suites in the
//! crate tests pin the two modes to each other.

use alloc::format;

use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Elu,
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => math::tanh(x),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    math::exp(x) - 1.0
                }
            }
            Activation::Linear => x,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Linear => "linear",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Contract(format!("unknown activation tag '{other}'"))),
        }
    }
}

/// A dense layer `y = activation(x W + b)` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    /// Xavier/Glorot uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
        let data = (0..fan_in * fan_out)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * limit)
            .collect();
        DenseLayer {
            weights: Tensor { rows: fan_in, cols: fan_out, data },
            bias: Tensor::zeros(1, fan_out),
            activation,
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols
    }
}

/// `Y = activation(X W + b)` applied row-wise.
pub fn dense_forward(layer: &DenseLayer, x: &Tensor) -> Result<Tensor> {
    if x.cols != layer.fan_in() {
        return Err(Error::Shape(format!(
            "dense_forward: input has {} features, layer expects {}",
            x.cols,
            layer.fan_in()
        )));
    }
    let mut y = x.matmul(&layer.weights)?;
    for r in 0..y.rows {
        for c in 0..y.cols {
            let v = y.data[r * y.cols + c] + layer.bias.data[c];
            y.data[r * y.cols + c] = layer.activation.apply(v);
        }
    }
    Ok(y)
}

/// Taped version of [`dense_forward`]; `w` and `b` are the layer's parameter vars.
pub fn dense_forward_graph(
    g: &mut Graph,
    activation: Activation,
    w: Var,
    b: Var,
    x: Var,
) -> Result<Var> {
    let z = g.matmul(x, w)?;
    let z = g.add_bias(z, b)?;
    Ok(match activation {
        Activation::Tanh => g.tanh(z),
        Activation::Relu => g.relu(z),
        Activation::Elu => g.elu(z),
        Activation::Linear => z,
    })
}

/// An ordered stack of dense layers with chained dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Xavier-initialized stack: `dims = [in, h1, ..., out]`, hidden layers use
    /// `hidden`, the final layer uses `last`.
    pub fn xavier<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Contract("Mlp needs at least in/out dims".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let act = if i + 2 == dims.len() { last } else { hidden };
            layers.push(DenseLayer::xavier(dims[i], dims[i + 1], act, rng));
        }
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = dense_forward(&self.layers[0], x)?;
        for layer in &self.layers[1..] {
            h = dense_forward(layer, &h)?;
        }
        Ok(h)
    }

    /// Checks that adjacent layer dimensions chain.
    pub fn validate(&self) -> Result<()> {
        for w in self.layers.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::Shape(format!(
                    "Mlp: layer out {} does not chain into next in {}",
                    w[0].fan_out(),
                    w[1].fan_in()
                )));
            }
        }
        Ok(())
    }
}

/// Flat parameter traversal in a fixed order (per layer: weights then bias).
/// The order defines checkpoint layout and Adam state alignment.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// `true` for tensors subject to L2 regularization (weight matrices).
    fn decay_mask(&self) -> Vec<bool>;
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out
    }

    fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for _ in &self.layers {
            out.push(true);
            out.push(false);
        }
        out
    }
}

/// Cursor over the graph vars of a flat parameter list; consumed in the same
/// order as [`Parameterized::params`].
pub struct ParamCursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, next: 0 }
    }

    pub fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }

    pub fn finished(&self) -> bool {
        self.next == self.vars.len()
    }
}

/// Training-time context for taped forward passes: optional inverted dropout
/// on hidden activations.
pub struct ForwardCtx<'r, R: Rng> {
    pub dropout: f64,
    pub rng: Option<&'r mut R>,
}

impl<'r, R: Rng> ForwardCtx<'r, R> {
    pub fn inference() -> ForwardCtx<'static, R> {
        ForwardCtx { dropout: 0.0, rng: None }
    }
}

/// Taped MLP forward; applies dropout after every hidden activation when the
/// context carries an RNG.
pub fn mlp_forward_graph<R: Rng>(
    g: &mut Graph,
    mlp: &Mlp,
    cursor: &mut ParamCursor<'_>,
    x: Var,
    ctx: &mut ForwardCtx<'_, R>,
) -> Result<Var> {
    let mut h = x;
    let n = mlp.layers.len();
    for (i, layer) in mlp.layers.iter().enumerate() {
        let w = cursor.take();
        let b = cursor.take();
        h = dense_forward_graph(g, layer.activation, w, b, h)?;
        let is_hidden = i + 1 < n;
        if is_hidden && ctx.dropout > 0.0 {
            if let Some(rng) = ctx.rng.as_deref_mut() {
                let keep = 1.0 - ctx.dropout;
                let shape = g.value(h).shape();
                let mask = Tensor {
                    rows: shape.0,
                    cols: shape.1,
                    data: (0..shape.0 * shape.1)
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect(),
                };
                let mask = g.input(mask);
                h = g.mul(h, mask)?;
            }
        }
    }
    Ok(h)
}
