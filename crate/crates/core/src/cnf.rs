//! Conditional RealNVP density estimator: stacked affine coupling layers
//! whose scale and translation nets are conditioned on the parameter vector,
//! giving exact log-likelihoods in both directions.
//!
//! Each layer freezes half of the coordinates (alternating parity across
//! layers), embeds the frozen subset and the conditioner output, and maps the
//! concatenation through a small dense head per branch. The scale head ends
//! in tanh so per-layer log-scales stay inside (-1, 1).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::math;
use crate::nn::{
    dense_forward, dense_forward_graph, mlp_forward_graph, Activation, DenseLayer, ForwardCtx,
    Mlp, ParamCursor, Parameterized,
};
use crate::optim::{split_indices, train_loop, BatchLoss, TrainConfig, TrainReport};
use crate::rng::{derive_stream, fill_standard_normal, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Architecture of the conditional flow.
#[derive(Debug, Clone, PartialEq)]
pub struct CnfArch {
    pub n_h: usize,
    pub n_par: usize,
    pub n_flows: usize,
    pub conditioner_widths: Vec<usize>,
    pub embed_width: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl CnfArch {
    /// Paper-scale branch widths (32/64/128 conditioner, 64-wide embeddings,
    /// 32-wide heads, ELU).
    pub fn new(n_h: usize, n_par: usize, n_flows: usize) -> Self {
        CnfArch {
            n_h,
            n_par,
            n_flows,
            conditioner_widths: vec![32, 64, 128],
            embed_width: 64,
            hidden_width: 32,
            activation: Activation::Elu,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_h < 2 {
            return Err(Error::Contract("CnfArch: n_h must be >= 2".into()));
        }
        if self.n_par == 0 {
            return Err(Error::Contract("CnfArch: n_par must be positive".into()));
        }
        if self.n_flows < 2 {
            return Err(Error::Contract("CnfArch: at least two coupling layers".into()));
        }
        if self.conditioner_widths.is_empty() || self.embed_width == 0 || self.hidden_width == 0 {
            return Err(Error::Contract("CnfArch: zero-width nets".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Contract("CnfArch: dropout must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// One branch (scale or translate): embeds the frozen subset and the
/// conditioner output, concatenates, and maps through the head.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBranch {
    pub input_embed: DenseLayer,
    pub cond_embed: DenseLayer,
    pub head: Mlp,
}

impl CouplingBranch {
    fn init<R: Rng + ?Sized>(
        frozen_dim: usize,
        cond_dim: usize,
        out_dim: usize,
        arch: &CnfArch,
        last: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let input_embed = DenseLayer::xavier(frozen_dim, arch.embed_width, arch.activation, rng);
        let cond_embed = DenseLayer::xavier(cond_dim, arch.embed_width, arch.activation, rng);
        let head = Mlp::xavier(
            &[2 * arch.embed_width, arch.hidden_width, out_dim],
            arch.activation,
            last,
            rng,
        )?;
        Ok(CouplingBranch { input_embed, cond_embed, head })
    }

    fn forward(&self, frozen: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let e1 = dense_forward(&self.input_embed, frozen)?;
        let e2 = dense_forward(&self.cond_embed, cond)?;
        let cat = hconcat(&e1, &e2)?;
        self.head.forward(&cat)
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.input_embed.weights,
            &self.input_embed.bias,
            &self.cond_embed.weights,
            &self.cond_embed.bias,
        ];
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.input_embed.weights,
            &mut self.input_embed.bias,
            &mut self.cond_embed.weights,
            &mut self.cond_embed.bias,
        ];
        out.extend(self.head.params_mut());
        out
    }

    fn decay_mask(&self) -> Vec<bool> {
        let mut out = vec![true, false, true, false];
        out.extend(self.head.decay_mask());
        out
    }

    fn forward_graph<R: Rng>(
        &self,
        g: &mut Graph,
        cursor: &mut ParamCursor<'_>,
        frozen: Var,
        cond: Var,
        ctx: &mut ForwardCtx<'_, R>,
    ) -> Result<Var> {
        let w1 = cursor.take();
        let b1 = cursor.take();
        let e1 = dense_forward_graph(g, self.input_embed.activation, w1, b1, frozen)?;
        let w2 = cursor.take();
        let b2 = cursor.take();
        let e2 = dense_forward_graph(g, self.cond_embed.activation, w2, b2, cond)?;
        let cat = g.concat_cols(e1, e2)?;
        mlp_forward_graph(g, &self.head, cursor, cat, ctx)
    }
}

/// One conditional affine coupling layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    /// Indices of the frozen subset B (copied through unchanged).
    pub frozen: Vec<usize>,
    /// Indices of the active subset A (scaled and shifted).
    pub active: Vec<usize>,
    pub conditioner: Mlp,
    pub scale: CouplingBranch,
    pub translate: CouplingBranch,
}

impl CouplingLayer {
    fn init<R: Rng + ?Sized>(arch: &CnfArch, layer_index: usize, rng: &mut R) -> Result<Self> {
        // even layers freeze the even indices, odd layers the odd ones
        let freeze_even = layer_index % 2 == 0;
        let mut frozen = Vec::new();
        let mut active = Vec::new();
        for i in 0..arch.n_h {
            if (i % 2 == 0) == freeze_even {
                frozen.push(i);
            } else {
                active.push(i);
            }
        }
        let mut cond_dims = vec![arch.n_par];
        cond_dims.extend_from_slice(&arch.conditioner_widths);
        let conditioner = Mlp::xavier(&cond_dims, arch.activation, arch.activation, rng)?;
        let cond_out = *cond_dims.last().unwrap();
        let scale = CouplingBranch::init(
            frozen.len(),
            cond_out,
            active.len(),
            arch,
            Activation::Tanh,
            rng,
        )?;
        let translate = CouplingBranch::init(
            frozen.len(),
            cond_out,
            active.len(),
            arch,
            Activation::Linear,
            rng,
        )?;
        Ok(CouplingLayer { frozen, active, conditioner, scale, translate })
    }

    fn n_h(&self) -> usize {
        self.frozen.len() + self.active.len()
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = self.conditioner.params();
        out.extend(self.scale.params());
        out.extend(self.translate.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.conditioner.params_mut();
        out.extend(self.scale.params_mut());
        out.extend(self.translate.params_mut());
        out
    }

    fn decay_mask(&self) -> Vec<bool> {
        let mut out = self.conditioner.decay_mask();
        out.extend(self.scale.decay_mask());
        out.extend(self.translate.decay_mask());
        out
    }

    /// Scale and translation evaluated on the frozen subset and condition.
    fn branches(&self, h: &[f64], lambda: &[f64]) -> Result<(Tensor, Tensor)> {
        let frozen_vals: Vec<f64> = self.frozen.iter().map(|&i| h[i]).collect();
        let frozen_row = Tensor::row_vector(frozen_vals);
        let cond = self.conditioner.forward(&Tensor::row_vector(lambda.to_vec()))?;
        let s = self.scale.forward(&frozen_row, &cond)?;
        let t = self.translate.forward(&frozen_row, &cond)?;
        Ok((s, t))
    }
}

fn hconcat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!("hconcat: {} vs {} rows", a.rows, b.rows)));
    }
    let cols = a.cols + b.cols;
    let mut data = Vec::with_capacity(a.rows * cols);
    for r in 0..a.rows {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Ok(Tensor { rows: a.rows, cols, data })
}

fn check_dims(layer: &CouplingLayer, h: &[f64], lambda: &[f64], n_par: usize) -> Result<()> {
    if h.len() != layer.n_h() {
        return Err(Error::Shape(format!(
            "coupling: h has {} entries, layer expects {}",
            h.len(),
            layer.n_h()
        )));
    }
    if lambda.len() != n_par {
        return Err(Error::Shape(format!(
            "coupling: lambda has {} entries, expected {n_par}",
            lambda.len()
        )));
    }
    Ok(())
}

/// Forward coupling: the active subset is scaled by `exp(s)` and shifted by
/// `t`; the log-det contribution is `sum(s)`.
pub fn coupling_forward(
    layer: &CouplingLayer,
    h: &[f64],
    lambda: &[f64],
    n_par: usize,
) -> Result<(Vec<f64>, f64)> {
    check_dims(layer, h, lambda, n_par)?;
    let (s, t) = layer.branches(h, lambda)?;
    let mut out = h.to_vec();
    let mut log_det = 0.0;
    for (k, &i) in layer.active.iter().enumerate() {
        out[i] = h[i] * math::exp(s.data[k]) + t.data[k];
        log_det += s.data[k];
    }
    Ok((out, log_det))
}

/// Inverse coupling; exact because the frozen subset is unchanged.
pub fn coupling_inverse(
    layer: &CouplingLayer,
    h_next: &[f64],
    lambda: &[f64],
    n_par: usize,
) -> Result<Vec<f64>> {
    check_dims(layer, h_next, lambda, n_par)?;
    let (s, t) = layer.branches(h_next, lambda)?;
    let mut out = h_next.to_vec();
    for (k, &i) in layer.active.iter().enumerate() {
        out[i] = (h_next[i] - t.data[k]) * math::exp(-s.data[k]);
    }
    Ok(out)
}

/// The full conditional flow, normalizing direction `z = f(h; lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    pub arch: CnfArch,
    pub layers: Vec<CouplingLayer>,
}

impl FlowStack {
    pub fn init(arch: CnfArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = derive_stream(seed, &[0x63_6e_66]);
        let layers = (0..arch.n_flows)
            .map(|k| CouplingLayer::init(&arch, k, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(FlowStack { arch, layers })
    }
}

impl Parameterized for FlowStack {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn decay_mask(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|l| l.decay_mask()).collect()
    }
}

/// Applies layers 1..N_f in order; returns `(z, total log-det)`.
pub fn flow_forward(stack: &FlowStack, h: &[f64], lambda: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut state = h.to_vec();
    let mut log_det = 0.0;
    for layer in &stack.layers {
        let (next, contrib) = coupling_forward(layer, &state, lambda, stack.arch.n_par)?;
        state = next;
        log_det += contrib;
    }
    Ok((state, log_det))
}

/// Inverts the stack in reverse layer order.
pub fn flow_inverse(stack: &FlowStack, z: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
    let mut state = z.to_vec();
    for layer in stack.layers.iter().rev() {
        state = coupling_inverse(layer, &state, lambda, stack.arch.n_par)?;
    }
    Ok(state)
}

/// Exact conditional log-density `log p(h | lambda)` via change of variables
/// against the standard-normal base.
pub fn log_prob(stack: &FlowStack, h: &[f64], lambda: &[f64]) -> Result<f64> {
    let (z, log_det) = flow_forward(stack, h, lambda)?;
    let sq: f64 = z.iter().map(|v| v * v).sum();
    let lp = math::std_normal_log_density(sq, stack.arch.n_h) + log_det;
    if !lp.is_finite() {
        return Err(Error::Evaluation(format!(
            "log_prob: non-finite density ({lp}) for given inputs"
        )));
    }
    Ok(lp)
}

/// Mean negative conditional log-likelihood over `(h_i, lambda_i)` rows.
pub fn nll_loss(stack: &FlowStack, h: &Tensor, lambda: &Tensor) -> Result<f64> {
    if h.rows == 0 {
        return Err(Error::Contract("nll_loss: empty batch".into()));
    }
    if h.rows != lambda.rows {
        return Err(Error::Shape("nll_loss: row counts disagree".into()));
    }
    let mut acc = 0.0;
    for r in 0..h.rows {
        acc += log_prob(stack, h.row(r), lambda.row(r))?;
    }
    Ok(-acc / h.rows as f64)
}

/// Generative direction: draw `z` from the base and invert.
pub fn flow_sample(stack: &FlowStack, lambda: &[f64], rng: &mut Stream) -> Result<Vec<f64>> {
    let mut z = vec![0.0; stack.arch.n_h];
    fill_standard_normal(rng, &mut z);
    flow_inverse(stack, &z, lambda)
}

/// Taped batch NLL for training.
pub fn nll_loss_graph(
    stack: &FlowStack,
    g: &mut Graph,
    pvars: &[Var],
    h: Tensor,
    lambda: Tensor,
    dropout_rng: Option<&mut Stream>,
) -> Result<Var> {
    let batch = h.rows;
    if batch == 0 {
        return Err(Error::Contract("nll_loss: empty batch".into()));
    }
    if h.cols != stack.arch.n_h || lambda.cols != stack.arch.n_par || lambda.rows != batch {
        return Err(Error::Shape("nll_loss: batch dimensions disagree".into()));
    }
    let mut state = g.input(h);
    let lv = g.input(lambda);
    let mut cursor = ParamCursor::new(pvars);
    let mut ctx = ForwardCtx { dropout: stack.arch.dropout, rng: dropout_rng };

    let mut log_det_sum: Option<Var> = None;
    for layer in &stack.layers {
        let frozen = g.select_cols(state, &layer.frozen)?;
        let active = g.select_cols(state, &layer.active)?;
        let cond = mlp_forward_graph(g, &layer.conditioner, &mut cursor, lv, &mut ctx)?;
        let s = layer.scale.forward_graph(g, &mut cursor, frozen, cond, &mut ctx)?;
        let t = layer.translate.forward_graph(g, &mut cursor, frozen, cond, &mut ctx)?;
        let es = g.exp(s);
        let scaled = g.mul(active, es)?;
        let moved = g.add(scaled, t)?;
        state = g.merge_cols(moved, &layer.active, frozen, &layer.frozen)?;
        let contrib = g.sum(s);
        log_det_sum = Some(match log_det_sum {
            Some(prev) => g.add(prev, contrib)?,
            None => contrib,
        });
    }
    if !cursor.finished() {
        return Err(Error::Contract("nll_loss: parameter vars left over".into()));
    }
    let b = batch as f64;
    let zsq = g.square(state);
    let zsum = g.sum(zsq);
    let half_quad = g.scale(zsum, 0.5 / b);
    let det = g.scale(log_det_sum.expect("n_flows >= 2"), 1.0 / b);
    let diff = g.sub(half_quad, det)?;
    Ok(g.add_scalar(diff, 0.5 * stack.arch.n_h as f64 * math::LN_2PI))
}

/// Which latent inputs the flow trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentInput {
    /// Fresh reparameterized draw from the frozen encoder per loss evaluation.
    Draws,
    /// Encoder means.
    Means,
}

struct CnfTrainer {
    stack: FlowStack,
    mode: LatentInput,
}

impl Parameterized for CnfTrainer {
    fn params(&self) -> Vec<&Tensor> {
        self.stack.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.stack.params_mut()
    }
    fn decay_mask(&self) -> Vec<bool> {
        self.stack.decay_mask()
    }
}

impl BatchLoss for CnfTrainer {
    fn batch_loss(
        &self,
        g: &mut Graph,
        pvars: &[Var],
        batch: &[Tensor],
        training: bool,
        rng: &mut Stream,
    ) -> Result<Var> {
        let mu = &batch[0];
        let logvar = &batch[1];
        let lambda = batch[2].clone();
        let h = match self.mode {
            LatentInput::Means => mu.clone(),
            LatentInput::Draws => {
                let mut eps = Tensor::zeros(mu.rows, mu.cols);
                fill_standard_normal(rng, &mut eps.data);
                let mut h = mu.clone();
                for i in 0..h.data.len() {
                    h.data[i] += math::exp(0.5 * logvar.data[i]) * eps.data[i];
                }
                h
            }
        };
        let dropout_rng = if training && self.stack.arch.dropout > 0.0 {
            Some(&mut *rng)
        } else {
            None
        };
        nll_loss_graph(&self.stack, g, pvars, h, lambda, dropout_rng)
    }
}

/// Trains the flow on encoder outputs `(mu_i, logvar_i)` labeled `lambda_i`.
pub fn train_cnf(
    latent_mean: &Tensor,
    latent_logvar: &Tensor,
    lambda: &Tensor,
    arch: CnfArch,
    cfg: &TrainConfig,
    mode: LatentInput,
) -> Result<(FlowStack, TrainReport)> {
    if latent_mean.rows == 0 {
        return Err(Error::Contract("train_cnf: empty dataset".into()));
    }
    if latent_mean.rows != lambda.rows || latent_mean.shape() != latent_logvar.shape() {
        return Err(Error::Shape("train_cnf: dataset shapes disagree".into()));
    }
    let split = split_indices(latent_mean.rows, cfg.split_fraction, cfg.seed)?;
    let stack = FlowStack::init(arch, cfg.seed)?;
    let mut trainer = CnfTrainer { stack, mode };
    let report = train_loop(
        &mut trainer,
        &[latent_mean.clone(), latent_logvar.clone(), lambda.clone()],
        &split,
        cfg,
    )?;
    Ok((trainer.stack, report))
}
