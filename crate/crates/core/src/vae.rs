//! Informed variational autoencoder: a probabilistic encoder with mean and
//! log-variance heads, a decoder, and a latent-space predictor head, trained
//! jointly on reconstruction + KL + prediction losses.

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

/// Diagonal Gaussian over the latent space, one per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl LatentGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// One reparameterized draw with a fresh standard-normal epsilon.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut eps = vec![0.0; self.dim()];
        fill_standard_normal(rng, &mut eps);
        reparameterize(self, &eps)
    }
}

/// `h = mu + sigma (.) eps` with `sigma = exp(log_variance / 2)`.
pub fn reparameterize(latent: &LatentGaussian, eps: &[f64]) -> Vec<f64> {
    latent
        .mean
        .iter()
        .zip(latent.log_variance.iter())
        .zip(eps.iter())
        .map(|((&m, &lv), &e)| m + math::exp(0.5 * lv) * e)
        .collect()
}

/// Closed-form KL divergence from `N(mu, sigma^2)` to the standard normal:
/// `1/2 sum(mu^2 + sigma^2 - 1 - log sigma^2)`; nonnegative, zero only at the
/// prior.
pub fn kl_term(latent: &LatentGaussian) -> f64 {
    latent
        .mean
        .iter()
        .zip(latent.log_variance.iter())
        .map(|(&m, &lv)| 0.5 * (m * m + math::exp(lv) - 1.0 - lv))
        .sum()
}

/// Per-feature affine standardization fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Column statistics over the given rows; constant columns get unit scale.
    pub fn fit(x: &Tensor, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("Standardizer::fit: no rows".into()));
        }
        let d = x.cols;
        let mut mean = vec![0.0; d];
        for &r in rows {
            for (m, v) in mean.iter_mut().zip(x.row(r).iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= rows.len() as f64;
        }
        let mut var = vec![0.0; d];
        for &r in rows {
            for c in 0..d {
                let dv = x.at(r, c) - mean[c];
                var[c] += dv * dv;
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = math::sqrt(v / rows.len() as f64);
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }

    pub fn invert_row(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(&v, (&m, &s))| v * s + m)
            .collect()
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] = (out.data[r * out.cols + c] - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// Architecture and loss weights of the informed VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeArch {
    pub n_x: usize,
    pub n_h: usize,
    pub n_par: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub predictor_widths: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub beta_kl: f64,
    pub beta_pred: f64,
    pub sigma_x: f64,
}

impl VaeArch {
    /// Dense-stack defaults: 81 -> 64 -> 32 trunk with tanh, mirrored decoder,
    /// 64/32 predictor, `beta_kl = 2.5e-4`, `beta_pred = 1e-4`, `sigma_x = 1`.
    pub fn new(n_x: usize, n_h: usize, n_par: usize) -> Self {
        VaeArch {
            n_x,
            n_h,
            n_par,
            encoder_widths: vec![64, 32],
            decoder_widths: vec![32, 64],
            predictor_widths: vec![64, 32],
            activation: Activation::Tanh,
            dropout: 0.0,
            beta_kl: 2.5e-4,
            beta_pred: 1e-4,
            sigma_x: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_h == 0 || self.n_par == 0 {
            return Err(Error::Contract("VaeArch: zero dimension".into()));
        }
        if !(self.sigma_x > 0.0) {
            return Err(Error::Contract("VaeArch: sigma_x must be positive".into()));
        }
        if self.beta_kl < 0.0 || self.beta_pred < 0.0 {
            return Err(Error::Contract("VaeArch: beta weights must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Contract("VaeArch: dropout must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Encoder trunk with two linear heads, decoder, and predictor. The
/// standardizer holds training-set feature statistics; raw observations pass
/// through it before encoding, reconstructions pass back through its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct IVaeModel {
    pub arch: VaeArch,
    pub encoder_trunk: Mlp,
    pub mu_head: DenseLayer,
    pub logvar_head: DenseLayer,
    pub decoder: Mlp,
    pub predictor: Mlp,
    pub standardizer: Standardizer,
}

impl IVaeModel {
    pub fn init(arch: VaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = derive_stream(seed, &[0x76_61_65]);
        let mut enc_dims = vec![arch.n_x];
        enc_dims.extend_from_slice(&arch.encoder_widths);
        let encoder_trunk = Mlp::xavier(&enc_dims, arch.activation, arch.activation, &mut rng)?;
        let trunk_out = *enc_dims.last().unwrap();
        let mu_head = DenseLayer::xavier(trunk_out, arch.n_h, Activation::Linear, &mut rng);
        let logvar_head = DenseLayer::xavier(trunk_out, arch.n_h, Activation::Linear, &mut rng);
        let mut dec_dims = vec![arch.n_h];
        dec_dims.extend_from_slice(&arch.decoder_widths);
        dec_dims.push(arch.n_x);
        let decoder = Mlp::xavier(&dec_dims, arch.activation, Activation::Linear, &mut rng)?;
        let mut pred_dims = vec![arch.n_h];
        pred_dims.extend_from_slice(&arch.predictor_widths);
        pred_dims.push(arch.n_par);
        let predictor = Mlp::xavier(&pred_dims, arch.activation, Activation::Linear, &mut rng)?;
        let standardizer = Standardizer::identity(arch.n_x);
        Ok(IVaeModel {
            arch,
            encoder_trunk,
            mu_head,
            logvar_head,
            decoder,
            predictor,
            standardizer,
        })
    }
}

impl Parameterized for IVaeModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = self.encoder_trunk.params();
        out.push(&self.mu_head.weights);
        out.push(&self.mu_head.bias);
        out.push(&self.logvar_head.weights);
        out.push(&self.logvar_head.bias);
        out.extend(self.decoder.params());
        out.extend(self.predictor.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder_trunk.params_mut();
        out.push(&mut self.mu_head.weights);
        out.push(&mut self.mu_head.bias);
        out.push(&mut self.logvar_head.weights);
        out.push(&mut self.logvar_head.bias);
        out.extend(self.decoder.params_mut());
        out.extend(self.predictor.params_mut());
        out
    }

    fn decay_mask(&self) -> Vec<bool> {
        let mut out = self.encoder_trunk.decay_mask();
        out.extend_from_slice(&[true, false, true, false]);
        out.extend(self.decoder.decay_mask());
        out.extend(self.predictor.decay_mask());
        out
    }
}

/// Encodes one raw observation into its latent Gaussian.
pub fn encode(model: &IVaeModel, x: &[f64]) -> Result<LatentGaussian> {
    if x.len() != model.arch.n_x {
        return Err(Error::Shape(format!(
            "encode: observation has {} entries, model expects {}",
            x.len(),
            model.arch.n_x
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("encode: non-finite observation".into()));
    }
    let std = model.standardizer.apply_row(x);
    let row = Tensor::row_vector(std);
    let trunk = model.encoder_trunk.forward(&row)?;
    let mu = dense_forward(&model.mu_head, &trunk)?;
    let logvar = dense_forward(&model.logvar_head, &trunk)?;
    Ok(LatentGaussian { mean: mu.data, log_variance: logvar.data })
}

/// Batch encoder over raw rows; returns `(mu, log_variance)` row per sample.
pub fn encode_batch(model: &IVaeModel, x: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.cols != model.arch.n_x {
        return Err(Error::Shape(format!(
            "encode_batch: {} features, model expects {}",
            x.cols, model.arch.n_x
        )));
    }
    let std = model.standardizer.apply(x);
    let trunk = model.encoder_trunk.forward(&std)?;
    let mu = dense_forward(&model.mu_head, &trunk)?;
    let logvar = dense_forward(&model.logvar_head, &trunk)?;
    Ok((mu, logvar))
}

/// Decodes a latent point back to observation space (raw units).
pub fn decode(model: &IVaeModel, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != model.arch.n_h {
        return Err(Error::Shape(format!(
            "decode: latent has {} entries, model expects {}",
            h.len(),
            model.arch.n_h
        )));
    }
    let row = Tensor::row_vector(h.to_vec());
    let out = model.decoder.forward(&row)?;
    Ok(model.standardizer.invert_row(&out.data))
}

/// Latent-space parameter prediction.
pub fn predict(model: &IVaeModel, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != model.arch.n_h {
        return Err(Error::Shape(format!(
            "predict: latent has {} entries, model expects {}",
            h.len(),
            model.arch.n_h
        )));
    }
    let row = Tensor::row_vector(h.to_vec());
    Ok(model.predictor.forward(&row)?.data)
}

pub struct IvaeLossVars {
    pub total: Var,
    pub mse: Var,
    pub kl: Var,
    pub pred: Var,
}

/// Puts the composite loss on the tape. `x_std` must already be standardized;
/// `eps` holds one standard-normal draw per sample.
pub fn ivae_loss_graph(
    model: &IVaeModel,
    g: &mut Graph,
    pvars: &[Var],
    x_std: Tensor,
    lambda: Tensor,
    eps: Tensor,
    dropout_rng: Option<&mut Stream>,
) -> Result<IvaeLossVars> {
    let batch = x_std.rows;
    if batch == 0 {
        return Err(Error::Contract("ivae_loss: empty batch".into()));
    }
    if x_std.cols != model.arch.n_x
        || lambda.cols != model.arch.n_par
        || eps.cols != model.arch.n_h
        || lambda.rows != batch
        || eps.rows != batch
    {
        return Err(Error::Shape("ivae_loss: batch dimensions disagree".into()));
    }
    let xv = g.input(x_std);
    let lv = g.input(lambda);
    let ev = g.input(eps);
    let mut cursor = ParamCursor::new(pvars);
    let mut ctx = ForwardCtx {
        dropout: model.arch.dropout,
        rng: dropout_rng,
    };

    let trunk = mlp_forward_graph(g, &model.encoder_trunk, &mut cursor, xv, &mut ctx)?;
    let wm = cursor.take();
    let bm = cursor.take();
    let mu = dense_forward_graph(g, Activation::Linear, wm, bm, trunk)?;
    let wl = cursor.take();
    let bl = cursor.take();
    let logvar = dense_forward_graph(g, Activation::Linear, wl, bl, trunk)?;

    let half_logvar = g.scale(logvar, 0.5);
    let sigma = g.exp(half_logvar);
    let noise = g.mul(sigma, ev)?;
    let h = g.add(mu, noise)?;

    let xhat = mlp_forward_graph(g, &model.decoder, &mut cursor, h, &mut ctx)?;
    let lhat = mlp_forward_graph(g, &model.predictor, &mut cursor, h, &mut ctx)?;
    if !cursor.finished() {
        return Err(Error::Contract("ivae_loss: parameter vars left over".into()));
    }

    let b = batch as f64;
    let rec_diff = g.sub(xhat, xv)?;
    let rec_sq = g.square(rec_diff);
    let rec_sum = g.sum(rec_sq);
    let mse = g.scale(rec_sum, 1.0 / (2.0 * model.arch.sigma_x * model.arch.sigma_x * b));

    let mu_sq = g.square(mu);
    let var = g.exp(logvar);
    let mu_plus_var = g.add(mu_sq, var)?;
    let shifted = g.sub(mu_plus_var, logvar)?;
    let centered = g.add_scalar(shifted, -1.0);
    let kl_sum = g.sum(centered);
    let kl = g.scale(kl_sum, 0.5 / b);

    let pred_diff = g.sub(lhat, lv)?;
    let pred_sq = g.square(pred_diff);
    let pred_sum = g.sum(pred_sq);
    let pred = g.scale(pred_sum, 1.0 / b);

    let kl_w = g.scale(kl, model.arch.beta_kl);
    let pred_w = g.scale(pred, model.arch.beta_pred);
    let partial = g.add(mse, kl_w)?;
    let total = g.add(partial, pred_w)?;
    Ok(IvaeLossVars { total, mse, kl, pred })
}

/// Loss components on a raw batch, with one fresh reparameterization draw per
/// sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvaeLossParts {
    pub mse: f64,
    pub kl: f64,
    pub pred: f64,
    pub total: f64,
}

pub fn ivae_loss(
    model: &IVaeModel,
    x_raw: &Tensor,
    lambda: &Tensor,
    rng: &mut Stream,
) -> Result<IvaeLossParts> {
    let x_std = model.standardizer.apply(x_raw);
    let mut eps = Tensor::zeros(x_raw.rows, model.arch.n_h);
    fill_standard_normal(rng, &mut eps.data);
    let mut g = Graph::new();
    let pvars: Vec<Var> = model.params().iter().map(|t| g.input((*t).clone())).collect();
    let vars = ivae_loss_graph(model, &mut g, &pvars, x_std, lambda.clone(), eps, None)?;
    Ok(IvaeLossParts {
        mse: g.scalar(vars.mse),
        kl: g.scalar(vars.kl),
        pred: g.scalar(vars.pred),
        total: g.scalar(vars.total),
    })
}

impl BatchLoss for IVaeModel {
    fn batch_loss(
        &self,
        g: &mut Graph,
        pvars: &[Var],
        batch: &[Tensor],
        training: bool,
        rng: &mut Stream,
    ) -> Result<Var> {
        let x_std = batch[0].clone();
        let lambda = batch[1].clone();
        let mut eps = Tensor::zeros(x_std.rows, self.arch.n_h);
        fill_standard_normal(rng, &mut eps.data);
        let dropout_rng = if training && self.arch.dropout > 0.0 { Some(&mut *rng) } else { None };
        let vars = ivae_loss_graph(self, g, pvars, x_std, lambda, eps, dropout_rng)?;
        Ok(vars.total)
    }
}

/// Fits the informed VAE on `(x, lambda)` pairs. Feature standardization is
/// computed from the training side of the split and stored in the model.
pub fn train_ivae(
    x: &Tensor,
    lambda: &Tensor,
    arch: VaeArch,
    cfg: &TrainConfig,
) -> Result<(IVaeModel, TrainReport)> {
    if x.rows == 0 {
        return Err(Error::Contract("train_ivae: empty dataset".into()));
    }
    if x.rows != lambda.rows {
        return Err(Error::Shape("train_ivae: row counts disagree".into()));
    }
    let split = split_indices(x.rows, cfg.split_fraction, cfg.seed)?;
    let mut model = IVaeModel::init(arch, cfg.seed)?;
    model.standardizer = Standardizer::fit(x, &split.train)?;
    let x_std = model.standardizer.apply(x);
    let report = train_loop(&mut model, &[x_std, lambda.clone()], &split, cfg)?;
    Ok((model, report))
}
