//! Adam with decoupled weight decay, the plateau-then-cosine learning-rate
//! schedule, and the early-stopping training loop shared by both models.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::graph::{Graph, Var};
use crate::nn::Parameterized;
use crate::rng::{derive_stream, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

const TAG_SPLIT: u64 = 0x73706c69;
const TAG_TRAIN: u64 = 0x7472616e;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub initial_lr: f64,
    /// Fraction of total steps covered by the cosine decay window (the
    /// schedule holds `initial_lr` for the first `1 - decay_fraction`).
    pub decay_fraction: f64,
    /// Decoupled weight decay applied inside the optimizer step.
    pub weight_decay: f64,
    /// L2 penalty rate on dense weights, added to the training loss.
    pub l2_rate: f64,
    pub patience: usize,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 250,
            initial_lr: 1e-3,
            decay_fraction: 0.8,
            weight_decay: 0.05,
            l2_rate: 1e-3,
            patience: 20,
            split_fraction: 0.8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Contract("batch_size must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Contract("patience must be >= 1".into()));
        }
        if !(self.initial_lr > 0.0) {
            return Err(Error::Contract("initial_lr must be positive".into()));
        }
        if !(self.decay_fraction > 0.0 && self.decay_fraction <= 1.0) {
            return Err(Error::Contract("decay_fraction must lie in (0,1]".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Contract("split_fraction must lie in (0,1)".into()));
        }
        if self.weight_decay < 0.0 || self.l2_rate < 0.0 {
            return Err(Error::Contract("decay rates must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Adam moment estimates, aligned with a model's flat parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            first_moment: params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update with bias correction; decoupled weight decay shrinks the
/// parameters before the Adam delta is applied.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if lr < 0.0 {
        return Err(Error::Contract("adam_step: lr must be nonnegative".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(state.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(state.beta2, t as f64);
    for (k, p) in params.iter_mut().enumerate() {
        let g = &grads[k];
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "adam_step: param {k} is {}x{}, grad is {}x{}",
                p.rows, p.cols, g.rows, g.cols
            )));
        }
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * gi;
            v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] -= lr * weight_decay * p.data[i];
            p.data[i] -= lr * m_hat / (crate::math::sqrt(v_hat) + state.epsilon);
        }
    }
    Ok(())
}

/// Plateau-then-cosine schedule: `initial_lr` until the decay window opens,
/// then `initial_lr * (1 + cos(pi u)) / 2` over normalized window progress
/// `u`; reaches exactly zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Contract("lr_schedule: total_steps must be > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Contract(format!(
            "lr_schedule: step {step} beyond total {total_steps}"
        )));
    }
    let total = total_steps as f64;
    let plateau = (1.0 - cfg.decay_fraction) * total;
    let s = step as f64;
    if s < plateau {
        return Ok(cfg.initial_lr);
    }
    let u = (s - plateau) / (total - plateau);
    Ok(cfg.initial_lr * 0.5 * (1.0 + crate::math::cos(core::f64::consts::PI * u)))
}

/// Deterministic train/validation row split.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn split_indices(n: usize, split_fraction: f64, seed: u64) -> Result<Split> {
    if n == 0 {
        return Err(Error::Contract("split_indices: empty dataset".into()));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::Contract("split_fraction must lie in (0,1)".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = derive_stream(seed, &[TAG_SPLIT]);
    idx.shuffle(&mut rng);
    if n == 1 {
        // degenerate toy datasets validate on the training point
        return Ok(Split { train: idx.clone(), val: idx });
    }
    let train_n = ((n as f64 * split_fraction) as usize).clamp(1, n - 1);
    let val = idx.split_off(train_n);
    Ok(Split { train: idx, val })
}

/// A model that can put its per-batch loss on the tape. `pvars` holds the
/// graph vars of the flat parameter list, in [`Parameterized::params`] order;
/// `batch` holds the gathered rows of each data matrix.
pub trait BatchLoss {
    fn batch_loss(
        &self,
        g: &mut Graph,
        pvars: &[Var],
        batch: &[Tensor],
        training: bool,
        rng: &mut Stream,
    ) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

fn gather_batch(data: &[Tensor], indices: &[usize]) -> Result<Vec<Tensor>> {
    data.iter().map(|m| m.gather_rows(indices)).collect()
}

/// Mini-batch Adam with shuffled epochs, per-epoch validation, and early
/// stopping; returns the parameters of the best validation epoch.
pub fn train_loop<M: Parameterized + BatchLoss>(
    model: &mut M,
    data: &[Tensor],
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() || data[0].rows == 0 {
        return Err(Error::Contract("train_loop: empty dataset".into()));
    }
    let n = data[0].rows;
    if data.iter().any(|m| m.rows != n) {
        return Err(Error::Shape("train_loop: data matrices disagree on rows".into()));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Contract("train_loop: split has an empty side".into()));
    }

    let mut rng = derive_stream(cfg.seed, &[TAG_TRAIN]);
    let batches_per_epoch = split.train.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.max_epochs;
    let mut adam = AdamState::new(&model.params());
    let decay_mask = model.decay_mask();

    let mut best_params: Vec<Tensor> = model.params().iter().map(|t| (*t).clone()).collect();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut bad_epochs = 0usize;
    let mut stopped_early = false;
    let mut history = Vec::new();
    let mut train_idx = split.train.clone();
    let mut global_step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_lr = cfg.initial_lr;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let lr = lr_schedule(global_step, total_steps, cfg)?;
            epoch_lr = lr;
            let batch = gather_batch(data, chunk)?;

            let mut g = Graph::new();
            let pvars: Vec<Var> = model.params().iter().map(|t| g.param((*t).clone())).collect();
            let mut loss = model.batch_loss(&mut g, &pvars, &batch, true, &mut rng)?;
            if cfg.l2_rate > 0.0 {
                for (&pv, &decays) in pvars.iter().zip(decay_mask.iter()) {
                    if decays {
                        let sq = g.square(pv);
                        let s = g.sum(sq);
                        let penalty = g.scale(s, cfg.l2_rate);
                        loss = g.add(loss, penalty)?;
                    }
                }
            }
            let grads = g.backward(loss)?;
            let grad_tensors: Vec<Tensor> = pvars
                .iter()
                .map(|&v| {
                    let val = g.value(v);
                    grads.get_or_zeros(v, val.rows, val.cols)
                })
                .collect();
            let mut params = model.params_mut();
            adam_step(&mut params, &grad_tensors, &mut adam, lr, cfg.weight_decay)?;
            epoch_loss += g.scalar(loss) * chunk.len() as f64;
            global_step += 1;
        }
        epoch_loss /= split.train.len() as f64;

        let val_batch = gather_batch(data, &split.val)?;
        let mut g = Graph::new();
        let pvars: Vec<Var> = model.params().iter().map(|t| g.param((*t).clone())).collect();
        let val_var = model.batch_loss(&mut g, &pvars, &val_batch, false, &mut rng)?;
        let val_loss = g.scalar(val_var);
        if !val_loss.is_finite() {
            return Err(Error::Evaluation(format!(
                "train_loop: non-finite validation loss at epoch {epoch}"
            )));
        }

        history.push(EpochRecord { epoch, train_loss: epoch_loss, val_loss, lr: epoch_lr });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = model.params().iter().map(|t| (*t).clone()).collect();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    for (slot, saved) in model.params_mut().into_iter().zip(best_params.into_iter()) {
        *slot = saved;
    }
    Ok(TrainReport { history, best_epoch, best_val_loss: best_val, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp, ParamCursor};
    use alloc::vec;
    use core::cell::Cell;

    fn scalar_param(v: f64) -> Tensor {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = scalar_param(1.5);
        let g = scalar_param(0.0);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[g], &mut st, 0.001, 0.0).unwrap();
        assert_eq!(p.data[0], 1.5);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // bias-corrected m_hat = v_hat = 1 on the first step, so the delta is
        // lr / (1 + eps) up to eps.
        let mut p = scalar_param(0.0);
        let g = scalar_param(1.0);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[g], &mut st, 0.001, 0.0).unwrap();
        assert!((p.data[0] + 0.001).abs() < 1e-9, "got {}", p.data[0]);
    }

    #[test]
    fn decoupled_decay_shrinks_params() {
        let mut p = scalar_param(1.0);
        let g = scalar_param(0.0);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[g], &mut st, 0.001, 0.05).unwrap();
        assert!((p.data[0] - 0.99995).abs() < 1e-12, "got {}", p.data[0]);
    }

    fn cfg_for_schedule() -> TrainConfig {
        TrainConfig { initial_lr: 0.002, decay_fraction: 0.8, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = cfg_for_schedule();
        assert_eq!(lr_schedule(0, 1000, &cfg).unwrap(), 0.002);
        assert_eq!(lr_schedule(1000, 1000, &cfg).unwrap(), 0.0);
        assert!(lr_schedule(5, 0, &cfg).is_err());
    }

    #[test]
    fn schedule_midpoint_halves() {
        let cfg = cfg_for_schedule();
        // plateau ends at 200; decay window midpoint is 600
        let lr = lr_schedule(600, 1000, &cfg).unwrap();
        assert!((lr - 0.001).abs() < 1e-15, "got {lr}");
    }

    #[test]
    fn schedule_monotone_and_continuous() {
        let cfg = cfg_for_schedule();
        let total = 500;
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = lr_schedule(s, total, &cfg).unwrap();
            assert!(lr <= prev + 1e-15, "increase at step {s}");
            prev = lr;
        }
        // continuity at the plateau/decay junction
        let plateau = ((1.0 - cfg.decay_fraction) * total as f64) as usize;
        let at = lr_schedule(plateau, total, &cfg).unwrap();
        assert!((at - cfg.initial_lr).abs() < 1e-12);
    }

    // Scalar quadratic (p - 3)^2; ignores the batch content.
    struct Quadratic {
        p: Tensor,
    }

    impl Parameterized for Quadratic {
        fn params(&self) -> vec::Vec<&Tensor> {
            vec![&self.p]
        }
        fn params_mut(&mut self) -> vec::Vec<&mut Tensor> {
            vec![&mut self.p]
        }
        fn decay_mask(&self) -> vec::Vec<bool> {
            vec![false]
        }
    }

    impl BatchLoss for Quadratic {
        fn batch_loss(
            &self,
            g: &mut Graph,
            pvars: &[Var],
            _batch: &[Tensor],
            _training: bool,
            _rng: &mut Stream,
        ) -> Result<Var> {
            let shifted = g.add_scalar(pvars[0], -3.0);
            let sq = g.square(shifted);
            Ok(g.sum(sq))
        }
    }

    fn dummy_rows(n: usize) -> Tensor {
        Tensor::zeros(n, 1)
    }

    #[test]
    fn quadratic_converges() {
        let mut model = Quadratic { p: scalar_param(0.0) };
        let data = [dummy_rows(10)];
        let split = split_indices(10, 0.8, 3).unwrap();
        let cfg = TrainConfig {
            batch_size: 10,
            max_epochs: 500,
            initial_lr: 0.05,
            weight_decay: 0.0,
            l2_rate: 0.0,
            patience: 500,
            ..TrainConfig::default()
        };
        let report = train_loop(&mut model, &data, &split, &cfg).unwrap();
        assert!(
            (model.p.data[0] - 3.0).abs() < 1e-2,
            "p = {} after {} epochs",
            model.p.data[0],
            report.history.len()
        );
    }

    // Loss that strictly increases on every validation call and produces zero
    // gradients, to pin the early-stopping count.
    struct Rising {
        p: Tensor,
        calls: Cell<u64>,
    }

    impl Parameterized for Rising {
        fn params(&self) -> vec::Vec<&Tensor> {
            vec![&self.p]
        }
        fn params_mut(&mut self) -> vec::Vec<&mut Tensor> {
            vec![&mut self.p]
        }
        fn decay_mask(&self) -> vec::Vec<bool> {
            vec![false]
        }
    }

    impl BatchLoss for Rising {
        fn batch_loss(
            &self,
            g: &mut Graph,
            pvars: &[Var],
            _batch: &[Tensor],
            training: bool,
            _rng: &mut Stream,
        ) -> Result<Var> {
            let level = if training {
                0.0
            } else {
                self.calls.set(self.calls.get() + 1);
                self.calls.get() as f64
            };
            let sq = g.square(pvars[0]);
            let zero = g.scale(sq, 0.0);
            let s = g.sum(zero);
            Ok(g.add_scalar(s, level))
        }
    }

    #[test]
    fn early_stopping_after_exactly_patience_epochs() {
        let mut model = Rising { p: scalar_param(1.0), calls: Cell::new(0) };
        let data = [dummy_rows(8)];
        let split = split_indices(8, 0.75, 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 100,
            patience: 5,
            weight_decay: 0.0,
            l2_rate: 0.0,
            ..TrainConfig::default()
        };
        let report = train_loop(&mut model, &data, &split, &cfg).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.history.len(), 1 + 5);
        assert_eq!(report.best_epoch, 1);
        // parameters come from the best epoch, which is the initial epoch
        assert_eq!(model.p.data[0], 1.0);
    }

    // Small MLP regression used for the determinism check.
    struct Regression {
        mlp: Mlp,
    }

    impl Parameterized for Regression {
        fn params(&self) -> vec::Vec<&Tensor> {
            self.mlp.params()
        }
        fn params_mut(&mut self) -> vec::Vec<&mut Tensor> {
            self.mlp.params_mut()
        }
        fn decay_mask(&self) -> vec::Vec<bool> {
            self.mlp.decay_mask()
        }
    }

    impl BatchLoss for Regression {
        fn batch_loss(
            &self,
            g: &mut Graph,
            pvars: &[Var],
            batch: &[Tensor],
            _training: bool,
            _rng: &mut Stream,
        ) -> Result<Var> {
            let x = g.input(batch[0].clone());
            let y = g.input(batch[1].clone());
            let mut cursor = ParamCursor::new(pvars);
            let mut ctx = crate::nn::ForwardCtx::<Stream>::inference();
            let pred = crate::nn::mlp_forward_graph(g, &self.mlp, &mut cursor, x, &mut ctx)?;
            let diff = g.sub(pred, y)?;
            let sq = g.square(diff);
            let s = g.sum(sq);
            Ok(g.scale(s, 1.0 / batch[0].rows as f64))
        }
    }

    fn toy_regression_data(n: usize) -> [Tensor; 2] {
        let mut rng = derive_stream(99, &[4]);
        let mut x = Tensor::zeros(n, 2);
        let mut y = Tensor::zeros(n, 1);
        for i in 0..n {
            let a = crate::rng::standard_normal(&mut rng);
            let b = crate::rng::standard_normal(&mut rng);
            x.data[i * 2] = a;
            x.data[i * 2 + 1] = b;
            y.data[i] = 0.5 * a - 0.3 * b * b;
        }
        [x, y]
    }

    fn train_once(seed: u64) -> vec::Vec<f64> {
        let mut rng = derive_stream(seed, &[5]);
        let mut model = Regression {
            mlp: Mlp::xavier(&[2, 6, 1], Activation::Tanh, Activation::Linear, &mut rng).unwrap(),
        };
        let data = toy_regression_data(40);
        let split = split_indices(40, 0.8, seed).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 12,
            patience: 12,
            seed,
            ..TrainConfig::default()
        };
        train_loop(&mut model, &data, &split, &cfg).unwrap();
        model.params().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    #[test]
    fn identical_seeds_train_bit_identically() {
        let a = train_once(11);
        let b = train_once(11);
        assert_eq!(a, b);
        let c = train_once(12);
        assert_ne!(a, c);
    }

    #[test]
    fn validation_improvement_is_tracked() {
        let mut rng = derive_stream(21, &[5]);
        let mut model = Regression {
            mlp: Mlp::xavier(&[2, 6, 1], Activation::Tanh, Activation::Linear, &mut rng).unwrap(),
        };
        let data = toy_regression_data(60);
        let split = split_indices(60, 0.8, 21).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 60,
            patience: 60,
            weight_decay: 0.0,
            l2_rate: 0.0,
            seed: 21,
            ..TrainConfig::default()
        };
        let report = train_loop(&mut model, &data, &split, &cfg).unwrap();
        let first = report.history.first().unwrap().val_loss;
        assert!(report.best_val_loss < first, "no improvement over {first}");
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut model = Quadratic { p: scalar_param(0.0) };
        let data = [Tensor::zeros(0, 1)];
        let split = Split { train: vec![], val: vec![] };
        assert!(train_loop(&mut model, &data, &split, &TrainConfig::default()).is_err());
    }
}
