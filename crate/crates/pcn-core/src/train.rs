//! Training: Adam with bias correction, a geometric learning-rate schedule,
//! and an epoch loop over patch pairs with deterministic shuffling.
//!
//! Determinism contract: given the same starting state, data, and
//! configuration, training produces bit-identical parameters. The per-epoch
//! shuffle is derived statelessly from `(seed, epoch)`, so a run resumed from
//! a checkpoint continues exactly as the uninterrupted run would have.

use crate::net::{
    network_backward, network_forward, network_loss, CloneNetConfig, ParameterSet,
};
use crate::tensor::{Grid4, Scalar};
use crate::{Error, Result};
use crate::data::BatchIterator;
use std::time::Instant;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Seeds the per-epoch shuffle (and nothing else).
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            n_epochs: 60,
            lr_initial: 1e-4,
            lr_final: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.n_epochs == 0 {
            return Err(Error::Config("n_epochs must be at least 1".into()));
        }
        if !(self.lr_initial > 0.0) || !(self.lr_final > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be positive, got initial {} and final {}",
                self.lr_initial, self.lr_final
            )));
        }
        Ok(())
    }

    /// Learning rate for `epoch` (0-based): geometric interpolation from
    /// `lr_initial` at epoch 0 to `lr_final` at the last epoch. A single-epoch
    /// run uses `lr_initial`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.n_epochs <= 1 {
            return self.lr_initial;
        }
        let frac = epoch as f64 / (self.n_epochs - 1) as f64;
        self.lr_initial * (self.lr_final / self.lr_initial).powf(frac)
    }
}

/// First and second moment estimates for Adam, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct AdamState<E> {
    pub m: ParameterSet<E>,
    pub v: ParameterSet<E>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl<E: Scalar> AdamState<E> {
    pub fn new(params: &ParameterSet<E>) -> Self {
        Self {
            m: ParameterSet::zeros_like(params),
            v: ParameterSet::zeros_like(params),
            t: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update with bias correction:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)`.
pub fn adam_step<E: Scalar>(
    params: &mut ParameterSet<E>,
    grads: &ParameterSet<E>,
    state: &mut AdamState<E>,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let b1 = E::from_f64(ADAM_BETA1);
    let b2 = E::from_f64(ADAM_BETA2);
    let one = E::ONE;
    let c1 = E::from_f64(1.0 - ADAM_BETA1.powi(state.t as i32));
    let c2 = E::from_f64(1.0 - ADAM_BETA2.powi(state.t as i32));
    let eps = E::from_f64(ADAM_EPS);
    let lr = E::from_f64(lr);

    let mut p = params.slices_mut();
    let g = grads.slices();
    let mut ms = state.m.slices_mut();
    let mut vs = state.v.slices_mut();
    if p.len() != g.len() || p.len() != ms.len() || p.len() != vs.len() {
        return Err(Error::shape("adam slice counts", p.len(), g.len()));
    }
    for i in 0..p.len() {
        if p[i].len() != g[i].len() {
            return Err(Error::shape("adam slice length", p[i].len(), g[i].len()));
        }
        for j in 0..p[i].len() {
            let gv = g[i][j];
            let m = b1 * ms[i][j] + (one - b1) * gv;
            let v = b2 * vs[i][j] + (one - b2) * gv * gv;
            ms[i][j] = m;
            vs[i][j] = v;
            let m_hat = m / c1;
            let v_hat = v / c2;
            p[i][j] = p[i][j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Everything that evolves during training; checkpoints capture exactly this.
#[derive(Debug, Clone)]
pub struct TrainState<E> {
    pub params: ParameterSet<E>,
    pub adam: AdamState<E>,
    /// Epochs completed so far; training continues from here.
    pub epochs_done: usize,
}

impl<E: Scalar> TrainState<E> {
    pub fn fresh(params: ParameterSet<E>) -> Self {
        let adam = AdamState::new(&params);
        Self {
            params,
            adam,
            epochs_done: 0,
        }
    }
}

/// One line of the convergence log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_rmse: f64,
    pub wall_seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_rmse,wall_seconds";

impl EpochStats {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.lr, self.train_rmse, self.wall_seconds)
    }
}

/// Collected per-epoch statistics with CSV rendering (LF line endings).
#[derive(Debug, Clone, Default)]
pub struct ConvergenceLog {
    pub entries: Vec<EpochStats>,
}

impl ConvergenceLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&e.csv_line());
            out.push('\n');
        }
        out
    }
}

fn check_patch_pair<E: Scalar>(noisy: &Grid4<E>, clean: &Grid4<E>) -> Result<()> {
    if noisy.dims() != clean.dims() {
        return Err(Error::shape("noisy vs clean patches", clean.dims(), noisy.dims()));
    }
    if noisy.c() != 1 {
        return Err(Error::shape("patch channels", 1usize, noisy.c()));
    }
    Ok(())
}

/// Copy the patches at `indices` into one `(len, 1, h, w)` batch.
fn gather_batch<E: Scalar>(src: &Grid4<E>, indices: &[usize]) -> Grid4<E> {
    let [_, _, h, w] = src.dims();
    let mut out = Grid4::zeros([indices.len(), 1, h, w]);
    for (row, &idx) in indices.iter().enumerate() {
        out.plane_mut(row, 0).copy_from_slice(src.plane(idx, 0));
    }
    out
}

/// Root-mean-square error of the final clone's output over all patches,
/// accumulated in double precision, evaluated in deterministic batch order.
pub fn evaluate_rmse<E: Scalar>(
    config: &CloneNetConfig,
    params: &ParameterSet<E>,
    noisy: &Grid4<E>,
    clean: &Grid4<E>,
    batch_size: usize,
) -> Result<f64> {
    check_patch_pair(noisy, clean)?;
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let n = noisy.n();
    let indices: Vec<usize> = (0..n).collect();
    let mut sse = 0.0f64;
    let mut count = 0usize;
    for chunk in indices.chunks(batch_size) {
        let batch_noisy = gather_batch(noisy, chunk);
        let batch_clean = gather_batch(clean, chunk);
        let x = crate::net::denoise(&batch_noisy, config, params)?;
        for (&p, &t) in x.data().iter().zip(batch_clean.data()) {
            let d = p.as_f64() - t.as_f64();
            sse += d * d;
        }
        count += x.len();
    }
    Ok((sse / count as f64).sqrt())
}

/// Train from `state.epochs_done` up to `train.n_epochs` — or up to
/// `stop_after` epochs if given, leaving a state that a later call resumes
/// seamlessly. The learning-rate schedule always spans the full
/// `train.n_epochs` horizon, so an early stop plus a resume replays the
/// uninterrupted run bit for bit.
///
/// Each epoch shuffles the patches, walks full batches (a trailing partial
/// batch is skipped), and takes one Adam step per batch at that epoch's
/// learning rate; afterwards the whole set is scored through the final clone
/// and reported to `on_epoch`. Training aborts with
/// [`Error::NonFiniteLoss`] the moment a batch loss stops being finite.
pub fn train<E: Scalar>(
    config: &CloneNetConfig,
    state: &mut TrainState<E>,
    noisy: &Grid4<E>,
    clean: &Grid4<E>,
    train: &TrainConfig,
    stop_after: Option<usize>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<()> {
    config.validate()?;
    train.validate()?;
    check_patch_pair(noisy, clean)?;
    state.params.validate_against(config)?;
    let n = noisy.n();
    if n < train.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} available patches: no full batch to train on",
            train.batch_size, n
        )));
    }
    if state.epochs_done > train.n_epochs {
        return Err(Error::Config(format!(
            "state has {} epochs done but the run is configured for {}",
            state.epochs_done, train.n_epochs
        )));
    }
    let until = match stop_after {
        Some(e) if e > train.n_epochs => {
            return Err(Error::Config(format!(
                "stop_after {} exceeds the configured {} epochs",
                e, train.n_epochs
            )));
        }
        Some(e) => e,
        None => train.n_epochs,
    };

    let started = Instant::now();
    for epoch in state.epochs_done..until {
        let lr = train.learning_rate(epoch);
        let batches = BatchIterator::new(n, train.batch_size, train.seed, epoch)?;
        for (batch_idx, chunk) in batches.enumerate() {
            let batch_noisy = gather_batch(noisy, &chunk);
            let batch_clean = gather_batch(clean, &chunk);
            let (outputs, trace) = network_forward(&batch_noisy, config, &state.params)?;
            let (loss, out_grads) = network_loss(&outputs, &batch_clean, config.loss_mode)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let grads = network_backward(&trace, &out_grads, config, &state.params)?;
            adam_step(&mut state.params, &grads, &mut state.adam, lr)?;
        }
        let train_rmse = evaluate_rmse(config, &state.params, noisy, clean, train.batch_size)?;
        state.epochs_done = epoch + 1;
        on_epoch(&EpochStats {
            epoch,
            lr,
            train_rmse,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}
