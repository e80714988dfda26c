//! Adam with selective weight decay, and the softmax cross-entropy loss.
//!
//! Decay is classical coupled L2 (added to the gradient) and touches only
//! parameters flagged `decay_eligible`, i.e. convolution and linear weights.
//! Batch-norm scale/shift and biases are never decayed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{BackFn, ParamStore, Tape, Var};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("label {label} out of range for {k} classes")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("trainable parameter '{0}' has no gradient; was backward run?")]
    MissingGrad(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// Optimizer state: step counter plus per-parameter first/second moments,
/// allocated lazily to match the store.
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One Adam update over every trainable parameter. Frozen parameters are
    /// untouched; a trainable parameter that backward never reached is an
    /// error, not a silent skip.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<(), OptimError> {
        if self.m.len() < store.len() {
            for (_, p) in store.iter().skip(self.m.len()) {
                self.m.push(Tensor::zeros(p.value.shape()));
                self.v.push(Tensor::zeros(p.value.shape()));
            }
        }
        for (_, p) in store.iter() {
            if p.trainable && !p.grad_seen {
                return Err(OptimError::MissingGrad(p.name.clone()));
            }
        }
        self.t += 1;
        let cfg = self.config;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        let wd = T::from_f64(cfg.weight_decay);
        let bc1 = T::from_f64(1.0 - cfg.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - cfg.beta2.powi(self.t as i32));
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let decay = p.decay_eligible && cfg.weight_decay != 0.0;
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for i in 0..p.value.len() {
                let mut g = p.grad.data()[i];
                if decay {
                    g += wd * p.value.data()[i];
                }
                let mi = b1 * m.data()[i] + (T::one() - b1) * g;
                let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Row-wise softmax with the max-shift, numerically safe for large logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(logits.shape());
    for row in 0..n {
        let r = &logits.data()[row * k..(row + 1) * k];
        let mut mx = T::neg_infinity();
        for &x in r {
            if x > mx {
                mx = x;
            }
        }
        let mut denom = T::zero();
        for j in 0..k {
            let e = (r[j] - mx).exp();
            out.data_mut()[row * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            out.data_mut()[row * k + j] /= denom;
        }
    }
    out
}

/// Mean softmax cross-entropy over a batch. Returns the loss together with
/// the fused gradient (softmax − onehot)/N.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>), OptimError> {
    if logits.rank() != 2 {
        return Err(OptimError::Tensor(TensorError::ShapeMismatch(format!(
            "cross_entropy expects [N,K] logits, got {:?}",
            logits.shape()
        ))));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if n == 0 || labels.is_empty() {
        return Err(OptimError::EmptyBatch);
    }
    if labels.len() != n {
        return Err(OptimError::Tensor(TensorError::ShapeMismatch(format!(
            "{} labels for batch of {n}",
            labels.len()
        ))));
    }
    for &l in labels {
        if l >= k {
            return Err(OptimError::LabelOutOfRange { label: l, k });
        }
    }
    let probs = softmax(logits);
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut loss = T::zero();
    for (row, &label) in labels.iter().enumerate() {
        let r = &logits.data()[row * k..(row + 1) * k];
        let mut mx = T::neg_infinity();
        for &x in r {
            if x > mx {
                mx = x;
            }
        }
        let mut lse = T::zero();
        for &x in r {
            lse += (x - mx).exp();
        }
        loss -= (r[label] - mx - lse.ln()) * inv_n;
    }
    let mut dlogits = probs;
    for (row, &label) in labels.iter().enumerate() {
        dlogits.data_mut()[row * k + label] -= T::one();
    }
    let dlogits = dlogits.scale(inv_n);
    Ok((loss, dlogits))
}

/// Cross-entropy as a tape primitive producing a scalar loss node.
pub fn cross_entropy_op<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
) -> Result<Var, OptimError> {
    let (loss, dlogits) = cross_entropy(tape.value(logits), labels)?;
    let back: BackFn<T> = Box::new(move |ctx| vec![dlogits.scale(ctx.out_grad.item())]);
    Ok(tape.push_custom(Tensor::scalar(loss), &[logits], back))
}

/// Convenience wrapper: fresh Adam state over a model's parameter store.
pub fn adam_step<T: Scalar>(state: &mut AdamState<T>, store: &mut ParamStore<T>) -> Result<(), OptimError> {
    state.step(store)
}
