//! Reverse-mode automatic differentiation over tensor ops.
//!
//! A [`Tape`] records every primitive application in execution order, which is
//! already topological. [`Tape::backward`] walks the record in reverse and
//! produces a gradient per node; [`Tape::accumulate_param_grads`] scatters
//! those into the [`Parameter`] slots they came from. One tape per training
//! step; tapes are dropped after the step.
//!
//! Layer primitives with bespoke backward rules (convolution, batch norm,
//! pooling, the fused loss) are registered through [`Tape::push_custom`] from
//! the modules that own them.

use thiserror::Error;

use crate::tensor::{ReduceOp, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("loss was not recorded on this tape")]
    DetachedLoss,
    #[error("loss must be rank-0, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("function is not deterministic: two evaluations at the same point differ")]
    NondeterministicFunction,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A trainable tensor with its gradient slot and bookkeeping flags.
///
/// `decay_eligible` is set only on convolution and linear weight matrices;
/// batch-norm scale/shift and biases never carry weight decay.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub name: String,
    pub trainable: bool,
    pub decay_eligible: bool,
    /// Set when a backward pass deposited a gradient since the last zeroing.
    pub grad_seen: bool,
}

/// Flat registry of every parameter in a model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        trainable: bool,
        decay_eligible: bool,
    ) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            value,
            grad,
            name: name.into(),
            trainable,
            decay_eligible,
            grad_seen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
            p.grad_seen = false;
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape_id: u64,
    index: usize,
}

/// Everything a backward rule may consult: the upstream gradient, the recorded
/// input values, and the recorded output value.
pub struct BackCtx<'a, T: Scalar> {
    pub out_grad: &'a Tensor<T>,
    pub parents: &'a [&'a Tensor<T>],
    pub value: &'a Tensor<T>,
}

pub type BackFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Tensor<T>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    back: Option<BackFn<T>>,
    param: Option<ParamId>,
}

static NEXT_TAPE_ID: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        let id = NEXT_TAPE_ID.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        Self { id, nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        debug_assert_eq!(v.tape_id, self.id);
        &self.nodes[v.index].value
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<usize>,
        back: Option<BackFn<T>>,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node { value, parents, back, param });
        Var { tape_id: self.id, index: self.nodes.len() - 1 }
    }

    /// Record an externally defined primitive with its backward rule. The rule
    /// must return one gradient per parent, each parent-shaped.
    pub fn push_custom(&mut self, value: Tensor<T>, parents: &[Var], back: BackFn<T>) -> Var {
        let idx: Vec<usize> = parents
            .iter()
            .map(|v| {
                debug_assert_eq!(v.tape_id, self.id, "parent from another tape");
                v.index
            })
            .collect();
        self.push(value, idx, Some(back), None)
    }

    /// Leaf holding a differentiable input that is not a parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, None)
    }

    /// Leaf holding a value we never differentiate with respect to.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, None)
    }

    /// Leaf referencing a registered parameter; backward scatters into its grad.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Vec::new(), None, Some(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add shapes");
        self.push_binary_broadcast(value, a, b, |g, _, _| g.clone(), |g, _, _| g.clone())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b)).expect("sub shapes");
        self.push_binary_broadcast(value, a, b, |g, _, _| g.clone(), |g, _, _| g.scale(-T::one()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).mul(self.value(b)).expect("mul shapes");
        self.push_binary_broadcast(
            value,
            a,
            b,
            |g, _, bv| g.mul(bv).unwrap(),
            |g, av, _| g.mul(av).unwrap(),
        )
    }

    fn push_binary_broadcast(
        &mut self,
        value: Tensor<T>,
        a: Var,
        b: Var,
        da: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static,
        db: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var {
        let back: BackFn<T> = Box::new(move |ctx| {
            let (av, bv) = (ctx.parents[0], ctx.parents[1]);
            let ga = da(ctx.out_grad, av, bv).unbroadcast(av.shape()).unwrap();
            let gb = db(ctx.out_grad, av, bv).unbroadcast(bv.shape()).unwrap();
            vec![ga, gb]
        });
        self.push_custom(value, &[a, b], back)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        // subgradient at exactly 0 is 0
        let back: BackFn<T> = Box::new(|ctx| {
            let xv = ctx.parents[0];
            vec![ctx
                .out_grad
                .binary(xv, |g, x| if x > T::zero() { g } else { T::zero() })
                .unwrap()]
        });
        self.push_custom(value, &[x], back)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).sigmoid();
        let back: BackFn<T> = Box::new(|ctx| {
            vec![ctx
                .out_grad
                .binary(ctx.value, |g, y| g * y * (T::one() - y))
                .unwrap()]
        });
        self.push_custom(value, &[x], back)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        let back: BackFn<T> =
            Box::new(|ctx| vec![ctx.out_grad.mul(ctx.value).unwrap()]);
        self.push_custom(value, &[x], back)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        let back: BackFn<T> = Box::new(|ctx| {
            vec![ctx.out_grad.binary(ctx.parents[0], |g, x| g / x).unwrap()]
        });
        self.push_custom(value, &[x], back)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).scale(s);
        let back: BackFn<T> = Box::new(move |ctx| vec![ctx.out_grad.scale(s)]);
        self.push_custom(value, &[x], back)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        let back: BackFn<T> = Box::new(|ctx| {
            let (av, bv) = (ctx.parents[0], ctx.parents[1]);
            let ga = ctx.out_grad.matmul(&bv.transpose2().unwrap()).unwrap();
            let gb = av.transpose2().unwrap().matmul(ctx.out_grad).unwrap();
            vec![ga, gb]
        });
        self.push_custom(value, &[a, b], back)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).reshape(shape).expect("reshape");
        let back: BackFn<T> = Box::new(|ctx| {
            vec![ctx.out_grad.reshape(ctx.parents[0].shape()).unwrap()]
        });
        self.push_custom(value, &[x], back)
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keep: bool) -> Var {
        self.reduce_linear(x, axes, keep, ReduceOp::Sum)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keep: bool) -> Var {
        self.reduce_linear(x, axes, keep, ReduceOp::Mean)
    }

    fn reduce_linear(&mut self, x: Var, axes: &[usize], keep: bool, op: ReduceOp) -> Var {
        let in_shape = self.value(x).shape().to_vec();
        let value = self.value(x).reduce(op, axes, keep).expect("reduce");
        let axes = axes.to_vec();
        let count: usize = axes.iter().map(|&a| in_shape[a]).product::<usize>().max(1);
        let back: BackFn<T> = Box::new(move |ctx| {
            let in_shape = ctx.parents[0].shape().to_vec();
            let mut kept = in_shape.clone();
            for &a in &axes {
                kept[a] = 1;
            }
            let g = ctx.out_grad.reshape(&kept).unwrap();
            let mut expanded = g.add(&Tensor::zeros(&in_shape)).unwrap();
            if matches!(op, ReduceOp::Mean) {
                expanded = expanded.scale(T::one() / T::from_f64(count as f64));
            }
            vec![expanded]
        });
        self.push_custom(value, &[x], back)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let rank = self.value(x).rank();
        let axes: Vec<usize> = (0..rank).collect();
        self.sum_axes(x, &axes, false)
    }

    /// Reverse sweep from `loss`, producing one gradient per reachable node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>, AutogradError> {
        if loss.tape_id != self.id || loss.index >= self.nodes.len() {
            return Err(AutogradError::DetachedLoss);
        }
        let loss_node = &self.nodes[loss.index];
        if loss_node.value.rank() != 0 {
            return Err(AutogradError::NotScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.back {
                let parent_values: Vec<&Tensor<T>> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let ctx = BackCtx { out_grad: &g, parents: &parent_values, value: &node.value };
                let parent_grads = back(&ctx);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(
                        pg.shape(),
                        self.nodes[p].value.shape(),
                        "backward rule produced wrong-shaped gradient"
                    );
                    grads[p] = Some(match grads[p].take() {
                        Some(acc) => acc.add(&pg)?,
                        None => pg,
                    });
                }
            }
            grads[i] = Some(g);
        }
        Ok(Grads { tape_id: self.id, grads })
    }

    /// Add each parameter node's gradient into its [`Parameter::grad`] slot.
    /// Unreached parameters are left untouched.
    pub fn accumulate_param_grads(
        &self,
        grads: &Grads<T>,
        store: &mut ParamStore<T>,
    ) -> Result<(), AutogradError> {
        assert_eq!(grads.tape_id, self.id, "grads from another tape");
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            let (Some(id), Some(g)) = (node.param, g) else { continue };
            let p = store.get_mut(id);
            p.grad = p.grad.add(g)?;
            p.grad_seen = true;
        }
        Ok(())
    }
}

pub struct Grads<T: Scalar> {
    tape_id: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape_id != self.tape_id {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub coords_checked: usize,
}

/// Relative error convention used by every finite-difference check:
/// |analytic − numeric| / max(1, |numeric|).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn central_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

/// Check a scalar-valued tensor function's tape gradient against central
/// finite differences at `point`. Every coordinate is probed; use
/// [`grad_check_params`] for whole models.
pub fn grad_check<F>(
    f: F,
    point: &Tensor<f64>,
    tolerance: f64,
) -> Result<GradCheckReport, AutogradError>
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let eval = |p: &Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(p.clone());
        let loss = f(&mut tape, x);
        tape.value(loss).item()
    };
    if eval(point) != eval(point) || (eval(point) - eval(point)).abs() > 0.0 {
        return Err(AutogradError::NondeterministicFunction);
    }

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x);
    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut max_rel = 0.0f64;
    for i in 0..point.len() {
        let x0 = point.data()[i];
        let h = central_step(x0);
        let mut plus = point.clone();
        plus.data_mut()[i] = x0 + h;
        let mut minus = point.clone();
        minus.data_mut()[i] = x0 - h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        max_rel = max_rel.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(GradCheckReport { max_rel_err: max_rel, pass: max_rel <= tolerance, coords_checked: point.len() })
}

/// Finite-difference check of a model loss against the tape gradients of every
/// trainable parameter in `store`. At most `samples_per_tensor` coordinates
/// are probed per parameter, chosen by a seeded shuffle, so large models stay
/// affordable.
pub fn grad_check_params<F>(
    build_loss: F,
    store: &mut ParamStore<f64>,
    samples_per_tensor: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, AutogradError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let eval = |store: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::new();
        let loss = build_loss(&mut tape, store);
        tape.value(loss).item()
    };
    let l0 = eval(store);
    if (eval(store) - l0).abs() > 0.0 {
        return Err(AutogradError::NondeterministicFunction);
    }

    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build_loss(&mut tape, store);
    let grads = tape.backward(loss)?;
    tape.accumulate_param_grads(&grads, store)?;
    let analytic: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.grad.clone()).collect();

    let param_ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    // cheap splitmix-style coordinate sampling, deterministic per seed
    let mut sm = seed.wrapping_add(0x9E3779B97F4A7C15);
    let mut next_u64 = move || {
        sm = sm.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = sm;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    };
    for id in param_ids {
        let n = store.get(id).value.len();
        let coords: Vec<usize> = if n <= samples_per_tensor {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = (next_u64() % (i as u64 + 1)) as usize;
                all.swap(i, j);
            }
            all.truncate(samples_per_tensor);
            all
        };
        for c in coords {
            let x0 = store.get(id).value.data()[c];
            let h = central_step(x0);
            store.get_mut(id).value.data_mut()[c] = x0 + h;
            let lp = eval(store);
            store.get_mut(id).value.data_mut()[c] = x0 - h;
            let lm = eval(store);
            store.get_mut(id).value.data_mut()[c] = x0;
            let numeric = (lp - lm) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[id.0].data()[c], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, pass: max_rel <= tolerance, coords_checked: checked })
}
