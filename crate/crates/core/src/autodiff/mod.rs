//! Define-by-run reverse-mode differentiation.
//!
//! Every differentiable primitive executed through a [`Var`] appends a node to
//! the [`Tape`]: its output value, the ids of its inputs and a closure mapping
//! the output adjoint to input adjoints. [`Tape::backward`] replays the nodes
//! in reverse exactly once and then clears the tape; any [`Var`] recorded
//! before the clear is stale and rejected afterwards.

mod conv;
mod elementwise;
mod norm;
mod pool;
mod shape;

pub(crate) mod kernels;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

pub use elementwise::Activation;
pub use norm::BatchStats;
pub use pool::{adaptive_bin, half_pixel_taps, Pool};
pub use conv::conv_output_size;

/// Identifies the primitive that produced a node. Used for diagnostics and
/// for the adjoint fault hook exercised by the gradient-check mutation test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    Mean,
    Concat,
    Narrow,
    Reshape,
    Linear,
    Conv2d,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Silu,
    Sigmoid,
    MaxPool,
    AvgPool,
    AdaptiveAvgPool,
    Upsample,
    ChannelDft,
    Bce,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Reshape,
        OpKind::Linear,
        OpKind::Conv2d,
        OpKind::BatchNormTrain,
        OpKind::BatchNormEval,
        OpKind::Relu,
        OpKind::Silu,
        OpKind::Sigmoid,
        OpKind::MaxPool,
        OpKind::AvgPool,
        OpKind::AdaptiveAvgPool,
        OpKind::Upsample,
        OpKind::ChannelDft,
        OpKind::Bce,
    ];

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Reshape => "reshape",
            OpKind::Linear => "linear",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNormTrain => "batch_norm_train",
            OpKind::BatchNormEval => "batch_norm_eval",
            OpKind::Relu => "relu",
            OpKind::Silu => "silu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::MaxPool => "max_pool",
            OpKind::AvgPool => "avg_pool",
            OpKind::AdaptiveAvgPool => "adaptive_avg_pool",
            OpKind::Upsample => "upsample_bilinear",
            OpKind::ChannelDft => "channel_dft",
            OpKind::Bce => "bce_loss",
        }
    }
}

/// Maps the output adjoint to one adjoint per input. `needs[i]` is false when
/// input `i` does not lead to anything requiring a gradient; the closure may
/// return `None` for it.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: OpKind,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    generation: u64,
    check_finite: bool,
    fault: Option<OpKind>,
}

/// Ordered record of executed primitives.
pub struct Tape<T: Scalar = f32> {
    inner: RefCell<TapeInner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a recorded value. Cheap to copy; only valid until the next
/// [`Tape::backward`] or [`Tape::clear`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
    generation: u64,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} gen {})", self.id, self.generation)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                generation: 0,
                check_finite: false,
                fault: None,
            }),
        }
    }

    /// When enabled, every recorded output is scanned and a NaN/Inf aborts the
    /// op with [`TensorError::NonFinite`].
    pub fn set_check_finite(&self, on: bool) {
        self.inner.borrow_mut().check_finite = on;
    }

    /// Corrupts the adjoint of every node of `kind` by a relative 1e-2. Only
    /// meant for verifying that gradient checks catch broken adjoints.
    pub fn inject_adjoint_fault(&self, kind: Option<OpKind>) {
        self.inner.borrow_mut().fault = kind;
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded intermediates and invalidates outstanding vars.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.generation += 1;
    }

    /// Records a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false, None)
    }

    /// Records a leaf whose gradient is collected by [`Tape::backward`].
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true, None)
    }

    /// Records a model parameter; its gradient is reported under `id`.
    pub fn param(&self, id: ParamId, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true, Some(id))
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op: OpKind::Leaf,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            param,
        });
        Var { tape: self, id, generation: inner.generation }
    }

    /// Appends the output of a primitive. The backward closure is dropped
    /// immediately when no input requires a gradient.
    pub(crate) fn record(
        &self,
        op: OpKind,
        inputs: &[Var<'_, T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var<'_, T>> {
        let mut inner = self.inner.borrow_mut();
        for v in inputs {
            if !std::ptr::eq(v.tape, self) {
                return Err(TensorError::State("var belongs to a different tape".into()));
            }
            if v.generation != inner.generation {
                return Err(TensorError::State(format!(
                    "var #{} was recorded before the tape was cleared",
                    v.id
                )));
            }
        }
        if inner.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| inner.nodes[v.id].requires_grad);
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Ok(Var { tape: self, id, generation: inner.generation })
    }

    /// Runs reverse accumulation from the scalar `loss`, returns gradients of
    /// every reachable leaf that requires one, and clears the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let mut inner = self.inner.borrow_mut();
        if !std::ptr::eq(loss.tape, self) || loss.generation != inner.generation {
            return Err(TensorError::State(
                "backward on a var from a cleared tape; re-record the forward pass".into(),
            ));
        }
        let loss_value = &inner.nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let fault = inner.fault;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));

        let mut leaves = BTreeMap::new();
        let mut params = BTreeMap::new();
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                if let Some(pid) = node.param {
                    accumulate(&mut params, pid, grad.clone());
                }
                leaves.insert(id, grad);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| inner.nodes[i].requires_grad).collect();
            let mut input_grads = backward(&grad, &needs);
            if fault == Some(node.op) {
                if let Some(Some(g)) = input_grads.iter_mut().find(|g| g.is_some()) {
                    *g = g.scale(T::of(1.01));
                }
            }
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        let generation = inner.generation;
        inner.nodes.clear();
        inner.generation += 1;
        Ok(Gradients { generation, leaves, params })
    }

    /// [`Tape::backward`] followed by accumulating parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var<'_, T>, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for (&id, g) in &grads.params {
            store.accumulate_grad(id, g)?;
        }
        Ok(grads)
    }
}

fn accumulate<T: Scalar>(map: &mut BTreeMap<ParamId, Tensor<T>>, id: ParamId, g: Tensor<T>) {
    match map.get_mut(&id) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(id, g);
        }
    }
}

/// Result of one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    generation: u64,
    leaves: BTreeMap<usize, Tensor<T>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf recorded in the pass that produced these gradients.
    pub fn wrt(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        if var.generation != self.generation {
            return None;
        }
        self.leaves.get(&var.id)
    }

    /// Gradient of a parameter, summed over every use.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Shared handle to the forward value.
    ///
    /// Panics if the tape was cleared since this var was recorded.
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.try_value().expect("value() on a stale var")
    }

    pub fn try_value(&self) -> Result<Rc<Tensor<T>>> {
        let inner = self.tape.inner.borrow();
        if self.generation != inner.generation {
            return Err(TensorError::State(format!(
                "var #{} was recorded before the tape was cleared",
                self.id
            )));
        }
        Ok(Rc::clone(&inner.nodes[self.id].value))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        let inner = self.tape.inner.borrow();
        inner.generation == self.generation && inner.nodes[self.id].requires_grad
    }

    pub(crate) fn record(
        &self,
        op: OpKind,
        inputs: &[Var<'t, T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var<'t, T>> {
        self.tape.record(op, inputs, value, backward)
    }
}
