use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation. Receives the upstream gradient
/// of the operation's output and accumulates into its inputs.
pub type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>, &mut GradSink<'_, T>)>;

struct Node<T> {
    op: &'static str,
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Per-operation cost record, collected when tracing is enabled.
#[derive(Clone, Debug, PartialEq)]
pub struct CostEntry {
    pub scope: String,
    pub op: &'static str,
    /// Multiply-accumulate count.
    pub macs: u64,
    /// Elements of freshly allocated activation storage.
    pub activation_elems: u64,
}

/// Operation cost as reported by an op to [`Tape::emit`].
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Cost {
    pub macs: u64,
    pub allocates: bool,
}

impl Cost {
    pub const MOVE: Cost = Cost {
        macs: 0,
        allocates: true,
    };
    pub const VIEW: Cost = Cost {
        macs: 0,
        allocates: false,
    };
    pub fn macs(macs: usize) -> Cost {
        Cost {
            macs: macs as u64,
            allocates: true,
        }
    }
}

/// Forward result of an op: output values plus an optional backward rule.
pub(crate) type Forward<T> = (Vec<T>, Option<BackwardFn<T>>);

/// Wengert list of executed operations.
///
/// Nodes are appended in execution order, so every operation's inputs
/// precede it and a reverse sweep visits them in a valid order. A tape in
/// shape-only mode records shapes and costs without computing values; it is
/// used by the cost model.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    shape_only: bool,
    trace: Option<Vec<CostEntry>>,
    scopes: Vec<String>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            shape_only: false,
            trace: None,
            scopes: Vec::new(),
        }
    }

    /// A tape that records shapes and per-op costs but computes nothing.
    pub fn shape_only() -> Self {
        Self {
            shape_only: true,
            trace: Some(Vec::new()),
            ..Self::new()
        }
    }

    /// Enables cost tracing on a computing tape.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn costs(&self) -> &[CostEntry] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scopes.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scopes.pop();
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            shape,
            value,
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        let value = if self.shape_only { Vec::new() } else { t.data().to_vec() };
        self.push_leaf(t.shape().to_vec(), value, false)
    }

    /// Records an input that gradients are requested for.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let value = if self.shape_only { Vec::new() } else { t.data().to_vec() };
        self.push_leaf(t.shape().to_vec(), value, true)
    }

    /// Shape-only stand-in for an input.
    pub fn placeholder(&mut self, shape: &[usize], requires_grad: bool) -> Var {
        let value = if self.shape_only {
            Vec::new()
        } else {
            vec![T::zero(); shape.iter().product()]
        };
        self.push_leaf(shape.to_vec(), value, requires_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_parts_unchecked(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Appends an operation. `forward` is skipped in shape-only mode; the
    /// backward rule is dropped when no input requires a gradient.
    pub(crate) fn emit<F>(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        shape: Vec<usize>,
        cost: Cost,
        forward: F,
    ) -> Result<Var>
    where
        F: FnOnce(&Self) -> Result<Forward<T>>,
    {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if let Some(trace) = self.trace.as_mut() {
            trace.push(CostEntry {
                scope: self.scopes.join("/"),
                op,
                macs: cost.macs,
                activation_elems: if cost.allocates {
                    shape.iter().product::<usize>() as u64
                } else {
                    0
                },
            });
        }
        if self.shape_only {
            self.nodes.push(Node {
                op,
                shape,
                value: Vec::new(),
                requires_grad,
                backward: None,
            });
            return Ok(Var(self.nodes.len() - 1));
        }
        let (value, backward) = forward(self)?;
        debug_assert_eq!(value.len(), shape.iter().product::<usize>(), "{op}");
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a single-element output. Returns gradients for
    /// every leaf that requires one.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.shape_only {
            return Err(Error::shape("backward", "shape-only tape has no values"));
        }
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must hold one element, shape {:?}", out.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackCtx {
                nodes: &self.nodes,
                out: i,
                grad: &g,
            };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            backward(&ctx, &mut sink);
        }
        // Only leaves keep their buffers at this point.
        Ok(Gradients { grads })
    }
}

/// Read access for a backward rule.
pub struct BackCtx<'a, T> {
    nodes: &'a [Node<T>],
    out: usize,
    grad: &'a [T],
}

impl<'a, T> BackCtx<'a, T> {
    /// Upstream gradient w.r.t. this op's output.
    pub fn grad(&self) -> &'a [T] {
        self.grad
    }

    /// This op's forward output.
    pub fn output(&self) -> &'a [T] {
        &self.nodes[self.out].value
    }

    pub fn value(&self, v: Var) -> &'a [T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &'a [usize] {
        &self.nodes[v.0].shape
    }
}

/// Gradient accumulator handed to backward rules.
pub struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Zero-initialised (on first use) accumulation buffer for `v`.
    pub fn slot(&mut self, v: Var) -> &mut [T] {
        let n = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Adds `g` into the gradient of `v`.
    pub fn add(&mut self, v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf, or `None` when it did not influence the output.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a leaf, zeros when it did not influence the output.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape<T>) -> Tensor<T> {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::from_parts_unchecked(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}
