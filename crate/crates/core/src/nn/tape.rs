//! Reverse-mode differentiation over a Wengert list. Each recorded op pushes
//! a value node plus a backward closure; `backward` walks the list once in
//! reverse, accumulating gradients for tape variables and, through the
//! [`ParamStore`], for parameters. Parameter gradients accumulate additively
//! across backward calls until [`ParamStore::zero_grads`].

use ndarray::Array2;
use thiserror::Error;

use crate::{memtrack, Scalar};

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward called before any forward was recorded")]
    EmptyTape,
    #[error("variable {0} not on this tape")]
    UnknownVar(usize),
    #[error("seed gradient shape {seed:?} does not match value shape {value:?}")]
    SeedShape {
        seed: (usize, usize),
        value: (usize, usize),
    },
    #[error("channel mismatch: op expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors and their gradient accumulators. Vectors (biases,
/// norm affines) are stored as 1×C matrices so everything is an `Array2`.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    grads: Vec<Array2<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        let id = ParamId(self.values.len());
        self.grads.push(Array2::zeros(value.dim()));
        self.values.push(value);
        self.names.push(name.into());
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array2<F> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.grads[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of independent scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(F::zero());
        }
    }
}

pub(crate) type BackFn<F> = Box<dyn Fn(&Array2<F>, &mut BackCtx<'_, F>)>;

pub(crate) struct Node<F: Scalar> {
    pub value: Array2<F>,
    pub back: Option<BackFn<F>>,
}

/// Context handed to backward closures.
pub struct BackCtx<'a, F: Scalar> {
    nodes: &'a [Node<F>],
    grads: &'a mut [Option<Array2<F>>],
    pub store: &'a mut ParamStore<F>,
}

impl<'a, F: Scalar> BackCtx<'a, F> {
    pub fn value(&self, v: VarId) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn add_grad(&mut self, v: VarId, g: Array2<F>) {
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn add_param_grad(&mut self, p: ParamId, g: &Array2<F>) {
        *self.store.grad_mut(p) += g;
    }
}

pub struct Tape<F: Scalar> {
    pub(crate) nodes: Vec<Node<F>>,
    recording: bool,
    tracked_bytes: usize,
}

impl<F: Scalar> Tape<F> {
    /// `recording = false` keeps values (so ops can chain) but skips backward
    /// closures and their saved state; use for inference and benchmarking.
    pub fn new(recording: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            recording,
            tracked_bytes: 0,
        }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<F>) -> VarId {
        self.push(value, None)
    }

    pub(crate) fn push(&mut self, value: Array2<F>, back: Option<BackFn<F>>) -> VarId {
        let bytes = value.len() * std::mem::size_of::<F>();
        memtrack::on_alloc(bytes);
        self.tracked_bytes += bytes;
        let back = if self.recording { back } else { None };
        self.nodes.push(Node { value, back });
        VarId(self.nodes.len() - 1)
    }

    /// Reverse sweep from `root`, seeding with `loss_grad`. Returns one
    /// gradient slot per tape variable (leaves included); parameter gradients
    /// are accumulated into `store`.
    pub fn backward(
        &self,
        root: VarId,
        loss_grad: Array2<F>,
        store: &mut ParamStore<F>,
    ) -> Result<Vec<Option<Array2<F>>>, TapeError> {
        if self.nodes.is_empty() {
            return Err(TapeError::EmptyTape);
        }
        if root.0 >= self.nodes.len() {
            return Err(TapeError::UnknownVar(root.0));
        }
        let value_shape = self.nodes[root.0].value.dim();
        if loss_grad.dim() != value_shape {
            return Err(TapeError::SeedShape {
                seed: loss_grad.dim(),
                value: value_shape,
            });
        }
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(loss_grad);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                let mut ctx = BackCtx {
                    nodes: &self.nodes,
                    grads: &mut grads,
                    store,
                };
                back(&g, &mut ctx);
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }
}

impl<F: Scalar> Drop for Tape<F> {
    fn drop(&mut self) {
        memtrack::on_free(self.tracked_bytes);
    }
}
