//! Dense f32 tensors with a reverse-mode gradient tape.
//!
//! A [`Tensor`] is an immutable row-major array. Tensors created through
//! [`Tape::leaf`], or produced by an operation that consumed at least one
//! taped tensor, carry a reference to the tape. Operations on purely constant
//! tensors record nothing.
//!
//! The tape is consumed by [`Tape::backward`]: a second call on the same tape
//! returns [`TensorError::TapeConsumed`].
//!
//! ```
//! use vecmorph::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap());
//! let loss = x.mul(&x).unwrap().sum();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.wrt(&x), vec![2.0, 4.0]);
//! ```

pub mod checkpoint;
mod ops;

pub use ops::broadcast_shapes;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor is not recorded on any tape")]
    NoTape,
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Backward closure: receives the output gradient and a mask of which inputs
/// need gradients, returns one optional gradient per input.
pub(crate) type BackwardFn = Box<dyn FnOnce(&[f32], &[bool]) -> Vec<Option<Vec<f32>>>>;

struct Node {
    numel: usize,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

struct TapeInner {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Records operations for one backward pass. Confined to a single thread.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("id", &inner.id)
            .field("nodes", &inner.nodes.len())
            .field("consumed", &inner.consumed)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a copy of `t` as a gradient-requiring leaf on this tape.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(Node {
            numel: t.numel(),
            parents: Vec::new(),
            backward: None,
        });
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            var: Some(Var {
                tape: self.clone(),
                id,
            }),
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// Runs the reverse sweep from a scalar loss and consumes the tape.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let var = loss.var.as_ref().ok_or(TensorError::NoTape)?;
        if var.tape.id() != self.id() {
            return Err(TensorError::NoTape);
        }
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar(loss.shape.clone()));
        }
        let (tape_id, mut nodes) = {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(TensorError::TapeConsumed);
            }
            inner.consumed = true;
            (inner.id, std::mem::take(&mut inner.nodes))
        };

        let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        grads[var.id] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for i in (0..nodes.len()).rev() {
            let node = &mut nodes[i];
            let Some(backward) = node.backward.take() else {
                // Leaf: its gradient is complete, every consumer has a larger id.
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.numel]);
                leaves.insert(i, g);
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(p), Some(pg)) = (parent, pg) else {
                    continue;
                };
                match &mut grads[*p] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&pg) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            tape_id,
            grads: leaves,
        })
    }
}

#[derive(Clone)]
struct Var {
    tape: Tape,
    id: usize,
}

/// Gradients of the loss with respect to every leaf of a consumed tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape_id: u64,
    grads: HashMap<usize, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        let var = t.var.as_ref()?;
        if var.tape.id() != self.tape_id {
            return None;
        }
        self.grads.get(&var.id).map(Vec::as_slice)
    }

    /// Gradient for `t`, zeros when `t` is not a leaf of this tape.
    pub fn wrt(&self, t: &Tensor) -> Vec<f32> {
        self.get(t)
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

/// Row-major f32 array, optionally recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    var: Option<Var>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad());
        if self.numel() <= 16 {
            s.field("data", &self.data);
        }
        s.finish()
    }
}

impl Tensor {
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self::constant(shape.to_vec(), data))
    }

    /// Wraps shared storage without copying.
    pub fn from_arc(data: Arc<Vec<f32>>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "from_arc",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            var: None,
        })
    }

    pub fn shared_data(&self) -> Arc<Vec<f32>> {
        self.data.clone()
    }

    pub(crate) fn constant(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
            var: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::constant(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::constant(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.var.is_some()
    }

    /// Same values, no tape reference.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            var: None,
        }
    }

    fn tape_of(inputs: &[&Tensor]) -> Option<Tape> {
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some(v) = &t.var {
                match tape {
                    None => tape = Some(&v.tape),
                    Some(existing) => assert!(
                        Rc::ptr_eq(&existing.inner, &v.tape.inner),
                        "operands recorded on different tapes"
                    ),
                }
            }
        }
        tape.cloned()
    }

    /// Builds the output of an operation, recording a tape node when any input
    /// is taped. `backward` is only kept (and later invoked) in that case.
    pub(crate) fn record<F>(
        inputs: &[&Tensor],
        shape: Vec<usize>,
        data: Vec<f32>,
        backward: F,
    ) -> Tensor
    where
        F: FnOnce(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + 'static,
    {
        let mut out = Tensor::constant(shape, data);
        if let Some(tape) = Self::tape_of(inputs) {
            let parents = inputs
                .iter()
                .map(|t| t.var.as_ref().map(|v| v.id))
                .collect();
            let id = tape.push(Node {
                numel: out.numel(),
                parents,
                backward: Some(Box::new(backward)),
            });
            out.var = Some(Var { tape, id });
        }
        out
    }

    /// Extension point for fused operations defined outside this module.
    ///
    /// `backward` receives the output gradient and a per-input mask and must
    /// return one gradient (of the matching input's length) per input, or
    /// `None` where the mask is false.
    pub fn custom_op<F>(
        inputs: &[&Tensor],
        shape: &[usize],
        data: Vec<f32>,
        backward: F,
    ) -> Result<Tensor>
    where
        F: FnOnce(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + 'static,
    {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "custom_op",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self::record(inputs, shape.to_vec(), data, backward))
    }
}
