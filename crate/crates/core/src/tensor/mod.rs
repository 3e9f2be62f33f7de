//! Dense f64 tensors with dynamic reverse-mode differentiation.
//!
//! Every tensor is an immutable node. Ops that touch a tensor with
//! `requires_grad` record their parents and a local gradient closure; the
//! node ids are handed out in execution order, so the reverse of that order
//! is a valid topological order for the backward sweep.

mod conv;
mod gradcheck;
mod ops;
mod shape;
pub mod vct;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub use conv::Conv2dSpec;
pub use gradcheck::{gradcheck, gradcheck_coords};
pub use ops::{elementwise, ElementwiseOp};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any ops on the tape.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Local gradient rule: receives the output gradient and the output value,
/// returns one optional gradient per parent (same length as the parent).
pub type BackwardFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    op: &'static str,
    parents: Vec<Tensor>,
    apply: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.grad_fn.as_ref().map(|g| g.op).unwrap_or("leaf");
        write!(f, "Tensor[{:?}, {op}", self.0.shape)?;
        if self.numel() <= 8 {
            write!(f, ", {:?}", self.0.data)?;
        }
        write!(f, "]")
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn: None,
        }))
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape("new", format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self::new(data, shape)?.requires_grad())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::leaf(vec![value; numel_of(shape)], shape.to_vec(), false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], vec![], false)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::leaf(data, vec![n, n], false)
    }

    /// Same values as a fresh leaf that participates in differentiation.
    pub fn requires_grad(self) -> Self {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), true)
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    /// Builds the result of a custom op. The gradient rule is only kept when
    /// recording is enabled and some parent requires a gradient.
    pub fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len(), "{op}: data/shape mismatch");
        if cfg!(debug_assertions) && data.iter().any(|v| v.is_nan()) && parents.iter().all(|p| !p.has_nan()) {
            panic!("{op} produced NaN from NaN-free inputs");
        }
        let track = is_grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        let grad_fn = track.then(|| GradFn {
            op,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            apply: Box::new(backward),
        });
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad: track,
            grad: RefCell::new(None),
            grad_fn,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn has_nan(&self) -> bool {
        self.0.data.iter().any(|v| v.is_nan())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        self.0.grad.borrow_mut().take();
    }

    /// Reverse sweep from a scalar loss, accumulating into every reachable
    /// leaf that requires a gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        let tape = Tape::reachable_from(self);
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in tape.nodes.iter() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(gf) => {
                    let parent_grads = (gf.apply)(&g, &node.0.data);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.op);
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.0.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{} grad length", gf.op);
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

/// The recorded ops reachable from a root, in reverse execution order.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    pub fn reachable_from(root: &Tensor) -> Self {
        let mut seen = HashSet::new();
        let mut stack = vec![root.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.0.requires_grad || !seen.insert(t.id()) {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                stack.extend(gf.parents.iter().cloned());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|n| std::cmp::Reverse(n.id()));
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in the order the backward sweep visits them.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.0.grad_fn.as_ref().map(|g| g.op).unwrap_or("leaf")).collect()
    }
}

impl Drop for Node {
    // Long op chains would otherwise drop recursively through `parents`.
    fn drop(&mut self) {
        let Some(gf) = self.grad_fn.take() else { return };
        let mut pending = gf.parents;
        drop(gf.apply);
        while let Some(t) = pending.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                if let Some(gf) = node.grad_fn.take() {
                    pending.extend(gf.parents);
                }
            }
        }
    }
}
