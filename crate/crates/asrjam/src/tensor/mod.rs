//! A small reverse-mode autodiff engine over dense f64 arrays.
//!
//! Models record their forward pass onto a [`Tape`]; [`Tape::backward`]
//! replays it in reverse and accumulates gradients for every node that
//! requires them. Single-threaded and deterministic: the same graph always
//! produces bit-identical gradients.

pub mod ops;

use ndarray::ArrayD;
use std::cell::RefCell;
use std::rc::Rc;

pub type Arr = ArrayD<f64>;

/// Handle to a node on a tape. Only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn FnOnce(&Arr, &mut Gradients)>;

struct Node {
    value: Rc<Arr>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Gradient accumulation buffer, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Add a contribution to a node's gradient.
    pub fn accumulate(&mut self, id: usize, contribution: Arr) {
        match &mut self.grads[id] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.grads[v.0].take()
    }
}

/// Recording context for one forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that only evaluates forward; every node is treated as
    /// constant and `backward` is unavailable.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// A trainable leaf (gradient will be accumulated for it).
    pub fn leaf(&self, value: Arr) -> Var {
        self.push_node(Rc::new(value), self.grad_enabled, None)
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&self, value: Arr) -> Var {
        self.push_node(Rc::new(value), false, None)
    }

    pub fn constant_rc(&self, value: Rc<Arr>) -> Var {
        self.push_node(value, false, None)
    }

    pub(crate) fn push_node(
        &self,
        value: Rc<Arr>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = requires_grad && self.grad_enabled;
        nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var(nodes.len() - 1)
    }

    /// Shared handle to a node's value.
    pub fn value(&self, v: Var) -> Rc<Arr> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Scalar value of a 0-d or 1-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().expect("scalar node")
    }

    /// Run reverse-mode accumulation from a scalar root. Consumes the
    /// backward closures: a tape can only be differentiated once.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.len();
        let mut grads = Gradients {
            grads: (0..n).map(|_| None).collect(),
        };
        let seed = {
            let nodes = self.nodes.borrow();
            let value = &nodes[root.0].value;
            assert_eq!(value.len(), 1, "backward root must be scalar");
            Arr::ones(value.raw_dim())
        };
        grads.grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let backward = {
                let mut nodes = self.nodes.borrow_mut();
                if grads.grads[id].is_none() {
                    continue;
                }
                nodes[id].backward.take()
            };
            if let Some(f) = backward {
                let g = grads.grads[id].take().expect("grad present");
                f(&g, &mut grads);
                // keep the gradient available for callers (leaves and
                // intermediates alike)
                grads.grads[id] = Some(g);
            }
        }
        grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Named collection of trainable (and stateful) arrays backing a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Arr>,
    pub trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Arr) -> usize {
        self.add_with(name, tensor, true)
    }

    /// Add non-trainable state (e.g. batch-norm running statistics).
    pub fn add_state(&mut self, name: impl Into<String>, tensor: Arr) -> usize {
        self.add_with(name, tensor, false)
    }

    fn add_with(&mut self, name: impl Into<String>, tensor: Arr, trainable: bool) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Put every parameter on a tape as a trainable leaf (constants when the
    /// store is frozen), returning per-parameter vars.
    pub fn leaves(&self, tape: &Tape, frozen: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if frozen {
                    tape.constant(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect()
    }

    /// SHA-256 digest over names, shapes, and exact little-endian bytes of
    /// every tensor; used to prove parameters were not touched.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, tensor) in self.names.iter().zip(&self.tensors) {
            hasher.update(name.as_bytes());
            for d in tensor.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in tensor.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Total number of scalar parameters (trainable only).
    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(a, _)| a.len())
            .sum()
    }
}

/// Stochastic gradient descent with classical momentum. `ascent` flips the
/// update sign (used when maximizing a loss).
pub struct SgdMomentum {
    velocity: Vec<Arr>,
    pub momentum: f64,
    pub ascent: bool,
}

impl SgdMomentum {
    pub fn new(store: &ParamStore, momentum: f64, ascent: bool) -> Self {
        SgdMomentum {
            velocity: store.tensors.iter().map(|t| Arr::zeros(t.raw_dim())).collect(),
            momentum,
            ascent,
        }
    }

    /// Apply one update step given per-parameter gradients (as returned by
    /// `Gradients` for the vars from `ParamStore::leaves`).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Arr>], lr: f64) {
        let sign = if self.ascent { 1.0 } else { -1.0 };
        for i in 0..store.tensors.len() {
            if !store.trainable[i] {
                continue;
            }
            if let Some(g) = &grads[i] {
                let v = &mut self.velocity[i];
                v.zip_mut_with(g, |v, g| *v = self.momentum * *v + g);
                store.tensors[i].zip_mut_with(v, |p, v| *p += sign * lr * v);
            }
        }
    }
}
