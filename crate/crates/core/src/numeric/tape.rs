//! Reverse-mode differentiation by operation recording.
//!
//! Every operation appends a node holding its output value, the ids of its
//! inputs and a vector-Jacobian product closure. Node ids are assigned in
//! execution order, so walking ids downward from the loss is a valid reverse
//! topological order and visits every recorded operation at most once.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded operation: given the gradient of
/// the output, the input values and the output value, returns one optional
/// gradient per input (`None` for inputs that receive no gradient).
pub type BackwardFn =
    Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + Send + 'static>;

struct Node {
    op: &'static str,
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        Arc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        self.grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Input value; gradients are kept for it when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            op: "leaf",
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param: None,
        })
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf without copying its values.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let p = &store.params[id.0];
        self.push(Node {
            op: "param",
            value: Arc::clone(&p.value),
            parents: Vec::new(),
            backward: None,
            requires_grad: p.trainable,
            param: Some(id),
        })
    }

    /// Records an operation. The closure is only invoked during backward and
    /// only when at least one input requires a gradient.
    pub fn record<'a>(
        &'a self,
        op: &'static str,
        inputs: &[Var<'a>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var<'a> {
        let requires_grad = inputs.iter().any(Var::requires_grad);
        self.push(Node {
            op,
            value: Arc::new(value),
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        })
    }

    /// Back-propagates from a scalar loss. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`]. Returns the number of operations
    /// replayed.
    pub fn backward(&self, loss: Var<'_>) -> Result<usize> {
        let value = loss.value();
        if value.numel() != 1 {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        self.backward_with_seed(loss, Tensor::full(value.shape(), 1.0))
    }

    /// Back-propagates an arbitrary output cotangent (a vector-Jacobian
    /// product); `seed` must match the output's shape.
    pub fn backward_with_seed(&self, output: Var<'_>, seed: Tensor) -> Result<usize> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.shape() != seed.shape() {
            return Err(Error::shape("backward", out.value.shape(), seed.shape()));
        }
        let mut working: Vec<Option<Tensor>> = (0..=output.id).map(|_| None).collect();
        working[output.id] = Some(seed);
        let mut replayed = 0;
        let mut grads = self.grads.borrow_mut();
        for id in (0..=output.id).rev() {
            let Some(grad) = working[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        match &mut grads[id] {
                            Some(acc) => acc.add_assign(&grad),
                            slot => *slot = Some(grad),
                        }
                    }
                }
                Some(f) => {
                    replayed += 1;
                    let inputs: Vec<&Tensor> =
                        node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
                    let input_grads = f(&grad, &inputs, &node.value);
                    debug_assert_eq!(input_grads.len(), node.parents.len(), "{}", node.op);
                    for (&p, g) in node.parents.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(
                            g.shape(),
                            nodes[p].value.shape(),
                            "gradient shape from {}",
                            node.op
                        );
                        match &mut working[p] {
                            Some(acc) => acc.add_assign(&g),
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(replayed)
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.borrow()[var.id].clone()
    }

    pub fn zero_grad(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }

    /// Gradients accumulated on parameter leaves, summed per parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let nodes = self.nodes.borrow();
        let grads = self.grads.borrow();
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (node, grad) in nodes.iter().zip(grads.iter()) {
            let (Some(pid), Some(g)) = (node.param, grad) else {
                continue;
            };
            match out.iter_mut().find(|(id, _)| *id == pid) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((pid, g.clone())),
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub trainable: bool,
    value: Arc<Tensor>,
    grad: Tensor,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }
}

#[derive(Clone, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    trainable: bool,
    value: Tensor,
}

/// Owns every trainable array of a model together with its gradient buffer.
///
/// Serializes as a list of named arrays; gradients are not persisted.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(from = "Vec<StoredParam>", into = "Vec<StoredParam>")]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl From<Vec<StoredParam>> for ParamStore {
    fn from(stored: Vec<StoredParam>) -> Self {
        let mut store = ParamStore::new();
        for p in stored {
            store.add(p.name, p.value, p.trainable);
        }
        store
    }
}

impl From<ParamStore> for Vec<StoredParam> {
    fn from(store: ParamStore) -> Self {
        store
            .params
            .into_iter()
            .map(|p| StoredParam {
                name: p.name,
                trainable: p.trainable,
                value: Arc::unwrap_or_clone(p.value),
            })
            .collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            trainable,
            value: Arc::new(value),
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access to a parameter's values, copying only if a tape still
    /// holds a reference to them.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the parameter gradients collected on `tape` into the buffers.
    pub fn accumulate_from(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            self.params[id.0].grad.add_assign(&g);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
