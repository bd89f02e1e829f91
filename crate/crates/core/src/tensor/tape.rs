use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};

/// Maps the upstream gradient of a node to one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Ordered record of executed differentiable ops.
///
/// Nodes are appended in execution order, so replaying indices in reverse is a
/// valid topological order for the backward sweep.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    param_leaves: RefCell<HashMap<ParamId, usize>>,
    stat_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            param_leaves: RefCell::new(HashMap::new()),
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    /// A tape that records values but no backward closures.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// Differentiable input whose gradient can be read back from [`Grads`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled,
            param: None,
        })
    }

    /// Leaf bound to a parameter; repeated calls for the same id share one node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.param_leaves.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let p = store.get(id);
        let var = self.push_node(Node {
            value: Rc::new(p.value.clone()),
            parents: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled && p.kind == ParamKind::Trainable,
            param: Some(id),
        });
        self.param_leaves.borrow_mut().insert(id, var.id);
        var
    }

    pub(crate) fn push_op<F>(&self, value: Rc<Tensor<T>>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        debug_assert!(parents.iter().all(|p| std::ptr::eq(p.tape, self)));
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        self.push_node(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            param: None,
        })
    }

    /// Records a user-defined op. `backward` receives the gradient of the
    /// output and returns one optional gradient per parent, each shaped like
    /// that parent.
    pub fn custom_op<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Result<Var<'_, T>>
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if parents.iter().any(|p| !std::ptr::eq(p.tape, self)) {
            return Err(Error::ForeignVar);
        }
        let shapes: Vec<Vec<usize>> = parents.iter().map(|p| p.shape()).collect();
        let n = parents.len();
        Ok(self.push_op(Rc::new(value), parents, move |g| {
            let grads = backward(g);
            assert_eq!(grads.len(), n, "custom_op: backward returned the wrong number of gradients");
            for (gr, s) in grads.iter().zip(&shapes) {
                if let Some(gr) = gr {
                    assert_eq!(gr.shape(), s.as_slice(), "custom_op: gradient shape mismatch");
                }
            }
            grads
        }))
    }

    /// Queue a buffer replacement (batch-norm running statistics) to be applied
    /// after the step with [`ParamStore::apply_updates`].
    pub(crate) fn record_stat_update(&self, id: ParamId, value: Tensor<T>) {
        self.stat_updates.borrow_mut().push((id, value));
    }

    pub fn take_stat_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }

    /// Reverse sweep from a scalar loss. Returns the gradients of every leaf.
    pub fn gradients(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::ForeignVar);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&upstream);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "grad shape for node {pid}");
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        let params = nodes[..=loss.id]
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Grads {
            by_node: grads,
            params,
        })
    }

    /// Reverse sweep that also accumulates (`+=`) into the parameter store.
    pub fn backward(&self, loss: Var<'_, T>, store: &mut ParamStore<T>) -> Result<Grads<T>> {
        let grads = self.gradients(loss)?;
        grads.accumulate_into(store);
        Ok(grads)
    }
}

/// Leaf gradients from one backward sweep.
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(_, p)| *p == id)
            .and_then(|(node, _)| self.by_node[*node].as_ref())
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.by_node[node] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
