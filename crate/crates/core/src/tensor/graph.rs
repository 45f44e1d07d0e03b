use std::cell::RefCell;
use std::collections::HashMap;

use super::{Element, ParamId, ParamStore, Tensor};

/// Reverse rule of one recorded op: given the output gradient and which
/// parents need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Tape for one forward/backward pass. Nodes are appended in evaluation
/// order, which is therefore a topological order.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<ParamId, usize>>,
    stat_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
    grad_enabled: bool,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Element> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            stat_updates: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward rules (inference).
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

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Leaf that accumulates a gradient.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, self.grad_enabled)
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Binds a stored parameter as a gradient-tracking leaf. Binding the same
    /// parameter twice returns the same node, so its gradient is the sum
    /// over every use.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.requires_grad && self.grad_enabled);
        self.bound.borrow_mut().insert(id, v.id);
        v
    }

    /// Records an op. `backward` is dropped unused when no parent needs a
    /// gradient.
    pub(crate) fn push(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: impl FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| nodes[p.id].requires_grad);
        let node = if requires_grad {
            Node {
                value,
                requires_grad,
                parents: parents.iter().map(|p| p.id).collect(),
                backward: Some(Box::new(backward)),
            }
        } else {
            Node {
                value,
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }
        };
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Queues a new value for a non-trainable buffer (batch-norm running
    /// statistics); applied by [`ParamStore::apply_stat_updates`].
    pub fn record_stat(&self, id: ParamId, value: Tensor<T>) {
        self.stat_updates.borrow_mut().push((id, value));
    }

    pub fn take_stat_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }

    /// Reverse sweep from a scalar `loss`. Consumes the recorded backward
    /// rules, so a graph can be differentiated once.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        assert!(
            std::ptr::eq(loss.graph, self),
            "loss belongs to a different graph"
        );
        let mut nodes = self.nodes.borrow_mut();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            let Some(back) = node.backward.take() else {
                grads[id] = Some(g);
                continue;
            };
            let parents = node.parents.clone();
            let needs: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = back(&g, &needs);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for ((&p, pg), need) in parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.numel(), "grad size for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
            // Interior gradients are not needed once propagated.
            grads[id] = None;
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients {
            grads,
            shapes,
            bound: self.bound.borrow().clone(),
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    bound: HashMap<ParamId, usize>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.id].clone(), g.clone()))
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let node = *self.bound.get(&id)?;
        self.grads[node]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[node].clone(), g.clone()))
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.bound.keys().copied()
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn value(&self) -> Tensor<T> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.numel(), 1, "item() on non-scalar {:?}", v.shape());
        v.data()[0]
    }
}
