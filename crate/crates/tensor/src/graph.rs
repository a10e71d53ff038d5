//! The tape. Every op appends a node holding its value and, when any input
//! requires a gradient, a closure mapping the output gradient to input
//! gradients. Node ids are assigned in creation order, so walking the tape
//! backwards is a valid reverse topological order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use ndarray::ArrayD;

pub type Array = ArrayD<f64>;

/// Maps the output gradient to one optional gradient per parent. The slice
/// tells the closure which parents actually need a gradient so it can skip
/// work for frozen inputs.
pub(crate) type BackwardFn = Box<dyn Fn(&Array, &[bool]) -> Vec<Option<Array>>>;

struct Node {
    value: Arc<Array>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A graph that never records backward closures. Used for inference.
    pub fn no_grad() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grad_enabled: false }
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

    pub fn leaf(&self, value: Array, requires_grad: bool) -> Var<'_> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Adds a leaf without copying the buffer; parameters are shared with
    /// their store this way.
    pub fn leaf_shared(&self, value: Arc<Array>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var { id: nodes.len() - 1, graph: self }
    }

    pub fn constant(&self, value: Array) -> Var<'_> {
        self.leaf(value, false)
    }

    pub(crate) fn push<'g>(&'g self, value: Array, parents: &[Var<'g>], backward: BackwardFn) -> Var<'g> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var { id: nodes.len() - 1, graph: self }
    }

    fn value_of(&self, id: usize) -> Arc<Array> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar. Gradients are retained for leaves
    /// only; intermediate gradients are dropped as soon as they are consumed.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Array>> = (0..=loss.id).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if !nodes[loss.id].requires_grad {
            return Gradients { grads: leaves };
        }
        grads[loss.id] = Some(Array::ones(nodes[loss.id].value.raw_dim()));
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                Some(backward) => {
                    let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let parent_grads = backward(&grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&parent, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[parent].value.shape(), "gradient shape for node {parent}");
                        match &mut grads[parent] {
                            Some(acc) => *acc += &pg,
                            slot => *slot = Some(pg),
                        }
                    }
                }
                None if node.parents.is_empty() && node.requires_grad => {
                    leaves.insert(id, grad);
                }
                None => {}
            }
        }
        Gradients { grads: leaves }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Array>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Array> {
        self.grads.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Array> {
        self.grads.remove(&var.id)
    }
}

/// Handle to a node on a [`Graph`]. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) id: usize,
    pub(crate) graph: &'g Graph,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Array> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.ndim()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.graph.nodes.borrow()[self.id].value.shape()[axis]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    pub(crate) fn same_graph(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }
}
