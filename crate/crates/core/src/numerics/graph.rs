//! Reverse-mode differentiation over a recorded operation graph.
//!
//! Every operation evaluates eagerly and, when the graph is recording and at
//! least one input needs a gradient, stores a closure mapping the output
//! gradient to input gradients. Nodes are appended in evaluation order, so a
//! reverse sweep over the arena is a valid topological order.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Error, Result};

use super::param::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>>>;

struct Node<S> {
    value: Rc<Tensor<S>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
}

pub struct Graph<'p, S: Scalar> {
    store: Option<&'p ParamStore<S>>,
    record: bool,
    nodes: RefCell<Vec<Node<S>>>,
    param_vars: RefCell<HashMap<String, Var>>,
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// A recording graph whose parameters come from `store`.
    pub fn new(store: &'p ParamStore<S>) -> Self {
        Self::build(Some(store), true)
    }

    /// A forward-only graph: nothing is retained for differentiation.
    pub fn inference(store: &'p ParamStore<S>) -> Self {
        Self::build(Some(store), false)
    }

    /// A recording graph without parameters; inputs enter via [`Graph::leaf`].
    pub fn standalone() -> Graph<'static, S> {
        Graph::build(None, true)
    }

    fn build(store: Option<&'p ParamStore<S>>, record: bool) -> Self {
        Self {
            store,
            record,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn store(&self) -> Option<&'p ParamStore<S>> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<S>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: requires_grad && self.record,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Leaf for a named parameter. Repeated lookups return the same handle so
    /// gradients from every use accumulate in one place.
    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.param_vars.borrow().get(name) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::Config(format!("graph has no parameter store (wanted {name})")))?;
        let p = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let v = self.leaf(p.value.clone(), !p.frozen);
        self.param_vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation output. `backward` receives the output gradient
    /// and a flag per parent saying whether that parent wants a gradient.
    pub(crate) fn push_op(
        &self,
        value: Tensor<S>,
        parents: &[Var],
        backward: impl Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>> + 'static,
    ) -> Var {
        let track = self.record && parents.iter().any(|p| self.requires_grad(*p));
        if !track {
            return self.leaf(value, false);
        }
        self.push(Node {
            value: Rc::new(value),
            requires_grad: true,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: Some(Box::new(backward)),
        })
    }

    /// Accumulates d(loss)/d(node) for every node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::dim("backward", root.value.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let pgrads = backward(&g, &needs);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(pgrads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign_t(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let params = self
            .param_vars
            .borrow()
            .iter()
            .filter_map(|(name, v)| grads[v.0].clone().map(|g| (name.clone(), g)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf (parameter, input or constant). `None` when the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.params
    }

    pub fn global_norm(&self) -> S {
        self.params
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| v * v)
            .sum::<S>()
            .sqrt()
    }
}
