use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&Tensor, &mut GradSink<'_>)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Receives gradient contributions for the parents of a node during the
/// backward sweep.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Tensor>],
    requires: &'a [bool],
}

impl GradSink<'_> {
    /// Whether `v` takes part in differentiation.
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn add(&mut self, v: Var, grad: Tensor) {
        if !self.requires[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Accumulate into an existing gradient buffer via a closure, allocating
    /// zeros of `shape` on first touch.
    pub fn add_with(&mut self, v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
        if !self.requires[v.0] {
            return;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        f(slot.as_mut().expect("initialized above").data_mut());
    }
}

/// Reverse-mode tape. One graph records one forward pass.
pub struct Graph<'p> {
    nodes: RefCell<Vec<Node>>,
    params: Option<&'p ParamStore>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: None,
            param_vars: RefCell::new(HashMap::new()),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
            .expect("graph was created without a parameter store")
    }

    fn push(&self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    /// Leaf holding the current value of a stored parameter. Repeated lookups
    /// of one parameter return the same node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow().get(&id) {
            return *v;
        }
        let store = self.params();
        let v = self.leaf(store.get(id).clone(), store.is_trainable(id));
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an operation with a hand-written backward rule. The closure
    /// receives the gradient of the output and pushes contributions for any
    /// of `parents` through the sink. It is dropped when no parent needs a
    /// gradient.
    pub fn custom<F>(&self, parents: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&Tensor, &mut GradSink<'_>) + 'static,
    {
        let requires = parents.iter().any(|p| self.requires_grad(*p));
        if requires {
            self.push(value, true, Some(Box::new(backward)))
        } else {
            self.push(value, false, None)
        }
    }

    /// Back-propagates from a scalar output. Nodes recorded after `output`
    /// are ignored.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.0].value.len(),
            1,
            "backward expects a scalar output"
        );
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if requires[output.0] {
            grads[output.0] = Some(Tensor::full(nodes[output.0].value.shape(), 1.0));
        }
        for i in (0..=output.0).rev() {
            let Some(backward) = &nodes[i].backward else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let mut sink = GradSink {
                grads: &mut grads,
                requires: &requires,
            };
            backward(&g, &mut sink);
        }
        Gradients {
            grads,
            param_vars: self.param_vars.borrow().clone(),
        }
    }
}

/// Gradients produced by [`Graph::backward`], retained for leaf nodes.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a stored parameter, when it was used and trainable.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars.get(&id).and_then(|v| self.get(*v))
    }

    /// Gradients aligned with the store, zero-filled for unused parameters.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}
