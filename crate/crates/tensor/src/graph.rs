use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Backward rule of a recorded op: `(inputs, output, output_grad) -> input grads`.
///
/// Rules are written in terms of other graph ops, so the gradients they
/// produce are themselves differentiable when the graph is built with
/// [`Graph::grad_with_graph`].
pub type Backward = dyn for<'g> Fn(&[Var<'g>], Var<'g>, Var<'g>) -> Vec<Option<Var<'g>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<Rc<Backward>>,
}

/// An append-only tape of tensor values and the ops that produced them.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    no_grad: Cell<bool>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
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

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), no_grad: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node { value: Rc::new(value), requires_grad: false, inputs: Vec::new(), backward: None })
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// A leaf that gradients flow into.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: !self.no_grad.get(),
            inputs: Vec::new(),
            backward: None,
        })
    }

    /// Records an op output. The backward rule is dropped when no input
    /// requires a gradient or when recording under [`Graph::no_grad`].
    pub fn record<'g, B>(&'g self, value: Tensor, inputs: &[Var<'g>], backward: B) -> Var<'g>
    where
        B: for<'a> Fn(&[Var<'a>], Var<'a>, Var<'a>) -> Vec<Option<Var<'a>>> + 'static,
    {
        let requires_grad = !self.no_grad.get() && inputs.iter().any(|v| v.requires_grad());
        if !requires_grad {
            return self.constant(value);
        }
        self.push(Node {
            value: Rc::new(value),
            requires_grad: true,
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: Some(Rc::new(backward)),
        })
    }

    /// Runs `f` with recording disabled: every op output is a constant.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.no_grad.replace(true);
        let out = f();
        self.no_grad.set(prev);
        out
    }

    /// Gradients of scalar `y` with respect to `wrt`, as constants.
    ///
    /// Inputs `y` does not depend on get a zero gradient.
    pub fn grad<'g>(&'g self, y: Var<'g>, wrt: &[Var<'g>]) -> Vec<Tensor> {
        self.backward_impl(y, wrt, false)
            .into_iter()
            .zip(wrt)
            .map(|(g, v)| match g {
                Some(g) => (*g.value()).clone(),
                None => Tensor::zeros(v.shape()),
            })
            .collect()
    }

    /// Like [`Graph::grad`] but records the backward pass, so the returned
    /// gradients can be differentiated again.
    pub fn grad_with_graph<'g>(&'g self, y: Var<'g>, wrt: &[Var<'g>]) -> Vec<Var<'g>> {
        self.backward_impl(y, wrt, true)
            .into_iter()
            .zip(wrt)
            .map(|(g, v)| g.unwrap_or_else(|| self.constant(Tensor::zeros(v.shape()))))
            .collect()
    }

    fn backward_impl<'g>(&'g self, y: Var<'g>, wrt: &[Var<'g>], create_graph: bool) -> Vec<Option<Var<'g>>> {
        assert!(std::ptr::eq(y.graph, self), "grad: output belongs to another graph");
        assert_eq!(y.value().len(), 1, "grad: output must be a scalar, got shape {:?}", y.shape());
        let prev = self.no_grad.replace(!create_graph);
        let keep: Vec<usize> = wrt.iter().map(|v| v.id).collect();
        let mut grads: Vec<Option<Var<'g>>> = vec![None; y.id + 1];
        grads[y.id] = Some(self.constant(Tensor::ones(y.shape())));
        for id in (0..=y.id).rev() {
            let Some(gout) = grads[id] else { continue };
            let (rule, inputs) = {
                let nodes = self.nodes.borrow();
                let node = &nodes[id];
                match (&node.backward, node.requires_grad) {
                    (Some(b), true) => (b.clone(), node.inputs.clone()),
                    _ => continue,
                }
            };
            if !keep.contains(&id) {
                grads[id] = None;
            }
            let in_vars: Vec<Var<'g>> = inputs.iter().map(|&i| Var { graph: self, id: i }).collect();
            let gin = rule(&in_vars, Var { graph: self, id }, gout);
            assert_eq!(gin.len(), in_vars.len());
            for (inp, g) in in_vars.iter().zip(gin) {
                let Some(g) = g else { continue };
                if !inp.requires_grad() {
                    continue;
                }
                assert_eq!(g.shape(), inp.shape(), "gradient shape mismatch");
                grads[inp.id] = Some(match grads[inp.id] {
                    Some(acc) => acc.add(g),
                    None => g,
                });
            }
        }
        self.no_grad.set(prev);
        wrt.iter().map(|v| if v.id <= y.id { grads[v.id] } else { None }).collect()
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item: tensor has shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// A constant copy that blocks gradient flow.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }
}
