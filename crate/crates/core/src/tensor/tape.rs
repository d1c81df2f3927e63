use std::cell::RefCell;
use std::collections::HashMap;

use super::{Result, Tensor, TensorError};

/// Backward rule: receives the output gradient and, per parent, whether that
/// parent needs a gradient. Returns one entry per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Recording of one forward pass. Nodes are appended in evaluation order, so
/// every node's parents precede it and reverse iteration is a valid
/// topological order for backpropagation.
///
/// One tape lives for one training step; drop it (or [`Tape::clear`]) once
/// gradients have been read.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        self.params.get_mut().clear();
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Registers a named parameter as a leaf. Repeated registrations of the
    /// same name within one tape return the same node, so a network applied
    /// twice accumulates into one gradient.
    pub fn param(&self, name: &str, value: &Tensor, trainable: bool) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(name) {
            debug_assert!(
                self.nodes.borrow()[id].value == *value,
                "parameter {name} registered twice with different values"
            );
            return Var { tape: self, id };
        }
        let var = self.leaf(value.clone(), trainable);
        self.params.borrow_mut().insert(name.to_string(), var.id);
        var
    }

    pub fn param_var(&self, name: &str) -> Option<Var<'_>> {
        self.params
            .borrow()
            .get(name)
            .map(|&id| Var { tape: self, id })
    }

    /// Appends an operation. The backward rule is dropped (and the output
    /// treated as a constant) when no parent requires a gradient.
    pub fn record<'t>(
        &'t self,
        op: &'static str,
        parents: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        debug_assert!(parents.iter().all(|p| std::ptr::eq(p.tape, self)));
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let id = self.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Var { tape: self, id }
    }

    /// Operation names in recording order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    /// Reverse-mode sweep from a scalar loss. Each node is visited at most
    /// once, in reverse recording order.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let g = Tensor::from_parts(node.value.shape().to_vec(), g);
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "op {}", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(pg.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg.into_vec()),
                }
            }
            grads[id] = Some(g.into_vec());
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

/// Result of [`Tape::backward`]: gradients for every node that requires one
/// and was reached from the loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient wrt `var`, zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .get(name)
            .and_then(|&id| self.grads.get(id))
            .and_then(|g| g.as_ref())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}
