//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] records every operation applied to [`Tensor`] handles in a
//! flat tape. Nodes are appended in topological order, so a single reverse
//! sweep in [`Graph::backward`] visits them in a valid order. All values are
//! `f64`; the engine is deliberately single-threaded and allocation-order
//! deterministic so that repeated runs are bit-identical.

use ndarray::ArrayD;

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the graph
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

/// Backward rule: given the gradient flowing into this node, the parent
/// values and the node's own output value, produce one gradient contribution
/// per parent (or `None` for parents that do not need one).
pub(crate) type BackwardFn =
    Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>], &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

pub(crate) struct Node {
    pub value: ArrayD<f64>,
    pub parents: Vec<usize>,
    pub requires_grad: bool,
    pub backward: Option<BackwardFn>,
}

/// A tape of operations with stored intermediate values.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Tensor`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, if `t` required one.
    pub fn wrt(&self, t: Tensor) -> Option<&ArrayD<f64>> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::wrt`] but panics with a clear message when absent.
    pub fn expect_wrt(&self, t: Tensor) -> &ArrayD<f64> {
        self.wrt(t).expect("no gradient recorded for tensor")
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a value that does not require gradients.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Tensor {
        self.push(Node {
            value,
            parents: Vec::new(),
            requires_grad: false,
            backward: None,
        })
    }

    /// Insert a value that requires gradients (a trainable leaf).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Tensor {
        self.push(Node {
            value,
            parents: Vec::new(),
            requires_grad: true,
            backward: None,
        })
    }

    /// Value stored at `t`.
    pub fn value(&self, t: Tensor) -> &ArrayD<f64> {
        &self.nodes[t.0].value
    }

    pub(crate) fn push(&mut self, node: Node) -> Tensor {
        self.nodes.push(node);
        Tensor(self.nodes.len() - 1)
    }

    /// Record an op. `requires_grad` is inherited from the parents.
    pub(crate) fn op(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node {
            value,
            parents: parents.into_iter().map(|t| t.0).collect(),
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        })
    }

    /// Reverse sweep from `loss` (which must be a scalar, i.e. zero-dim or
    /// single-element). Returns gradients for every node that required them.
    pub fn backward(&self, loss: Tensor) -> Gradients {
        let loss_node = &self.nodes[loss.0];
        assert!(
            loss_node.value.len() == 1,
            "backward requires a scalar loss, got shape {:?}",
            loss_node.value.shape()
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::ones(loss_node.value.raw_dim()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            if let Some(backward) = &node.backward {
                let parent_values: Vec<&ArrayD<f64>> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let contributions = backward(&grad_out, &parent_values, &node.value);
                debug_assert_eq!(contributions.len(), node.parents.len());
                for (&p, contribution) in node.parents.iter().zip(contributions) {
                    let Some(c) = contribution else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(
                        c.shape(),
                        self.nodes[p].value.shape(),
                        "gradient shape mismatch for parent node {p}"
                    );
                    match &mut grads[p] {
                        Some(acc) => *acc += &c,
                        slot => *slot = Some(c),
                    }
                }
            }
            grads[i] = Some(grad_out);
        }
        Gradients { grads }
    }
}
