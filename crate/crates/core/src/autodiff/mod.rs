//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every value produced during a forward pass is a node on a [`Tape`].
//! A node stores its cached value, the ids of its parents, and one
//! vector-Jacobian closure mapping the upstream gradient to a gradient
//! contribution per parent. Because parents always precede children,
//! [`Tape::backward`] is a single sweep in descending id order.
//!
//! Primitive operations live in [`ops`] and [`conv`] as methods on `Tape`;
//! higher layers (quantizers, models) only compose them or register custom
//! closures through [`Tape::record`].

pub mod conv;
pub mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::mat::Mat;

pub use conv::ConvGeom;
pub use ops::solve_spd_vjp;

thread_local! {
    static CORRUPTED_OP: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Test hook: while set, every gradient contribution produced by nodes with
/// this op tag is scaled by 1.5 during [`Tape::backward`] on the current
/// thread. Used to confirm that the gradient-check suite catches a broken
/// rule.
pub fn set_corrupted_op(op: Option<&str>) {
    CORRUPTED_OP.with(|c| *c.borrow_mut() = op.map(str::to_owned));
}

fn is_corrupted(op: &str) -> bool {
    CORRUPTED_OP.with(|c| c.borrow().as_deref() == Some(op))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local gradient rule: given the upstream gradient of the node and a mask of
/// which parents need a gradient, return one contribution per parent
/// (`None` means zero).
pub type Vjp = Box<dyn Fn(&Mat, &[bool]) -> Vec<Option<Mat>>>;

struct Node {
    op: &'static str,
    value: Rc<Mat>,
    parents: Vec<NodeId>,
    vjp: Option<Vjp>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (model parameter or variable under test).
    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push("leaf", value, Vec::new(), None, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push("constant", value, Vec::new(), None, false)
    }

    /// Appends an operation node. `vjp` receives the upstream gradient and
    /// must return exactly one entry per input.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: &[NodeId],
        value: Mat,
        vjp: Vjp,
    ) -> Result<NodeId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::contract(
                    "record",
                    format!("{op}: input node {} is not on the tape", id.0),
                ));
            }
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let vjp = requires_grad.then_some(vjp);
        Ok(self.push(op, value, inputs.to_vec(), vjp, requires_grad))
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Mat,
        parents: Vec<NodeId>,
        vjp: Option<Vjp>,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Rc::new(value),
            parents,
            vjp,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub(crate) fn value_rc(&self, id: NodeId) -> Rc<Mat> {
        Rc::clone(&self.nodes[id.0].value)
    }

    pub fn op(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Reverse sweep from a scalar root. Contributions are accumulated into
    /// each parent in descending child order, which makes the result
    /// independent of anything but the tape itself.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::contract("backward", "root is not on the tape"));
        }
        let shape = self.nodes[root.0].value.shape();
        if shape != (1, 1) {
            return Err(Error::contract(
                "backward",
                format!("root must be 1x1, got {}x{}", shape.0, shape.1),
            ));
        }
        let mut grads: Vec<Option<Mat>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(vjp) = node.vjp.as_ref() else {
                continue;
            };
            let (lower, upper) = grads.split_at_mut(id);
            let Some(upstream) = upper[0].as_ref() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let mut contributions = vjp(upstream, &needs);
            if is_corrupted(node.op) {
                for g in contributions.iter_mut().flatten() {
                    *g = g.scale(1.5);
                }
            }
            debug_assert_eq!(contributions.len(), node.parents.len(), "{}", node.op);
            for ((parent, contribution), need) in
                node.parents.iter().zip(contributions).zip(&needs)
            {
                let Some(g) = contribution else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[parent.0].value.shape(),
                    "gradient shape from {} into {}",
                    node.op,
                    self.nodes[parent.0].op
                );
                match &mut lower[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of a backward sweep. Nodes that are not ancestors of the root
/// report a zero gradient of their own shape.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Mat {
        match self.grads.get(id.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Mat::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Mat {
        match self.grads.get_mut(id.0).and_then(Option::take) {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[id.0];
                Mat::zeros(r, c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_input_is_rejected() {
        let mut tape = Tape::new();
        let err = tape
            .record("bogus", &[NodeId(3)], Mat::scalar(0.0), Box::new(|_, _| vec![None]))
            .unwrap_err();
        assert!(matches!(err, Error::Contract { op: "record", .. }));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_ancestors_get_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::filled(2, 2, 1.0));
        let y = tape.leaf(Mat::filled(3, 1, 5.0));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x), Mat::filled(2, 2, 1.0));
        assert_eq!(g.get(y), Mat::zeros(3, 1));
    }

    #[test]
    fn constants_carry_no_closure() {
        let mut tape = Tape::new();
        let c = tape.constant(Mat::scalar(2.0));
        let d = tape.scale(c, 3.0);
        assert!(!tape.requires_grad(d));
        let g = tape.backward(d).unwrap();
        assert_eq!(g.get(c), Mat::zeros(1, 1));
    }
}
