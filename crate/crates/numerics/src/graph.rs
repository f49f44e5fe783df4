use std::collections::HashMap;

use crate::error::contract_err;
use crate::{ParamId, ParamStore, Real, Result, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Gradient of the loss with respect to `output`.
    pub grad: &'a Tensor<T>,
    /// Whether each input needs a gradient; rules may skip the others.
    pub needs_grad: Vec<bool>,
}

/// Reverse-mode rule of a recorded operation.
///
/// Returns one entry per input, each either `None` (no contribution) or a
/// tensor with the input's shape.
pub trait Backward<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Computation tape.
///
/// Operations append nodes in topological order, so the reverse sweep is a
/// plain walk from the loss node back to the start.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    flops: u64,
    track_params: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: HashMap::new(), flops: 0, track_params: true }
    }

    /// A graph whose parameters do not require gradients; nothing is kept for
    /// the reverse sweep beyond the forward values.
    pub fn inference() -> Self {
        Self { track_params: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations counted by the ops recorded so far
    /// (a multiply-add counts as two).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn add_flops(&mut self, n: u64) {
        self.flops += n;
    }

    /// Constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(Node { value, parents: vec![], op: None, requires_grad: false })
    }

    /// Leaf input whose gradient is retained by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_node(Node { value, parents: vec![], op: None, requires_grad: true })
    }

    /// Leaf bound to a parameter; repeated calls return the same variable, so
    /// weights used twice (e.g. a siamese branch) share one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let requires_grad = self.track_params;
        let v = self.push_node(Node {
            value: store.value(id).clone(),
            parents: vec![],
            op: None,
            requires_grad,
        });
        self.param_vars.insert(id, v);
        v
    }

    fn push_node(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Records the result of an operation. The backward rule is dropped when
    /// no parent requires a gradient.
    pub fn record(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        op: impl Backward<T> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.push_node(Node { value, parents: parents.to_vec(), op, requires_grad })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a scalar `loss`. Gradients of leaves are retained.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(contract_err!(
                "gradient root must be a scalar, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let needs_grad: Vec<bool> =
                node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                grad: &grad,
                needs_grad,
            };
            let parent_grads = op.backward(&ctx)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", op.name());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape(), "{}", op.name());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep that adds each parameter's gradient into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn quadratic_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let sq = ops::mul(&mut g, wv, wv).unwrap();
        let loss = ops::sum(&mut g, sq);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[2.0, 4.0, 6.0]);
        store.zero_grad();
        assert!(store.get(w).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::scalar(2.0));
        let b = store.add("b", Tensor::scalar(5.0));
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let _bv = g.param(&store, b);
        let loss = ops::mul(&mut g, av, av).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(a).grad.data(), &[4.0]);
        assert_eq!(store.get(b).grad.data(), &[0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.gradients(x), Err(crate::NumericsError::Contract(_))));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        assert_eq!(a, b);
        let s = ops::add(&mut g, a, b).unwrap();
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[2.0]);
    }
}
