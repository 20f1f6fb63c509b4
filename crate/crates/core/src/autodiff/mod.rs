//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! returns the gradient of every node that requires one. Nodes whose inputs
//! are all constants carry no backward closure, so inference costs nothing
//! beyond the forward arithmetic.

mod ops;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Computes the gradients of a node's parents from the upstream gradient.
///
/// Arguments: upstream gradient, parent values, output value, and which
/// parents need a gradient. Entries for parents that do not need one may be
/// `None`.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf node; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
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

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "item() on a tensor of shape {:?}", t.shape());
        t.data()[0]
    }

    /// Records a node. The backward closure is dropped when no parent needs
    /// a gradient.
    pub(crate) fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let out = &self.nodes[output.0];
        assert_eq!(out.value.len(), 1, "backward() needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(out.value.shape()));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let parent_values: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &parent_values, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of [`Graph::backward`]. Only leaves keep their gradient.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub mod gradcheck {
    //! Central finite-difference gradient checks.

    use super::*;

    /// Norm-wise relative error `max|a − n| / max|n|` between the analytic
    /// gradient `a` and the central-difference gradient `n` of `f` at
    /// `inputs`, taken over every coordinate of every input.
    pub fn check(
        inputs: &[Tensor<f64>],
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        step: f64,
    ) -> f64 {
        let coords: Vec<(usize, usize)> =
            inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
        relative_error(inputs, &f, step, &coords)
    }

    /// As [`check`], restricted to the listed flat coordinates of the first
    /// input.
    pub fn check_coords(
        inputs: &[Tensor<f64>],
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        step: f64,
        coords: &[usize],
    ) -> f64 {
        let coords: Vec<(usize, usize)> = coords.iter().map(|&j| (0, j)).collect();
        relative_error(inputs, &f, step, &coords)
    }

    fn relative_error(
        inputs: &[Tensor<f64>],
        f: &impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        step: f64,
        coords: &[(usize, usize)],
    ) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let analytic: Vec<Tensor<f64>> = inputs
            .iter()
            .zip(&vars)
            .map(|(t, &v)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let mut worst_abs: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for &(i, j) in coords {
            let eval = |delta: f64| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += delta;
                        }
                        g.leaf(t, false)
                    })
                    .collect();
                let out = f(&mut g, &vars);
                g.item(out)
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            worst_abs = worst_abs.max((analytic[i].data()[j] - numeric).abs());
            scale = scale.max(numeric.abs());
        }
        worst_abs / scale.max(1e-12)
    }
}
