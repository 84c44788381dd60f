//! Reverse-mode differentiation tape over [`DenseTensor`] operations.
//!
//! Nodes are appended in construction order, which is a topological order
//! by definition; backward walks the node list once in reverse. Domain
//! modules register fused kernels (LIF sequences, selective scans, batch
//! norm, convolutions) through the [`CustomOp`] trait so the tape stays
//! small while large composite operations keep hand-written adjoints.
//!
//! A tape is confined to one logical thread. Two backward passes over the
//! same tape produce bit-identical gradients.

use super::{broadcast_zip, reduce_to_shape, sigmoid, DenseTensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Fused operation with a hand-written adjoint.
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order.
    /// `None` marks an input that receives no gradient.
    fn backward(
        &self,
        inputs: &[&DenseTensor],
        output: &DenseTensor,
        grad: &DenseTensor,
    ) -> Result<Vec<Option<DenseTensor>>, TensorError>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Softplus(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMax(Var, f64),
    /// Forward is the exact step function; backward is the sigmoid
    /// surrogate `alpha * sigma(alpha u) * (1 - sigma(alpha u))`.
    Heaviside(Var, f64),
    Matmul(Var, Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

#[derive(Debug)]
struct Node {
    value: DenseTensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Per-node gradients produced by one backward pass. Only leaves retain
/// their gradients; interior gradients are consumed during traversal.
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Tape with gradient recording enabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only tape: values are computed identically but no backward
    /// information is retained.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    /// Constant input: receives no gradient.
    pub fn leaf(&mut self, value: DenseTensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input: receives a gradient when recording is enabled.
    pub fn param(&mut self, value: DenseTensor) -> Var {
        let ng = self.grad_enabled;
        self.push(value, Op::Leaf, ng)
    }

    /// Re-enter a value as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value)
    }

    /// True if a node built from these inputs would need backward state.
    pub fn wants_grad(&self, inputs: &[Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, value: DenseTensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(
        &mut self,
        v: Var,
        value: DenseTensor,
        op: impl FnOnce(Var) -> Op,
    ) -> Var {
        let ng = self.wants_grad(&[v]);
        self.push(value, if ng { op(v) } else { Op::Leaf }, ng)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        value: DenseTensor,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Var {
        let ng = self.wants_grad(&[a, b]);
        self.push(value, if ng { op(a, b) } else { Op::Leaf }, ng)
    }

    // ---- recorded operations ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Add))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Sub))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Mul))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).div(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Div))
    }

    pub fn neg(&mut self, v: Var) -> Var {
        let value = self.value(v).neg();
        self.unary(v, value, Op::Neg)
    }

    pub fn exp(&mut self, v: Var) -> Var {
        let value = self.value(v).exp();
        self.unary(v, value, Op::Exp)
    }

    pub fn ln(&mut self, v: Var) -> Var {
        let value = self.value(v).ln();
        self.unary(v, value, Op::Ln)
    }

    pub fn sigmoid(&mut self, v: Var) -> Var {
        let value = self.value(v).sigmoid();
        self.unary(v, value, Op::Sigmoid)
    }

    pub fn softplus(&mut self, v: Var) -> Var {
        let value = self.value(v).softplus();
        self.unary(v, value, Op::Softplus)
    }

    pub fn scale(&mut self, v: Var, c: f64) -> Var {
        let value = self.value(v).scale(c);
        self.unary(v, value, |x| Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, v: Var, c: f64) -> Var {
        let value = self.value(v).map(|x| x + c);
        self.unary(v, value, Op::AddScalar)
    }

    pub fn clamp_max(&mut self, v: Var, c: f64) -> Var {
        let value = self.value(v).map(|x| x.min(c));
        self.unary(v, value, |x| Op::ClampMax(x, c))
    }

    /// Step function with surrogate backward; `alpha` is the surrogate
    /// sharpness. Output is exactly binary.
    pub fn heaviside(&mut self, v: Var, alpha: f64) -> Var {
        let value = self.value(v).heaviside();
        self.unary(v, value, |x| Op::Heaviside(x, alpha))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Matmul))
    }

    pub fn sum_axis(&mut self, v: Var, axis: usize) -> Result<Var, TensorError> {
        let value = self.value(v).sum_axis(axis)?;
        Ok(self.unary(v, value, |x| Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, v: Var, axis: usize) -> Result<Var, TensorError> {
        let value = self.value(v).mean_axis(axis)?;
        Ok(self.unary(v, value, |x| Op::MeanAxis(x, axis)))
    }

    pub fn reshape(&mut self, v: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(v).reshape(shape)?;
        Ok(self.unary(v, value, Op::Reshape))
    }

    pub fn permute(&mut self, v: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(v).permute(perm)?;
        let p = perm.to_vec();
        Ok(self.unary(v, value, |x| Op::Permute(x, p)))
    }

    /// Record a fused operation. `op` must be `Some` whenever
    /// [`Tape::wants_grad`] is true for `inputs`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: DenseTensor,
        op: Option<Box<dyn CustomOp>>,
    ) -> Var {
        let ng = self.wants_grad(inputs);
        if ng {
            let boxed = op.expect("custom op requires backward state when gradients are wanted");
            self.push(value, Op::Custom(inputs.to_vec(), boxed), true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    /// Reverse pass from a scalar loss. The tape itself is unchanged, so
    /// repeated calls replay deterministically.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(TensorError::ShapeMismatch(
                "backward requires a scalar loss".into(),
            ));
        }
        if !loss_node.value.item().is_finite() {
            return Err(TensorError::NonFiniteLoss);
        }
        let mut grads: Vec<Option<DenseTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseTensor::ones(loss_node.value.shape()));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep leaf gradients for the caller
            }
            let g = grads[i].take().expect("checked above");
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        i: usize,
        g: &DenseTensor,
        grads: &mut [Option<DenseTensor>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        let send = |var: Var, contrib: DenseTensor, grads: &mut [Option<DenseTensor>]| {
            if !self.nodes[var.0].needs_grad {
                return Ok::<(), TensorError>(());
            }
            debug_assert_eq!(
                contrib.shape(),
                self.nodes[var.0].value.shape(),
                "gradient buffer must match the value shape"
            );
            match &mut grads[var.0] {
                Some(acc) => *acc = acc.add(&contrib)?,
                slot @ None => *slot = Some(contrib),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, reduce_to_shape(g, self.value(*a).shape())?, grads)?;
                send(*b, reduce_to_shape(g, self.value(*b).shape())?, grads)?;
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to_shape(g, self.value(*a).shape())?, grads)?;
                send(*b, reduce_to_shape(&g.neg(), self.value(*b).shape())?, grads)?;
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b))?;
                let gb = g.mul(self.value(*a))?;
                send(*a, reduce_to_shape(&ga, self.value(*a).shape())?, grads)?;
                send(*b, reduce_to_shape(&gb, self.value(*b).shape())?, grads)?;
            }
            Op::Div(a, b) => {
                let ga = g.div(self.value(*b))?;
                // d/db (a/b) = -out / b
                let gb = g.mul(&node.value)?.div(self.value(*b))?.neg();
                send(*a, reduce_to_shape(&ga, self.value(*a).shape())?, grads)?;
                send(*b, reduce_to_shape(&gb, self.value(*b).shape())?, grads)?;
            }
            Op::Neg(a) => send(*a, g.neg(), grads)?,
            Op::Exp(a) => send(*a, g.mul(&node.value)?, grads)?,
            Op::Ln(a) => {
                let inv = self.value(*a).map(|x| 1.0 / x);
                send(*a, g.mul(&inv)?, grads)?;
            }
            Op::Sigmoid(a) => {
                let d = node.value.map(|s| s * (1.0 - s));
                send(*a, g.mul(&d)?, grads)?;
            }
            Op::Softplus(a) => {
                let d = self.value(*a).sigmoid();
                send(*a, g.mul(&d)?, grads)?;
            }
            Op::Scale(a, c) => send(*a, g.scale(*c), grads)?,
            Op::AddScalar(a) => send(*a, g.clone(), grads)?,
            Op::ClampMax(a, c) => {
                let c = *c;
                let gate = self.value(*a).map(|x| if x <= c { 1.0 } else { 0.0 });
                send(*a, g.mul(&gate)?, grads)?;
            }
            Op::Heaviside(a, alpha) => {
                let d = surrogate_derivative(self.value(*a), *alpha);
                send(*a, g.mul(&d)?, grads)?;
            }
            Op::Matmul(a, b) => {
                let at = transpose_last2(self.value(*a))?;
                let bt = transpose_last2(self.value(*b))?;
                let ga = g.matmul(&bt)?;
                let gb = at.matmul(g)?;
                send(*a, reduce_to_shape(&ga, self.value(*a).shape())?, grads)?;
                send(*b, reduce_to_shape(&gb, self.value(*b).shape())?, grads)?;
            }
            Op::SumAxis(a, axis) => {
                send(*a, expand_axis(g, *axis, self.value(*a).shape())?, grads)?;
            }
            Op::MeanAxis(a, axis) => {
                let n = self.value(*a).shape()[*axis] as f64;
                let expanded = expand_axis(g, *axis, self.value(*a).shape())?;
                send(*a, expanded.scale(1.0 / n), grads)?;
            }
            Op::Reshape(a) => {
                send(*a, g.reshape(self.value(*a).shape())?, grads)?;
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0usize; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inverse[p] = d;
                }
                send(*a, g.permute(&inverse)?, grads)?;
            }
            Op::Custom(inputs, op) => {
                let in_values: Vec<&DenseTensor> =
                    inputs.iter().map(|v| self.value(*v)).collect();
                let contribs = op.backward(&in_values, &node.value, g)?;
                debug_assert_eq!(contribs.len(), inputs.len());
                for (v, contrib) in inputs.iter().zip(contribs) {
                    if let Some(c) = contrib {
                        send(*v, c, grads)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// `alpha * sigma(alpha u) * (1 - sigma(alpha u))`, the derivative of
/// `sigma(alpha u)`, evaluated elementwise.
pub fn surrogate_derivative(u: &DenseTensor, alpha: f64) -> DenseTensor {
    u.map(|x| {
        let s = sigmoid(alpha * x);
        alpha * s * (1.0 - s)
    })
}

fn transpose_last2(t: &DenseTensor) -> Result<DenseTensor, TensorError> {
    let r = t.rank();
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 1, r - 2);
    t.permute(&perm)
}

/// Broadcast a reduced gradient back over the removed axis.
fn expand_axis(
    g: &DenseTensor,
    axis: usize,
    target: &[usize],
) -> Result<DenseTensor, TensorError> {
    let mut with_axis = g.shape().to_vec();
    with_axis.insert(axis, 1);
    let g1 = g.reshape(&with_axis)?;
    broadcast_zip(&DenseTensor::zeros(target), &g1, |_, b| b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heaviside_forward_binary_backward_is_surrogate() {
        let mut tape = Tape::new();
        let u = DenseTensor::new(vec![5], vec![-2.0, -0.3, 0.0, 0.3, 2.0]).unwrap();
        let x = tape.param(u.clone());
        let s = tape.heaviside(x, 4.0);
        assert!(tape.value(s).is_binary());
        assert_eq!(tape.value(s).data(), &[0.0, 0.0, 1.0, 1.0, 1.0]);
        let total = tape.sum_axis(s, 0).unwrap();
        let grads = tape.backward(total).unwrap();
        let g = grads.get(x).unwrap();
        let expected = surrogate_derivative(&u, 4.0);
        for (a, b) in g.data().iter().zip(expected.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn backward_replay_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.param(DenseTensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = tape.sigmoid(x);
        let z = tape.mul(y, x).unwrap();
        let loss = tape.sum_axis(z, 0).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(x).unwrap().data(), g2.get(x).unwrap().data());
    }

    #[test]
    fn no_grad_tape_computes_same_values() {
        let input = DenseTensor::new(vec![4], vec![0.1, -0.2, 0.3, -0.4]).unwrap();
        let run = |tape: &mut Tape| {
            let x = tape.param(input.clone());
            let y = tape.exp(x);
            let z = tape.sigmoid(y);
            tape.value(z).clone()
        };
        let a = run(&mut Tape::new());
        let b = run(&mut Tape::no_grad());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn broadcast_mul_backward_reduces() {
        let mut tape = Tape::new();
        let a = tape.param(DenseTensor::ones(&[2, 3]));
        let b = tape.param(DenseTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let c = tape.mul(a, b).unwrap();
        let s1 = tape.sum_axis(c, 1).unwrap();
        let loss = tape.sum_axis(s1, 0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(DenseTensor::ones(&[2]));
        assert!(tape.backward(x).is_err());
    }
}
