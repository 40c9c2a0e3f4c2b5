//! Gradient tape.
//!
//! Every value produced during a recorded forward pass lives on the tape and
//! is addressed by a [`Var`]. Entries are appended in execution order, so the
//! tape is topologically sorted by construction and `backward` is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::{self, BatchNormCache, RunningStats};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    LeakyRelu { x: Var, slope: T },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: BatchNormCache<T> },
    Reshape { x: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Tensor<T>, labels: Vec<usize> },
    WeightedSum { x: Var, weights: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records tensor operations for one forward pass and replays them backward
/// once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the variable does not require a gradient or does not
    /// influence the output.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Drops every recorded entry so the tape can record a fresh pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul { a, b }, &[a, b])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_bias(self.value(x), self.value(bias))?;
        self.push(out, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.value(x));
        self.push(out, Op::LeakyRelu { x, slope: T::zero() }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let out = ops::leaky_relu(self.value(x), slope)?;
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn maxpool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(x), size, stride)?;
        self.push(out, Op::MaxPool { x, argmax }, &[x])
    }

    /// Training-mode batch norm; updates `running` when given.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<&mut RunningStats<T>>,
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        let (out, cache) = ops::batchnorm_train(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running,
            momentum,
            eps,
        )?;
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape { x }, &[x])
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Mean cross-entropy of `logits` against `labels`, as a 1-element tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// `sum(x * weights)` for a constant `weights` tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let value = self.value(x).dot(&weights)?;
        self.push(Tensor::scalar(value), Op::WeightedSum { x, weights }, &[x])
    }

    /// Back-propagates from a single-element `output`. A tape supports one
    /// backward sweep; call [`Tape::reset`] before recording again.
    pub fn backward(&mut self, output: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(output).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "output must hold a single element, got shape {:?}",
                    self.value(output).shape()
                ),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));

        for id in (0..=output.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let needs = |v: Var| self.nodes[v.0].needs_grad;
            let mut contributions: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(grad);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (da, db) = ops::matmul_backward(
                        self.value(*a),
                        self.value(*b),
                        &grad,
                        needs(*a),
                        needs(*b),
                    );
                    contributions.extend(da.map(|g| (*a, g)));
                    contributions.extend(db.map(|g| (*b, g)));
                }
                Op::AddBias { x, bias } => {
                    if needs(*bias) {
                        let c = self.value(*bias).len();
                        contributions.push((*bias, ops::add_bias_backward(&grad, c)));
                    }
                    contributions.push((*x, grad));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (di, dk) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &grad,
                        *stride,
                        *padding,
                        needs(*input),
                        needs(*kernel),
                    );
                    contributions.extend(di.map(|g| (*input, g)));
                    contributions.extend(dk.map(|g| (*kernel, g)));
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = ops::leaky_relu_backward(self.value(*x), &grad, *slope);
                    contributions.push((*x, dx));
                }
                Op::MaxPool { x, argmax } => {
                    let dx = ops::maxpool2d_backward(self.value(*x).shape(), argmax, &grad);
                    contributions.push((*x, dx));
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = ops::batchnorm_backward(cache, self.value(*gamma), &grad);
                    contributions.push((*x, dx));
                    contributions.push((*gamma, dg));
                    contributions.push((*beta, db));
                }
                Op::Reshape { x } => {
                    let dx = grad.reshape(self.value(*x).shape())?;
                    contributions.push((*x, dx));
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let dl = ops::softmax_cross_entropy_backward(probs, labels, grad.data()[0]);
                    contributions.push((*logits, dl));
                }
                Op::WeightedSum { x, weights } => {
                    contributions.push((*x, weights.scaled(grad.data()[0])));
                }
            }
            for (var, g) in contributions {
                if !needs(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.axpy(T::one(), &g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }

        // Only leaves keep their gradients.
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_backward_is_rejected_until_reset() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap(), true);
        let w = Tensor::from_f64(&[1, 2], &[3.0, 4.0]).unwrap();
        let y = tape.weighted_sum(x, w.clone()).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
        assert!(matches!(tape.weighted_sum(x, w.clone()), Err(Error::TapeConsumed)));

        tape.reset();
        let x = tape.leaf(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap(), true);
        let y = tape.weighted_sum(x, w).unwrap();
        assert!(tape.backward(y).is_ok());
    }

    #[test]
    fn fan_out_accumulates() {
        // s = x·xᵀ = sum(x²), so ds/dx = 2x through two paths.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 2], &[1.5, -2.0]).unwrap(), true);
        let xt = tape.reshape(x, &[2, 1]).unwrap();
        let s = tape.matmul(x, xt).unwrap();
        let frozen = tape.leaf(Tensor::zeros(&[1, 1]), false);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, -4.0]);
        assert!(g.get(xt).is_none());
        assert!(g.get(frozen).is_none());
    }

    #[test]
    fn backward_needs_scalar_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        let y = tape.relu(x).unwrap();
        assert!(tape.backward(y).is_err());
    }
}
