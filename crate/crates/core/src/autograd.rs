//! A small reverse-mode tape over [`Tensor`].
//!
//! Nodes are appended in evaluation order, so a single reverse sweep is a
//! valid topological order. Nodes whose inputs are all constants carry no
//! backward closure; this is how the frozen backbone avoids paying for
//! weight gradients it never uses.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub need: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
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

    /// A trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), true, None)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), false, None)
    }

    fn insert(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents, requires_grad, backward });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records a custom operation. `backward` is dropped unless some input
    /// requires a gradient.
    pub fn op<F>(&self, value: Tensor, inputs: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        let parents = inputs.iter().map(|v| v.id).collect();
        let backward: Option<BackwardFn> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.insert(value, parents, requires_grad, backward)
    }

    /// Reverse sweep from a scalar `loss`, seeded with 1.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::new(nodes[loss.id].value.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let need: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let ctx = BackwardCtx { grad: &grad, inputs, output: &node.value, need };
            let parent_grads = backward(&ctx);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                if let Some(g) = g {
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value().as_ref().clone())
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape.op(out, &[self, other], |c| vec![Some(c.grad.clone()), Some(c.grad.clone())])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.op(out, &[self, other], |c| vec![Some(c.grad.clone()), Some(c.grad.scale(-1.0))])
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.op(out, &[self, other], |c| {
            vec![
                c.need[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y)),
                c.need[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x)),
            ]
        })
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let out = self.value().scale(k);
        self.tape.op(out, &[self], move |c| vec![Some(c.grad.scale(k))])
    }

    /// Multiplies every element by a one-element variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        let sv = s.value().item();
        let out = self.value().scale(sv);
        self.tape.op(out, &[self, s], |c| {
            let sv = c.inputs[1].item();
            vec![
                c.need[0].then(|| c.grad.scale(sv)),
                c.need[1].then(|| Tensor::scalar(c.grad.dot(c.inputs[0]))),
            ]
        })
    }

    /// Adds a one-element variable to every element.
    pub fn add_scalar(self, s: Var<'t>) -> Var<'t> {
        let sv = s.value().item();
        let out = self.value().map(|v| v + sv);
        self.tape.op(out, &[self, s], |c| {
            vec![Some(c.grad.clone()), c.need[1].then(|| Tensor::scalar(c.grad.sum()))]
        })
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.op(out, &[self], |c| {
            let g = c.grad.item();
            vec![Some(Tensor::full(c.inputs[0].shape().to_vec(), g))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        let out = Tensor::scalar(self.value().dot(&other.value()));
        self.tape.op(out, &[self, other], |c| {
            let g = c.grad.item();
            vec![
                c.need[0].then(|| c.inputs[1].scale(g)),
                c.need[1].then(|| c.inputs[0].scale(g)),
            ]
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let out = self.value().as_ref().clone().reshape(shape);
        self.tape.op(out, &[self], |c| {
            vec![Some(c.grad.clone().reshape(c.inputs[0].shape().to_vec()))]
        })
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.value().transpose();
        self.tape.op(out, &[self], |c| vec![Some(c.grad.transpose())])
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let out = self.value().matmul(&other.value());
        self.tape.op(out, &[self, other], |c| {
            vec![
                c.need[0].then(|| c.grad.matmul_nt(c.inputs[1])),
                c.need[1].then(|| c.inputs[0].matmul_tn(c.grad)),
            ]
        })
    }

    /// `self @ other^T`.
    pub fn matmul_nt(self, other: Var<'t>) -> Var<'t> {
        let out = self.value().matmul_nt(&other.value());
        self.tape.op(out, &[self, other], |c| {
            vec![
                c.need[0].then(|| c.grad.matmul(c.inputs[1])),
                c.need[1].then(|| c.grad.matmul_tn(c.inputs[0])),
            ]
        })
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = bias.value();
        let n = a.cols();
        assert_eq!(b.len(), n, "add_row bias length");
        let mut out = a.as_ref().clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % n];
        }
        self.tape.op(out, &[self, bias], |c| {
            let db = c.need[1].then(|| {
                let n = c.grad.cols();
                let mut acc = vec![0.0; n];
                for (i, g) in c.grad.data().iter().enumerate() {
                    acc[i % n] += g;
                }
                Tensor::new(c.inputs[1].shape().to_vec(), acc)
            });
            vec![Some(c.grad.clone()), db]
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let out = self.value().map(|x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()));
        self.tape.op(out, &[self], |c| {
            let d = c.inputs[0].map(|x| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            });
            vec![Some(c.grad.zip_map(&d, |g, v| g * v))]
        })
    }

    /// Row-wise layer normalization of an `[m, n]` matrix.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        let (g, b) = (gamma.value(), beta.value());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::matrix(m, n, out);
        self.tape.op(out, &[self, gamma, beta], move |c| {
            let gamma = c.inputs[1].data();
            let gy = c.grad.data();
            let mut dx = vec![0.0; m * n];
            let mut dg = vec![0.0; n];
            let mut db = vec![0.0; n];
            for i in 0..m {
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in 0..n {
                    let k = i * n + j;
                    dg[j] += gy[k] * xhat[k];
                    db[j] += gy[k];
                    let d = gy[k] * gamma[j];
                    sum_d += d;
                    sum_dx += d * xhat[k];
                }
                for j in 0..n {
                    let k = i * n + j;
                    let d = gy[k] * gamma[j];
                    dx[k] = inv_std[i] * (d - sum_d / n as f64 - xhat[k] * sum_dx / n as f64);
                }
            }
            vec![
                c.need[0].then(|| Tensor::matrix(m, n, dx)),
                c.need[1].then(|| Tensor::new(c.inputs[1].shape().to_vec(), dg)),
                c.need[2].then(|| Tensor::new(c.inputs[2].shape().to_vec(), db)),
            ]
        })
    }

    /// Columns `[start, end)` of an `[m, n]` matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        assert!(start < end && end <= n, "slice_cols {start}..{end} of {n}");
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&x.row(i)[start..end]);
        }
        self.tape.op(Tensor::matrix(m, w, out), &[self], move |c| {
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                dx[i * n + start..i * n + end].copy_from_slice(c.grad.row(i));
            }
            vec![Some(Tensor::matrix(m, n, dx))]
        })
    }

    /// Gathers rows of an `[m, n]` matrix.
    pub fn gather_rows(self, rows: &[usize]) -> Var<'t> {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(x.row(r));
        }
        let rows = rows.to_vec();
        self.tape.op(Tensor::matrix(rows.len(), n, out), &[self], move |c| {
            let mut dx = vec![0.0; m * n];
            for (k, &r) in rows.iter().enumerate() {
                for (d, g) in dx[r * n..(r + 1) * n].iter_mut().zip(c.grad.row(k)) {
                    *d += g;
                }
            }
            vec![Some(Tensor::matrix(m, n, dx))]
        })
    }
}

/// Stacks equally shaped variables along a new leading axis.
pub fn stack<'t>(vars: &[Var<'t>]) -> Var<'t> {
    assert!(!vars.is_empty(), "stack of nothing");
    let tape = vars[0].tape;
    let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
    let inner = values[0].shape().to_vec();
    let mut data = Vec::with_capacity(values.len() * values[0].len());
    for v in &values {
        assert_eq!(v.shape(), inner.as_slice(), "stack shape mismatch");
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![values.len()];
    shape.extend_from_slice(&inner);
    let chunk = values[0].len();
    tape.op(Tensor::new(shape, data), vars, move |c| {
        c.grad
            .data()
            .chunks(chunk)
            .zip(&c.need)
            .map(|(g, &need)| need.then(|| Tensor::new(inner.clone(), g.to_vec())))
            .collect()
    })
}

/// Concatenates `[m_i, n]` matrices along rows.
pub fn concat_rows<'t>(vars: &[Var<'t>]) -> Var<'t> {
    assert!(!vars.is_empty(), "concat of nothing");
    let tape = vars[0].tape;
    let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
    let n = values[0].cols();
    let mut data = Vec::new();
    let mut sizes = Vec::with_capacity(values.len());
    for v in &values {
        assert_eq!(v.cols(), n, "concat_rows width mismatch");
        sizes.push(v.len());
        data.extend_from_slice(v.data());
    }
    let m = data.len() / n;
    tape.op(Tensor::matrix(m, n, data), vars, move |c| {
        let mut offset = 0;
        sizes
            .iter()
            .zip(&c.need)
            .zip(&c.inputs)
            .map(|((&len, &need), input)| {
                let g = need.then(|| Tensor::new(input.shape().to_vec(), c.grad.data()[offset..offset + len].to_vec()));
                offset += len;
                g
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_do_not_record_backward() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = a.mul(b);
        assert!(!c.requires_grad());
        let w = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        assert!(c.mul(w).requires_grad());
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).add(x);
        let grads = tape.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn matmul_gradient_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![1.0; 6]));
        let b = tape.leaf(Tensor::matrix(3, 4, vec![0.5; 12]));
        let loss = a.matmul(b).sum();
        let g = tape.backward(loss);
        assert_eq!(g.get(a).unwrap().shape(), &[2, 3]);
        assert_eq!(g.get(a).unwrap().data()[0], 2.0);
        assert_eq!(g.get(b).unwrap().data()[0], 2.0);
    }
}
