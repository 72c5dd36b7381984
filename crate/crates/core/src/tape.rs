//! Reverse-mode tape over the kernels in [`crate::kernels`].
//!
//! Each recorded node owns its forward value. `backward` walks the tape in
//! reverse and calls the matching kernel VJP, so every gradient the model
//! sees is produced by a kernel that is finite-difference checked on its own.

use std::rc::Rc;

use crate::kernels::{attention, conv, dense, loss};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row index list for [`Tape::gather`]; `None` yields a zero row.
pub type RowIndex = Rc<[Option<u32>]>;

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Gather { x: Var, idx: RowIndex },
    Concat(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    RelPos { w: Var, deltas: Rc<Tensor>, mask: Option<Rc<[bool]>> },
    Conv { x: Var, k: Var, b: Var, spec: conv::ConvSpec },
    Upsample(Var),
    Softmax { x: Var, axis: usize },
    Focal { h: Var, target: Rc<[f64]>, alpha: f64, gamma: f64, n_pos: f64 },
    GaussFocal { h: Var, target: Rc<[f64]> },
    SmoothL1 { pred: Var, target: Rc<[f64]>, weights: Option<Rc<[f64]>>, scale: f64 },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = dense::linear(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(y, Op::Linear { x, w, b }, &ins)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "add: length mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let y = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = dense::relu(self.value(x));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = dense::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).clone().reshape(shape).expect("reshape: element count");
        self.push(y, Op::Reshape(x), &[x])
    }

    /// Selects rows of `x` viewed as `[rows, last_dim]`.
    pub fn gather(&mut self, x: Var, idx: RowIndex) -> Var {
        let src = self.value(x);
        let c = src.last_dim();
        let mut out = vec![0.0; idx.len() * c];
        for (k, i) in idx.iter().enumerate() {
            if let Some(i) = i {
                let i = *i as usize;
                out[k * c..(k + 1) * c].copy_from_slice(&src.data()[i * c..(i + 1) * c]);
            }
        }
        let y = Tensor::new(vec![idx.len(), c], out).unwrap();
        self.push(y, Op::Gather { x, idx }, &[x])
    }

    /// Concatenates along the trailing axis; all inputs share the row count.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                let t = self.value(x);
                assert_eq!(t.rows(), rows, "concat: row mismatch");
                out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        let y = Tensor::new(vec![rows, total], out).unwrap();
        self.push(y, Op::Concat(xs.to_vec()), xs)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<Rc<[bool]>>) -> Var {
        let res = attention::scaled_dot_attention(self.value(q), self.value(k), self.value(v), heads, mask.as_deref());
        self.push(
            res.out,
            Op::Attention { q, k, v, heads, probs: res.probs },
            &[q, k, v],
        )
    }

    pub fn rel_pos(&mut self, w: Var, deltas: Rc<Tensor>, mask: Option<Rc<[bool]>>) -> Var {
        let y = attention::relative_pos_encoding(&deltas, self.value(w), mask.as_deref());
        self.push(y, Op::RelPos { w, deltas, mask }, &[w])
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, spec: conv::ConvSpec) -> Var {
        let y = conv::conv2d(self.value(x), self.value(k), self.value(b), spec);
        self.push(y, Op::Conv { x, k, b, spec }, &[x, k, b])
    }

    pub fn upsample2(&mut self, x: Var, out_r: usize, out_a: usize) -> Var {
        let y = conv::upsample2(self.value(x), out_r, out_a);
        self.push(y, Op::Upsample(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let y = dense::softmax(self.value(x), axis);
        self.push(y, Op::Softmax { x, axis }, &[x])
    }

    pub fn focal(&mut self, h: Var, target: Rc<[f64]>, alpha: f64, gamma: f64, n_pos: f64) -> Var {
        let l = loss::focal_loss_with_norm(self.value(h).data(), &target, alpha, gamma, n_pos);
        self.push(Tensor::scalar(l), Op::Focal { h, target, alpha, gamma, n_pos }, &[h])
    }

    pub fn gaussian_focal(&mut self, h: Var, target: Rc<[f64]>) -> Var {
        let l = loss::gaussian_focal_loss(self.value(h).data(), &target);
        self.push(Tensor::scalar(l), Op::GaussFocal { h, target }, &[h])
    }

    /// `scale * Σ w_i smoothL1(pred_i - target_i)`.
    pub fn smooth_l1(&mut self, pred: Var, target: Rc<[f64]>, weights: Option<Rc<[f64]>>, scale: f64) -> Var {
        let l = scale * loss::smooth_l1(self.value(pred).data(), &target, weights.as_deref());
        self.push(Tensor::scalar(l), Op::SmoothL1 { pred, target, weights, scale }, &[pred])
    }

    /// `Σ c_i x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s = terms.iter().map(|&(v, c)| c * self.value(v).item()).sum();
        let ins: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), &ins)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(up) = grads[i].take() else { continue };
            self.node_vjp(node, &up, &mut grads);
            grads[i] = Some(up);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(g.reshape(&shape).expect("gradient shape"));
            }
        }
    }

    fn node_vjp(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let g = dense::linear_vjp(self.value(*x), self.value(*w), up);
                self.accumulate(grads, *x, g.dx);
                self.accumulate(grads, *w, g.dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, g.db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::Relu(x) => {
                let g = dense::relu_vjp(self.value(*x), up);
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = dense::sigmoid_vjp(&node.value, up);
                self.accumulate(grads, *x, g);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, up.clone()),
            Op::Gather { x, idx } => {
                let src = self.value(*x);
                let c = src.last_dim();
                let mut dx = Tensor::zeros(src.shape());
                let d = dx.data_mut();
                for (k, i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        let i = *i as usize;
                        for (dv, uv) in d[i * c..(i + 1) * c].iter_mut().zip(&up.data()[k * c..(k + 1) * c]) {
                            *dv += uv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = up.len() / total;
                let mut off = 0;
                for (&x, &w) in xs.iter().zip(&widths) {
                    let mut g = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        g.extend_from_slice(&up.data()[r * total + off..r * total + off + w]);
                    }
                    off += w;
                    let shape = self.value(x).shape().to_vec();
                    self.accumulate(grads, x, Tensor::new(shape, g).unwrap());
                }
            }
            Op::Attention { q, k, v, heads, probs, .. } => {
                let g = attention::scaled_dot_attention_vjp(self.value(*q), self.value(*k), self.value(*v), *heads, probs, up);
                self.accumulate(grads, *q, g.dq);
                self.accumulate(grads, *k, g.dk);
                self.accumulate(grads, *v, g.dv);
            }
            Op::RelPos { w, deltas, mask } => {
                let g = attention::relative_pos_encoding_vjp(deltas, self.value(*w), mask.as_deref(), up);
                self.accumulate(grads, *w, g);
            }
            Op::Conv { x, k, b, spec } => {
                let g = conv::conv2d_vjp(self.value(*x), self.value(*k), *spec, up);
                self.accumulate(grads, *x, g.dx);
                self.accumulate(grads, *k, g.dk);
                self.accumulate(grads, *b, g.db);
            }
            Op::Upsample(x) => {
                let g = conv::upsample2_vjp(self.value(*x).shape(), up);
                self.accumulate(grads, *x, g);
            }
            Op::Softmax { x, axis } => {
                let g = dense::softmax_vjp(&node.value, up, *axis);
                self.accumulate(grads, *x, g);
            }
            Op::Focal { h, target, alpha, gamma, n_pos } => {
                let hv = self.value(*h);
                let g = loss::focal_loss_vjp(hv.data(), target, *alpha, *gamma, *n_pos, up.item());
                self.accumulate(grads, *h, Tensor::new(hv.shape().to_vec(), g).unwrap());
            }
            Op::GaussFocal { h, target } => {
                let hv = self.value(*h);
                let g = loss::gaussian_focal_loss_vjp(hv.data(), target, up.item());
                self.accumulate(grads, *h, Tensor::new(hv.shape().to_vec(), g).unwrap());
            }
            Op::SmoothL1 { pred, target, weights, scale } => {
                let pv = self.value(*pred);
                let g = loss::smooth_l1_vjp(pv.data(), target, weights.as_deref(), up.item() * scale);
                self.accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), g).unwrap());
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    let shape = self.value(v).shape().to_vec();
                    self.accumulate(grads, v, Tensor::filled(&shape, c * up.item()));
                }
            }
        }
    }
}
