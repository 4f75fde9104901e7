//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation eagerly; [`Var::backward`] replays the
//! record in reverse, accumulating vector-Jacobian products. Values are
//! immutable [`Tensor`]s, so reading them back out after the tape is dropped
//! is free.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{col2im_acc, conv_out_dim, im2col, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{ef, Element, NumericsError, Tensor, EPS_NORM};

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulScalar(usize, f64),
    Affine { x: usize, w: usize, b: usize },
    Matmul(usize, usize),
    MatmulNT(usize, usize),
    Conv2d { input: usize, weight: usize, bias: usize, stride: (usize, usize), pad: (usize, usize) },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    LogSumExpRows(usize),
    Dot(usize, usize),
    L2NormalizeRows(usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    SliceCols { x: usize, start: usize, len: usize },
    SumAll(usize),
    MeanAll(usize),
    RowSum(usize),
    BroadcastCol(usize),
    SelectCols { x: usize, idx: Vec<usize> },
    Clamp { x: usize, lo: f64, hi: f64 },
    Minimum(usize, usize),
    Reshape(usize),
}

struct Node<E: Element> {
    value: Tensor<E>,
    requires_grad: bool,
    op: Op,
}

/// Recording context for one forward/backward pass.
pub struct Tape<E: Element> {
    nodes: Rc<RefCell<Vec<Node<E>>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    fn push(&self, value: Tensor<E>, requires_grad: bool, op: Op) -> Var<E> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, requires_grad, op });
        Var { nodes: Rc::clone(&self.nodes), id }
    }

    /// A value that does not receive gradients (inputs, masks, targets).
    pub fn constant(&self, value: Tensor<E>) -> Var<E> {
        self.push(value, false, Op::Leaf)
    }

    /// A trainable leaf; `backward` accumulates a gradient for it.
    pub fn param(&self, value: Tensor<E>) -> Var<E> {
        self.push(value, true, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients keyed by tape node, produced by [`Var::backward`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient with respect to `v`, or zeros if no gradient flowed to it.
    pub fn wrt(&self, v: &Var<E>) -> Tensor<E> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape().to_vec()),
        }
    }
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone)]
pub struct Var<E: Element> {
    nodes: Rc<RefCell<Vec<Node<E>>>>,
    id: usize,
}

impl<E: Element> Var<E> {
    pub fn value(&self) -> Tensor<E> {
        self.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn tape(&self) -> Tape<E> {
        Tape { nodes: Rc::clone(&self.nodes) }
    }

    fn same_tape(&self, other: &Var<E>) {
        assert!(Rc::ptr_eq(&self.nodes, &other.nodes), "vars from different tapes");
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary<F>(&self, op: Op, f: F) -> Var<E>
    where
        F: FnOnce(&Tensor<E>) -> Tensor<E>,
    {
        let value = f(&self.value());
        let rg = self.requires(&[self.id]);
        self.tape().push(value, rg, op)
    }

    pub fn add(&self, other: &Var<E>) -> Var<E> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data).unwrap();
        let rg = self.requires(&[self.id, other.id]);
        self.tape().push(value, rg, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<E>) -> Var<E> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(a.shape().to_vec(), data).unwrap();
        let rg = self.requires(&[self.id, other.id]);
        self.tape().push(value, rg, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<E>) -> Var<E> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), data).unwrap();
        let rg = self.requires(&[self.id, other.id]);
        self.tape().push(value, rg, Op::Mul(self.id, other.id))
    }

    pub fn mul_scalar(&self, c: f64) -> Var<E> {
        let ce = ef::<E>(c);
        self.unary(Op::MulScalar(self.id, c), |a| {
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x * ce).collect()).unwrap()
        })
    }

    pub fn neg(&self) -> Var<E> {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Var<E> {
        self.mul(self)
    }

    /// x[n,i] @ w[i,o] + b[o] broadcast over rows.
    pub fn affine(&self, w: &Var<E>, b: &Var<E>) -> Var<E> {
        self.same_tape(w);
        self.same_tape(b);
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        let (n, i) = (x.shape()[0], x.shape()[1]);
        assert_eq!(wv.shape()[0], i, "affine: weight rows != input cols");
        let o = wv.shape()[1];
        assert_eq!(bv.shape(), &[o], "affine: bias length != output cols");
        let mut out = vec![E::zero(); n * o];
        matmul_acc(x.data(), wv.data(), &mut out, n, i, o);
        for r in 0..n {
            for c in 0..o {
                out[r * o + c] = out[r * o + c] + bv.data()[c];
            }
        }
        let value = Tensor::new(vec![n, o], out).unwrap();
        let rg = self.requires(&[self.id, w.id, b.id]);
        self.tape().push(value, rg, Op::Affine { x: self.id, w: w.id, b: b.id })
    }

    pub fn matmul(&self, other: &Var<E>) -> Var<E> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = (a.shape()[0], a.shape()[1]);
        assert_eq!(b.shape()[0], k, "matmul inner dims differ");
        let n = b.shape()[1];
        let mut out = vec![E::zero(); m * n];
        matmul_acc(a.data(), b.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out).unwrap();
        let rg = self.requires(&[self.id, other.id]);
        self.tape().push(value, rg, Op::Matmul(self.id, other.id))
    }

    /// a[m,k] @ b[n,k]^T, so rows of `b` are the right-hand vectors.
    pub fn matmul_nt(&self, other: &Var<E>) -> Var<E> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = (a.shape()[0], a.shape()[1]);
        assert_eq!(b.shape()[1], k, "matmul_nt inner dims differ");
        let n = b.shape()[0];
        let mut out = vec![E::zero(); m * n];
        matmul_nt_acc(a.data(), b.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out).unwrap();
        let rg = self.requires(&[self.id, other.id]);
        self.tape().push(value, rg, Op::MatmulNT(self.id, other.id))
    }

    /// 2-D convolution over [N,C,H,W] input with [O,C,kh,kw] weights,
    /// zero padding, stride >= 1, no dilation.
    pub fn conv2d(&self, weight: &Var<E>, bias: &Var<E>, stride: (usize, usize), pad: (usize, usize)) -> Var<E> {
        self.same_tape(weight);
        self.same_tape(bias);
        let (x, wv, bv) = (self.value(), weight.value(), bias.value());
        assert_eq!(x.shape().len(), 4, "conv2d input must be [N,C,H,W]");
        assert_eq!(wv.shape().len(), 4, "conv2d weight must be [O,C,kh,kw]");
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, wc, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(c, wc, "conv2d channel mismatch");
        assert_eq!(bv.shape(), &[o], "conv2d bias mismatch");
        assert!(stride.0 >= 1 && stride.1 >= 1);
        let oh = conv_out_dim(h, kh, stride.0, pad.0);
        let ow = conv_out_dim(w, kw, stride.1, pad.1);
        let ckk = c * kh * kw;
        let spatial = oh * ow;
        let mut out = vec![E::zero(); n * o * spatial];
        let mut cols = vec![E::zero(); ckk * spatial];
        for s in 0..n {
            im2col(&x.data()[s * c * h * w..(s + 1) * c * h * w], c, h, w, kh, kw, stride, pad, &mut cols);
            let osample = &mut out[s * o * spatial..(s + 1) * o * spatial];
            matmul_acc(wv.data(), &cols, osample, o, ckk, spatial);
            for ch in 0..o {
                let bch = bv.data()[ch];
                for p in &mut osample[ch * spatial..(ch + 1) * spatial] {
                    *p = *p + bch;
                }
            }
        }
        let value = Tensor::new(vec![n, o, oh, ow], out).unwrap();
        let rg = self.requires(&[self.id, weight.id, bias.id]);
        self.tape().push(value, rg, Op::Conv2d { input: self.id, weight: weight.id, bias: bias.id, stride, pad })
    }

    pub fn relu(&self) -> Var<E> {
        self.unary(Op::Relu(self.id), |a| {
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| if x > E::zero() { x } else { E::zero() }).collect())
                .unwrap()
        })
    }

    pub fn sigmoid(&self) -> Var<E> {
        self.unary(Op::Sigmoid(self.id), |a| {
            let one = E::one();
            Tensor::new(
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .map(|&x| {
                        // split by sign to avoid overflow in exp
                        if x >= E::zero() {
                            one / (one + (-x).exp())
                        } else {
                            let e = x.exp();
                            e / (one + e)
                        }
                    })
                    .collect(),
            )
            .unwrap()
        })
    }

    pub fn tanh_act(&self) -> Var<E> {
        self.unary(Op::Tanh(self.id), |a| {
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x.tanh()).collect()).unwrap()
        })
    }

    pub fn exp_(&self) -> Var<E> {
        self.unary(Op::Exp(self.id), |a| {
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x.exp()).collect()).unwrap()
        })
    }

    pub fn ln_(&self) -> Var<E> {
        self.unary(Op::Ln(self.id), |a| {
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x.ln()).collect()).unwrap()
        })
    }

    /// Row-wise log(sum(exp(x))) of a [r,c] matrix, stabilized by
    /// subtracting the row maximum.
    pub fn logsumexp_rows(&self) -> Var<E> {
        self.unary(Op::LogSumExpRows(self.id), |a| {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut out = Vec::with_capacity(r);
            for k in 0..r {
                let row = &a.data()[k * c..(k + 1) * c];
                let m = row.iter().cloned().fold(E::neg_infinity(), E::max);
                let s: E = row.iter().map(|&x| (x - m).exp()).sum();
                out.push(m + s.ln());
            }
            Tensor::new(vec![r], out).unwrap()
        })
    }

    pub fn dot(&self, other: &Var<E>) -> Var<E> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "dot shape mismatch");
        let s: E = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum();
        let rg = self.requires(&[self.id, other.id]);
        self.tape().push(Tensor::scalar(s), rg, Op::Dot(self.id, other.id))
    }

    /// Normalize each row of a [r,c] matrix to unit L2 norm. Errors when a
    /// row norm is degenerate.
    pub fn l2_normalize_rows(&self) -> Result<Var<E>, NumericsError> {
        let a = self.value();
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![E::zero(); r * c];
        for k in 0..r {
            let row = &a.data()[k * c..(k + 1) * c];
            let norm = row.iter().map(|&x| (x * x).to_f64().unwrap_or(f64::NAN)).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(NumericsError::NonFinite { context: "l2_normalize_rows" });
            }
            if norm <= EPS_NORM {
                return Err(NumericsError::DegenerateNorm { norm, eps: EPS_NORM });
            }
            let inv = ef::<E>(1.0 / norm);
            for j in 0..c {
                out[k * c + j] = row[j] * inv;
            }
        }
        let value = Tensor::new(vec![r, c], out).unwrap();
        let rg = self.requires(&[self.id]);
        Ok(self.tape().push(value, rg, Op::L2NormalizeRows(self.id)))
    }

    pub fn concat_rows(&self, other: &Var<E>) -> Var<E> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape()[1], b.shape()[1], "concat_rows col mismatch");
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let value = Tensor::new(vec![a.shape()[0] + b.shape()[0], a.shape()[1]], data).unwrap();
        let rg = self.requires(&[self.id, other.id]);
        self.tape().push(value, rg, Op::ConcatRows(self.id, other.id))
    }

    pub fn concat_cols(&self, other: &Var<E>) -> Var<E> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape()[0], b.shape()[0], "concat_cols row mismatch");
        let (r, c1, c2) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = Vec::with_capacity(r * (c1 + c2));
        for k in 0..r {
            data.extend_from_slice(&a.data()[k * c1..(k + 1) * c1]);
            data.extend_from_slice(&b.data()[k * c2..(k + 1) * c2]);
        }
        let value = Tensor::new(vec![r, c1 + c2], data).unwrap();
        let rg = self.requires(&[self.id, other.id]);
        self.tape().push(value, rg, Op::ConcatCols(self.id, other.id))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<E> {
        let a = self.value();
        let (r, c) = (a.shape()[0], a.shape()[1]);
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * len);
        for k in 0..r {
            data.extend_from_slice(&a.data()[k * c + start..k * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data).unwrap();
        let rg = self.requires(&[self.id]);
        self.tape().push(value, rg, Op::SliceCols { x: self.id, start, len })
    }

    pub fn sum_all(&self) -> Var<E> {
        self.unary(Op::SumAll(self.id), |a| Tensor::scalar(a.data().iter().cloned().sum()))
    }

    pub fn mean_all(&self) -> Var<E> {
        self.unary(Op::MeanAll(self.id), |a| {
            let n = ef::<E>(a.len() as f64);
            Tensor::scalar(a.data().iter().cloned().sum::<E>() / n)
        })
    }

    pub fn row_sum(&self) -> Var<E> {
        self.unary(Op::RowSum(self.id), |a| {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let out: Vec<E> = (0..r).map(|k| a.data()[k * c..(k + 1) * c].iter().cloned().sum()).collect();
            Tensor::new(vec![r], out).unwrap()
        })
    }

    /// Repeat a length-r vector as `cols` identical columns: [r] -> [r,cols].
    pub fn broadcast_col(&self, cols: usize) -> Var<E> {
        let a = self.value();
        assert_eq!(a.shape().len(), 1, "broadcast_col expects a vector");
        let r = a.shape()[0];
        let mut data = Vec::with_capacity(r * cols);
        for k in 0..r {
            data.extend(std::iter::repeat(a.data()[k]).take(cols));
        }
        let value = Tensor::new(vec![r, cols], data).unwrap();
        let rg = self.requires(&[self.id]);
        self.tape().push(value, rg, Op::BroadcastCol(self.id))
    }

    /// Pick one element per row: y[k] = x[k, idx[k]].
    pub fn select_cols(&self, idx: &[usize]) -> Var<E> {
        let a = self.value();
        let (r, c) = (a.shape()[0], a.shape()[1]);
        assert_eq!(idx.len(), r, "select_cols index length mismatch");
        let out: Vec<E> = idx
            .iter()
            .enumerate()
            .map(|(k, &j)| {
                assert!(j < c, "select_cols index out of range");
                a.data()[k * c + j]
            })
            .collect();
        let value = Tensor::new(vec![r], out).unwrap();
        let rg = self.requires(&[self.id]);
        self.tape().push(value, rg, Op::SelectCols { x: self.id, idx: idx.to_vec() })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<E> {
        let (elo, ehi) = (ef::<E>(lo), ef::<E>(hi));
        self.unary(Op::Clamp { x: self.id, lo, hi }, |a| {
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x.max(elo).min(ehi)).collect()).unwrap()
        })
    }

    pub fn minimum(&self, other: &Var<E>) -> Var<E> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "minimum shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| if x <= y { x } else { y }).collect();
        let value = Tensor::new(a.shape().to_vec(), data).unwrap();
        let rg = self.requires(&[self.id, other.id]);
        self.tape().push(value, rg, Op::Minimum(self.id, other.id))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Var<E> {
        let value = self.value().reshape(shape).expect("reshape length mismatch");
        let rg = self.requires(&[self.id]);
        self.tape().push(value, rg, Op::Reshape(self.id))
    }

    /// Reverse pass from a scalar output. Returns gradients for every node
    /// that required them.
    pub fn backward(&self) -> Result<Gradients<E>, NumericsError> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[self.id].value.len(), 1, "backward requires a scalar output");
        if !nodes[self.id].value.data()[0].is_finite() {
            return Err(NumericsError::NonFinite { context: "backward seed" });
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![E::one()]);

        for i in (0..=self.id).rev() {
            if !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            backward_op(&nodes, i, &g, &mut grads);
        }

        // Repackage into tensors for the leaves (and anything else touched).
        let mut out: Vec<Option<Tensor<E>>> = Vec::with_capacity(self.id + 1);
        for (i, slot) in grads.into_iter().enumerate() {
            out.push(slot.map(|v| Tensor::new(nodes[i].value.shape().to_vec(), v).unwrap()));
        }
        Ok(Gradients { grads: out })
    }
}

fn acc_into<E: Element>(grads: &mut [Option<Vec<E>>], id: usize, len: usize) -> &mut Vec<E> {
    grads[id].get_or_insert_with(|| vec![E::zero(); len])
}

fn backward_op<E: Element>(nodes: &[Node<E>], id: usize, g: &[E], grads: &mut Vec<Option<Vec<E>>>) {
    let val = |i: usize| -> &Tensor<E> { &nodes[i].value };
    let wants = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {
            // keep the accumulated gradient; re-store it
            grads[id] = Some(g.to_vec());
        }
        Op::Add(a, b) => {
            for &p in [a, b].iter() {
                if wants(*p) {
                    let acc = acc_into(grads, *p, g.len());
                    for (x, &gi) in acc.iter_mut().zip(g) {
                        *x = *x + gi;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                let acc = acc_into(grads, *a, g.len());
                for (x, &gi) in acc.iter_mut().zip(g) {
                    *x = *x + gi;
                }
            }
            if wants(*b) {
                let acc = acc_into(grads, *b, g.len());
                for (x, &gi) in acc.iter_mut().zip(g) {
                    *x = *x - gi;
                }
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let bv = val(*b).data().to_vec();
                let acc = acc_into(grads, *a, g.len());
                for ((x, &gi), bi) in acc.iter_mut().zip(g).zip(bv) {
                    *x = *x + gi * bi;
                }
            }
            if wants(*b) {
                let av = val(*a).data().to_vec();
                let acc = acc_into(grads, *b, g.len());
                for ((x, &gi), ai) in acc.iter_mut().zip(g).zip(av) {
                    *x = *x + gi * ai;
                }
            }
        }
        Op::MulScalar(a, c) => {
            if wants(*a) {
                let ce = ef::<E>(*c);
                let acc = acc_into(grads, *a, g.len());
                for (x, &gi) in acc.iter_mut().zip(g) {
                    *x = *x + gi * ce;
                }
            }
        }
        Op::Affine { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n, i) = (xv.shape()[0], xv.shape()[1]);
            let o = wv.shape()[1];
            if wants(*x) {
                let mut dx = vec![E::zero(); n * i];
                matmul_nt_acc(g, wv.data(), &mut dx, n, o, i);
                let acc = acc_into(grads, *x, n * i);
                for (x_, d) in acc.iter_mut().zip(dx) {
                    *x_ = *x_ + d;
                }
            }
            if wants(*w) {
                let xd = xv.data().to_vec();
                let acc = acc_into(grads, *w, i * o);
                matmul_tn_acc(&xd, g, acc, n, i, o);
            }
            if wants(*b) {
                let acc = acc_into(grads, *b, o);
                for r in 0..n {
                    for c in 0..o {
                        acc[c] = acc[c] + g[r * o + c];
                    }
                }
            }
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if wants(*a) {
                let bd = bv.data().to_vec();
                let acc = acc_into(grads, *a, m * k);
                matmul_nt_acc(g, &bd, acc, m, n, k);
            }
            if wants(*b) {
                let ad = av.data().to_vec();
                let acc = acc_into(grads, *b, k * n);
                matmul_tn_acc(&ad, g, acc, m, k, n);
            }
        }
        Op::MatmulNT(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[0];
            if wants(*a) {
                let bd = bv.data().to_vec();
                let acc = acc_into(grads, *a, m * k);
                matmul_acc(g, &bd, acc, m, n, k);
            }
            if wants(*b) {
                // dB = g^T @ a  ([n,m] @ [m,k])
                let ad = av.data().to_vec();
                let acc = acc_into(grads, *b, n * k);
                matmul_tn_acc(g, &ad, acc, m, n, k);
            }
        }
        Op::Conv2d { input, weight, bias, stride, pad } => {
            let (xv, wv) = (val(*input), val(*weight));
            let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let (o, _, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
            let oh = conv_out_dim(h, kh, stride.0, pad.0);
            let ow = conv_out_dim(w, kw, stride.1, pad.1);
            let ckk = c * kh * kw;
            let spatial = oh * ow;
            let mut cols = vec![E::zero(); ckk * spatial];
            let mut dcols = vec![E::zero(); ckk * spatial];
            let want_x = wants(*input);
            let want_w = wants(*weight);
            let want_b = wants(*bias);

            let mut dinput = if want_x { vec![E::zero(); n * c * h * w] } else { Vec::new() };
            let mut dweight = if want_w { vec![E::zero(); o * ckk] } else { Vec::new() };
            let mut dbias = if want_b { vec![E::zero(); o] } else { Vec::new() };

            for s in 0..n {
                let gs = &g[s * o * spatial..(s + 1) * o * spatial];
                if want_w || want_x {
                    im2col(&xv.data()[s * c * h * w..(s + 1) * c * h * w], c, h, w, kh, kw, *stride, *pad, &mut cols);
                }
                if want_w {
                    matmul_nt_acc(gs, &cols, &mut dweight, o, spatial, ckk);
                }
                if want_x {
                    dcols.fill(E::zero());
                    matmul_tn_acc(wv.data(), gs, &mut dcols, o, ckk, spatial);
                    col2im_acc(&dcols, c, h, w, kh, kw, *stride, *pad, &mut dinput[s * c * h * w..(s + 1) * c * h * w]);
                }
                if want_b {
                    for ch in 0..o {
                        let mut s_: E = E::zero();
                        for p in &gs[ch * spatial..(ch + 1) * spatial] {
                            s_ = s_ + *p;
                        }
                        dbias[ch] = dbias[ch] + s_;
                    }
                }
            }
            if want_x {
                let acc = acc_into(grads, *input, n * c * h * w);
                for (x, d) in acc.iter_mut().zip(dinput) {
                    *x = *x + d;
                }
            }
            if want_w {
                let acc = acc_into(grads, *weight, o * ckk);
                for (x, d) in acc.iter_mut().zip(dweight) {
                    *x = *x + d;
                }
            }
            if want_b {
                let acc = acc_into(grads, *bias, o);
                for (x, d) in acc.iter_mut().zip(dbias) {
                    *x = *x + d;
                }
            }
        }
        Op::Relu(a) => {
            if wants(*a) {
                let av = val(*a).data().to_vec();
                let acc = acc_into(grads, *a, g.len());
                for ((x, &gi), ai) in acc.iter_mut().zip(g).zip(av) {
                    if ai > E::zero() {
                        *x = *x + gi;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if wants(*a) {
                let yv = nodes[id].value.data().to_vec();
                let acc = acc_into(grads, *a, g.len());
                for ((x, &gi), yi) in acc.iter_mut().zip(g).zip(yv) {
                    *x = *x + gi * yi * (E::one() - yi);
                }
            }
        }
        Op::Tanh(a) => {
            if wants(*a) {
                let yv = nodes[id].value.data().to_vec();
                let acc = acc_into(grads, *a, g.len());
                for ((x, &gi), yi) in acc.iter_mut().zip(g).zip(yv) {
                    *x = *x + gi * (E::one() - yi * yi);
                }
            }
        }
        Op::Exp(a) => {
            if wants(*a) {
                let yv = nodes[id].value.data().to_vec();
                let acc = acc_into(grads, *a, g.len());
                for ((x, &gi), yi) in acc.iter_mut().zip(g).zip(yv) {
                    *x = *x + gi * yi;
                }
            }
        }
        Op::Ln(a) => {
            if wants(*a) {
                let av = val(*a).data().to_vec();
                let acc = acc_into(grads, *a, g.len());
                for ((x, &gi), ai) in acc.iter_mut().zip(g).zip(av) {
                    *x = *x + gi / ai;
                }
            }
        }
        Op::LogSumExpRows(a) => {
            if wants(*a) {
                let av = val(*a).clone();
                let yv = nodes[id].value.data().to_vec();
                let (r, c) = (av.shape()[0], av.shape()[1]);
                let acc = acc_into(grads, *a, r * c);
                for k in 0..r {
                    let gk = g[k];
                    for j in 0..c {
                        let soft = (av.data()[k * c + j] - yv[k]).exp();
                        acc[k * c + j] = acc[k * c + j] + gk * soft;
                    }
                }
            }
        }
        Op::Dot(a, b) => {
            let gs = g[0];
            if wants(*a) {
                let bv = val(*b).data().to_vec();
                let acc = acc_into(grads, *a, bv.len());
                for (x, bi) in acc.iter_mut().zip(bv) {
                    *x = *x + gs * bi;
                }
            }
            if wants(*b) {
                let av = val(*a).data().to_vec();
                let acc = acc_into(grads, *b, av.len());
                for (x, ai) in acc.iter_mut().zip(av) {
                    *x = *x + gs * ai;
                }
            }
        }
        Op::L2NormalizeRows(a) => {
            if wants(*a) {
                let av = val(*a).clone();
                let yv = nodes[id].value.clone();
                let (r, c) = (av.shape()[0], av.shape()[1]);
                let acc = acc_into(grads, *a, r * c);
                for k in 0..r {
                    let xrow = &av.data()[k * c..(k + 1) * c];
                    let yrow = &yv.data()[k * c..(k + 1) * c];
                    let grow = &g[k * c..(k + 1) * c];
                    let norm: E = xrow.iter().map(|&x| x * x).sum::<E>().sqrt();
                    let ydotg: E = yrow.iter().zip(grow).map(|(&y, &gi)| y * gi).sum();
                    for j in 0..c {
                        acc[k * c + j] = acc[k * c + j] + (grow[j] - ydotg * yrow[j]) / norm;
                    }
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let alen = val(*a).len();
            if wants(*a) {
                let acc = acc_into(grads, *a, alen);
                for (x, &gi) in acc.iter_mut().zip(&g[..alen]) {
                    *x = *x + gi;
                }
            }
            if wants(*b) {
                let blen = val(*b).len();
                let acc = acc_into(grads, *b, blen);
                for (x, &gi) in acc.iter_mut().zip(&g[alen..]) {
                    *x = *x + gi;
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (r, c1, c2) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if wants(*a) {
                let acc = acc_into(grads, *a, r * c1);
                for k in 0..r {
                    for j in 0..c1 {
                        acc[k * c1 + j] = acc[k * c1 + j] + g[k * (c1 + c2) + j];
                    }
                }
            }
            if wants(*b) {
                let acc = acc_into(grads, *b, r * c2);
                for k in 0..r {
                    for j in 0..c2 {
                        acc[k * c2 + j] = acc[k * c2 + j] + g[k * (c1 + c2) + c1 + j];
                    }
                }
            }
        }
        Op::SliceCols { x, start, len } => {
            if wants(*x) {
                let xv = val(*x);
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                let acc = acc_into(grads, *x, r * c);
                for k in 0..r {
                    for j in 0..*len {
                        acc[k * c + start + j] = acc[k * c + start + j] + g[k * len + j];
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if wants(*a) {
                let n = val(*a).len();
                let acc = acc_into(grads, *a, n);
                for x in acc.iter_mut() {
                    *x = *x + g[0];
                }
            }
        }
        Op::MeanAll(a) => {
            if wants(*a) {
                let n = val(*a).len();
                let scale = g[0] / ef::<E>(n as f64);
                let acc = acc_into(grads, *a, n);
                for x in acc.iter_mut() {
                    *x = *x + scale;
                }
            }
        }
        Op::RowSum(a) => {
            if wants(*a) {
                let av = val(*a);
                let (r, c) = (av.shape()[0], av.shape()[1]);
                let acc = acc_into(grads, *a, r * c);
                for k in 0..r {
                    for j in 0..c {
                        acc[k * c + j] = acc[k * c + j] + g[k];
                    }
                }
            }
        }
        Op::BroadcastCol(a) => {
            if wants(*a) {
                let r = val(*a).len();
                let c = g.len() / r;
                let acc = acc_into(grads, *a, r);
                for k in 0..r {
                    let mut s = E::zero();
                    for j in 0..c {
                        s = s + g[k * c + j];
                    }
                    acc[k] = acc[k] + s;
                }
            }
        }
        Op::SelectCols { x, idx } => {
            if wants(*x) {
                let xv = val(*x);
                let c = xv.shape()[1];
                let acc = acc_into(grads, *x, xv.len());
                for (k, &j) in idx.iter().enumerate() {
                    acc[k * c + j] = acc[k * c + j] + g[k];
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            if wants(*x) {
                let (elo, ehi) = (ef::<E>(*lo), ef::<E>(*hi));
                let xv = val(*x).data().to_vec();
                let acc = acc_into(grads, *x, g.len());
                for ((a, &gi), xi) in acc.iter_mut().zip(g).zip(xv) {
                    if xi >= elo && xi <= ehi {
                        *a = *a + gi;
                    }
                }
            }
        }
        Op::Minimum(a, b) => {
            let av = val(*a).data().to_vec();
            let bv = val(*b).data().to_vec();
            if wants(*a) {
                let acc = acc_into(grads, *a, g.len());
                for i in 0..g.len() {
                    if av[i] <= bv[i] {
                        acc[i] = acc[i] + g[i];
                    }
                }
            }
            if wants(*b) {
                let acc = acc_into(grads, *b, g.len());
                for i in 0..g.len() {
                    if av[i] > bv[i] {
                        acc[i] = acc[i] + g[i];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if wants(*a) {
                let acc = acc_into(grads, *a, g.len());
                for (x, &gi) in acc.iter_mut().zip(g) {
                    *x = *x + gi;
                }
            }
        }
    }
}
