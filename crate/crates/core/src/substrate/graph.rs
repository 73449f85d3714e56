//! Tape-based reverse-mode differentiation over the operations the model needs.

use crate::error::{contract, Result};
use crate::losses;

use super::ops::{self, ConvGeometry, LayerNormCache, Padding};
use super::{ParamId, ParamSet, RngStream, Scalar, Tensor};

/// A node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Variable,
    Param(ParamId),
    Conv { x: Var, k: Var, b: Var, geom: ConvGeometry },
    ConvT { x: Var, k: Var, b: Var, geom: ConvGeometry },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Slice { x: Var, offset: usize },
    Reshape(Var),
    LayerNorm { x: Var, g: Var, b: Var, cache: LayerNormCache<T> },
    Mask { x: Var, mask: Vec<T> },
    SeqMse { ys: Vec<Var>, targets: Vec<Tensor<T>> },
    SeqGd { ys: Vec<Var>, targets: Vec<Tensor<T>> },
    SumSquares(Var),
    Weighted(Vec<(Var, T)>),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

/// Records a forward computation so that gradients can be propagated back to parameters and
/// variables. Parameter values are read from the borrowed [`ParamSet`], not copied.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

/// Output of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    /// Per-parameter gradient, indexed like the [`ParamSet`]; `None` when unused.
    pub params: Vec<Option<Tensor<T>>>,
    vars: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a [`Graph::variable`] leaf.
    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.iter().find(|(w, _)| *w == v).map(|(_, t)| t)
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph { params, nodes: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Input, value, false)
    }

    /// Leaf whose gradient is reported in [`Gradients::var`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Variable, value, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeometry::conv(self.shape(x), self.shape(k), stride, padding)?;
        let y = ops::conv2d(self.value(x), self.value(k), self.value(b), stride, padding)?;
        let ng = self.needs(x) || self.needs(k) || self.needs(b);
        Ok(self.push(Op::Conv { x, k, b, geom }, y, ng))
    }

    pub fn transposed_conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeometry::transposed(self.shape(x), self.shape(k), stride, padding)?;
        let y = ops::transposed_conv2d(self.value(x), self.value(k), self.value(b), stride, padding)?;
        let ng = self.needs(x) || self.needs(k) || self.needs(b);
        Ok(self.push(Op::ConvT { x, k, b, geom }, y, ng))
    }

    /// `w · x + b` with `w` of shape `[out, in]` and `x` a vector of length `in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let &[out, inp] = wv.shape() else {
            return Err(contract!("linear weight must be [out,in], got {:?}", wv.shape()));
        };
        if xv.len() != inp {
            return Err(contract!("linear input has {} features, weight expects {}", xv.len(), inp));
        }
        let mut y = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [out] {
                    return Err(contract!("linear bias shape {:?}, expected [{}]", bv.shape(), out));
                }
                bv.data().to_vec()
            }
            None => vec![T::zero(); out],
        };
        super::gemm(false, false, out, inp, 1, wv.data(), xv.data(), T::one(), &mut y);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let y = Tensor::new(&[out], y)?;
        Ok(self.push(Op::Linear { x, w, b }, y, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), y, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), y, ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::sigmoid);
        let ng = self.needs(x);
        self.push(Op::Sigmoid(x), y, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.tanh());
        let ng = self.needs(x);
        self.push(Op::Tanh(x), y, ng)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| contract!("concat of zero tensors"))?;
        let rest = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != rest[..] {
                return Err(contract!("concat: trailing extents {:?} vs {:?}", &v.shape()[1..], rest));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(rest);
        let ng = parts.iter().any(|&p| self.needs(p));
        let y = Tensor::new(&shape, data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), y, ng))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(contract!("slice {}..{} out of range for leading extent {}", start, start + len, shape[0]));
        }
        let per: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * per..(start + len) * per].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let ng = self.needs(x);
        let y = Tensor::new(&out_shape, data)?;
        Ok(self.push(Op::Slice { x, offset: start * per }, y, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Reshape(x), y, ng))
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, epsilon: f64) -> Result<Var> {
        let (y, cache) = ops::layer_norm_forward(self.value(x), self.value(g), self.value(b), epsilon)?;
        let ng = self.needs(x) || self.needs(g) || self.needs(b);
        Ok(self.push(Op::LayerNorm { x, g, b, cache }, y, ng))
    }

    /// Inverted dropout; identity when not training or when `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut RngStream, training: bool) -> Result<Var> {
        ops::check_dropout_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask::<T>(self.value(x).len(), rate, rng);
        let y = Tensor::new(
            self.shape(x),
            self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )?;
        let ng = self.needs(x);
        Ok(self.push(Op::Mask { x, mask }, y, ng))
    }

    /// Frame-sequence squared error, summed over pixels and averaged over frames.
    pub fn seq_mse(&mut self, ys: &[Var], targets: &[Tensor<T>]) -> Result<Var> {
        let frames: Vec<&Tensor<T>> = ys.iter().map(|&y| self.value(y)).collect();
        let value = losses::mse_loss(&frames, &targets.iter().collect::<Vec<_>>())?;
        let ng = ys.iter().any(|&y| self.needs(y));
        Ok(self.push(Op::SeqMse { ys: ys.to_vec(), targets: targets.to_vec() }, Tensor::scalar(value), ng))
    }

    /// Frame-sequence gradient difference loss.
    pub fn seq_gd(&mut self, ys: &[Var], targets: &[Tensor<T>]) -> Result<Var> {
        let frames: Vec<&Tensor<T>> = ys.iter().map(|&y| self.value(y)).collect();
        let value = losses::gradient_difference_loss(&frames, &targets.iter().collect::<Vec<_>>())?;
        let ng = ys.iter().any(|&y| self.needs(y));
        Ok(self.push(Op::SeqGd { ys: ys.to_vec(), targets: targets.to_vec() }, Tensor::scalar(value), ng))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum_squares());
        let ng = self.needs(x);
        self.push(Op::SumSquares(x), y, ng)
    }

    /// Linear combination of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(contract!("weighted_sum expects scalar terms, got shape {:?}", t.shape()));
            }
            total += w * t.data()[0];
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Op::Weighted(terms.to_vec()), Tensor::scalar(total), ng))
    }

    /// Propagates d(root)/d(node) back through the tape. `root` must be a scalar.
    pub fn backward(mut self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(contract!("backward root must be scalar, got shape {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        let mut out = Gradients { params: vec![None; self.params.len()], vars: Vec::new() };

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Input);
            match &op {
                Op::Input => {}
                Op::Variable => out.vars.push((Var(i), g)),
                Op::Param(id) => out.params[id.0] = Some(g),
                Op::Conv { x, k, b, geom } => {
                    let (dx, dk, db) = ops::conv_backward(
                        self.value(*x).data(),
                        self.value(*k).data(),
                        g.data(),
                        geom,
                        self.needs(*x),
                    );
                    if let Some(dx) = dx {
                        self.acc_raw(&mut grads, *x, dx);
                    }
                    self.acc_raw(&mut grads, *k, dk);
                    self.acc_raw(&mut grads, *b, db);
                }
                Op::ConvT { x, k, b, geom } => {
                    let (dx, dk, db) = ops::convt_backward(
                        self.value(*x).data(),
                        self.value(*k).data(),
                        g.data(),
                        geom,
                        self.needs(*x),
                    );
                    if let Some(dx) = dx {
                        self.acc_raw(&mut grads, *x, dx);
                    }
                    self.acc_raw(&mut grads, *k, dk);
                    self.acc_raw(&mut grads, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let (out_n, in_n) = (g.len(), self.value(*x).len());
                    if self.needs(*w) {
                        let mut dw = vec![T::zero(); out_n * in_n];
                        super::gemm(false, false, out_n, 1, in_n, g.data(), self.value(*x).data(), T::zero(), &mut dw);
                        self.acc_raw(&mut grads, *w, dw);
                    }
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); in_n];
                        super::gemm(true, false, in_n, out_n, 1, self.value(*w).data(), g.data(), T::zero(), &mut dx);
                        self.acc_raw(&mut grads, *x, dx);
                    }
                    if let Some(b) = b {
                        self.acc_raw(&mut grads, *b, g.data().to_vec());
                    }
                }
                Op::Add(a, b) => {
                    self.acc_raw(&mut grads, *a, g.data().to_vec());
                    self.acc_raw(&mut grads, *b, g.data().to_vec());
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let d = zip(g.data(), self.value(*b).data(), |p, q| p * q);
                        self.acc_raw(&mut grads, *a, d);
                    }
                    if self.needs(*b) {
                        let d = zip(g.data(), self.value(*a).data(), |p, q| p * q);
                        self.acc_raw(&mut grads, *b, d);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let d = zip(g.data(), y.data(), |p, s| p * s * (T::one() - s));
                    self.acc_raw(&mut grads, *x, d);
                }
                Op::Tanh(x) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let d = zip(g.data(), y.data(), |p, t| p * (T::one() - t * t));
                    self.acc_raw(&mut grads, *x, d);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        self.acc_raw(&mut grads, p, g.data()[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::Slice { x, offset } => {
                    if self.needs(*x) {
                        let n = self.value(*x).len();
                        let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(self.nodes_shape(*x)));
                        debug_assert_eq!(slot.len(), n);
                        for (a, &b) in slot.data_mut()[*offset..*offset + g.len()].iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
                Op::Reshape(x) => self.acc_raw(&mut grads, *x, g.into_data()),
                Op::LayerNorm { x, g: gain, b, cache } => {
                    let (dx, dg, db) = ops::layer_norm_backward(cache, self.value(*gain).data(), g.data());
                    self.acc_raw(&mut grads, *x, dx);
                    self.acc_raw(&mut grads, *gain, dg);
                    self.acc_raw(&mut grads, *b, db);
                }
                Op::Mask { x, mask } => {
                    let d = zip(g.data(), mask, |p, m| p * m);
                    self.acc_raw(&mut grads, *x, d);
                }
                Op::SeqMse { ys, targets } | Op::SeqGd { ys, targets } => {
                    let scale = g.data()[0];
                    let frames: Vec<&Tensor<T>> = ys.iter().map(|&y| self.value(y)).collect();
                    let tgts: Vec<&Tensor<T>> = targets.iter().collect();
                    let frame_grads = if matches!(op, Op::SeqMse { .. }) {
                        losses::mse_loss_grad(&frames, &tgts)?
                    } else {
                        losses::gradient_difference_loss_grad(&frames, &tgts)?
                    };
                    for (&y, mut d) in ys.iter().zip(frame_grads) {
                        d.scale(scale);
                        self.acc_raw(&mut grads, y, d.into_data());
                    }
                }
                Op::SumSquares(x) => {
                    let s = g.data()[0] + g.data()[0];
                    let d = self.value(*x).data().iter().map(|&v| s * v).collect();
                    self.acc_raw(&mut grads, *x, d);
                }
                Op::Weighted(terms) => {
                    for &(v, w) in terms {
                        self.acc_raw(&mut grads, v, vec![w * g.data()[0]]);
                    }
                }
            }
            self.nodes[i].op = op;
        }
        Ok(out)
    }

    fn nodes_shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn acc_raw(&self, grads: &mut [Option<Tensor<T>>], v: Var, d: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(slot) => {
                for (a, b) in slot.data_mut().iter_mut().zip(d) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.value(v).shape(), d).expect("gradient shape"));
            }
        }
    }
}

fn zip<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect()
}
