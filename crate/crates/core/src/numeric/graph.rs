//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.

use std::collections::HashMap;

use super::conv::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::scalar::matmul;
use super::{NumericError, Result, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

enum Op<T: Scalar> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMulNt(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    SpatialMean(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    L2Penalty(Var),
    GaussianLogProb {
        mean: Var,
        log_std: Var,
        actions: Tensor<T>,
    },
}

/// Operation tape. Build one per forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            bound: HashMap::new(),
        }
    }

    /// A graph for evaluation only: parameters bind as constants and no
    /// backward caches are kept.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. Binding the same id twice returns the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Leaf, true);
        self.bound.insert(id, v);
        v
    }

    pub(crate) fn bound_params(&self) -> &HashMap<ParamId, Var> {
        &self.bound
    }

    // ---- convolution & dense layers ------------------------------------------------------

    /// 2-D convolution, `[N,C,H,W] * [K,C,kh,kw] + [K] -> [N,K,H',W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        let geom = ConvGeom::new(
            "conv2d",
            [xs[0], xs[1], 1, xs[2], xs[3]],
            [ws[0], ws[1], 1, ws[2], ws[3]],
            stride,
            padding,
        )
        .map_err(|e| match e {
            NumericError::ShapeMismatch { .. } => mismatch("conv2d", &xs, &ws),
            other => other,
        })?;
        self.check_bias("conv2d", b, geom.k)?;
        let out_shape = vec![geom.n, geom.k, geom.oh, geom.ow];
        self.conv_node(x, w, b, geom, out_shape)
    }

    /// 3-D convolution, `[N,C,T,H,W] * [K,C,kt,kh,kw] + [K] -> [N,K,T-kt+1,H',W']`.
    ///
    /// Valid (unpadded, unit-stride) along time; `spatial_padding` zero padding
    /// and unit stride in space.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, spatial_padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 {
            return Err(mismatch("conv3d", &xs, &ws));
        }
        let geom = ConvGeom::new(
            "conv3d",
            [xs[0], xs[1], xs[2], xs[3], xs[4]],
            [ws[0], ws[1], ws[2], ws[3], ws[4]],
            1,
            spatial_padding,
        )?;
        self.check_bias("conv3d", b, geom.k)?;
        let out_shape = vec![geom.n, geom.k, geom.ot, geom.oh, geom.ow];
        self.conv_node(x, w, b, geom, out_shape)
    }

    fn check_bias(&self, op: &'static str, b: Var, k: usize) -> Result<()> {
        let bs = self.shape(b);
        if bs != [k] {
            return Err(mismatch(op, bs, &[k]));
        }
        Ok(())
    }

    fn conv_node(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom, shape: Vec<usize>) -> Result<Var> {
        let keep = self.grad_enabled && self.rg(w);
        let (out, cols) = conv::forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
            keep,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv { x, w, b, geom, cols }, rg))
    }

    /// `x [N,in] * w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(mismatch("linear", xs, ws));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let bias = self.value(b).data();
        let mut y: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        matmul(
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut y,
            n,
            inp,
            out,
            true,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, out], y)?, Op::Linear { x, w, b }, rg))
    }

    /// `a [M,K] * b[N,K]^T -> [M,N]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(mismatch("matmul_nt", as_, bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[0]);
        let mut c = vec![T::zero(); m * n];
        matmul(
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut c,
            m,
            k,
            n,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMulNt(a, b), rg))
    }

    // ---- elementwise ---------------------------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// Elementwise clamp into `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |p, q| if p <= q { p } else { q }, Op::Minimum(a, b))
    }

    // ---- shape ---------------------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let mut seen = vec![false; src.ndim()];
        if perm.len() != src.ndim()
            || perm
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(mismatch("permute", src.shape(), perm));
        }
        let data = permute_data(src.data(), src.shape(), perm);
        let shape: Vec<usize> = perm.iter().map(|&p| src.shape()[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(x);
        if src.ndim() == 0 || start > end || end > src.shape()[0] {
            return Err(NumericError::InvalidArgument(format!(
                "slice_rows {start}..{end} of shape {:?}",
                src.shape()
            )));
        }
        let value = src.rows(start, end);
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// `[N,C,H,W] -> [N,C]`, averaging over the two spatial axes.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.ndim() != 4 {
            return Err(mismatch("spatial_mean", src.shape(), &[0, 0, 0, 0]));
        }
        let (n, c) = (src.shape()[0], src.shape()[1]);
        let hw = src.shape()[2] * src.shape()[3];
        if hw == 0 {
            return Err(NumericError::Empty("spatial_mean"));
        }
        let inv = T::one() / T::from_usize(hw).unwrap();
        let data = src
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], data)?, Op::SpatialMean(x), rg))
    }

    // ---- reductions & losses -------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(NumericError::Empty("mean"));
        }
        let m = v.sum() / T::from_usize(v.numel()).unwrap();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(mismatch("mse_loss", p.shape(), t.shape()));
        }
        if p.numel() == 0 {
            return Err(NumericError::Empty("mse_loss"));
        }
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let m = s / T::from_usize(p.numel()).unwrap();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(m), Op::Mse(pred, target), rg))
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn softmax_cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.ndim() != 2 || l.shape()[0] != targets.len() {
            return Err(mismatch("softmax_cross_entropy_rows", l.shape(), &[targets.len()]));
        }
        let (n, k) = (l.shape()[0], l.shape()[1]);
        if n == 0 || targets.iter().any(|&t| t >= k) {
            return Err(NumericError::InvalidArgument(format!(
                "softmax_cross_entropy_rows: targets must index {k} classes over {n} >= 1 rows"
            )));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, row) in l.data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                z += e;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= z);
            total += z.ln() + max - row[targets[i]];
        }
        let loss = total / T::from_usize(n).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared L2 norm of the rows of `x` (leading axis = rows).
    pub fn l2_penalty(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let rows = v.shape().first().copied().unwrap_or(1);
        if rows == 0 {
            return Err(NumericError::Empty("l2_penalty"));
        }
        let s: T = v.data().iter().map(|&a| a * a).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s / T::from_usize(rows).unwrap()), Op::L2Penalty(x), rg))
    }

    /// Log-density of `actions [N,A]` under `N(mean [N,A], diag(exp(log_std [A]))^2)`,
    /// summed over the action axis: `-> [N]`.
    pub fn gaussian_log_prob(&mut self, mean: Var, log_std: Var, actions: Tensor<T>) -> Result<Var> {
        let (m, s) = (self.value(mean), self.value(log_std));
        if m.ndim() != 2 || m.shape() != actions.shape() || s.shape() != [m.shape()[1]] {
            return Err(mismatch("gaussian_log_prob", m.shape(), actions.shape()));
        }
        let a = m.shape()[1];
        let half_log_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
        let half = T::lit(0.5);
        let data = m
            .data()
            .chunks(a)
            .zip(actions.data().chunks(a))
            .map(|(mu, act)| {
                (0..a)
                    .map(|j| {
                        let ls = s.data()[j];
                        let z = (act[j] - mu[j]) / ls.exp();
                        -half * z * z - ls - half_log_2pi
                    })
                    .sum()
            })
            .collect();
        let n = m.shape()[0];
        let rg = self.rg(mean) || self.rg(log_std);
        Ok(self.push(
            Tensor::new(vec![n], data)?,
            Op::GaussianLogProb { mean, log_std, actions },
            rg,
        ))
    }

    // ---- backward ------------------------------------------------------------------------

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let out = self.value(loss);
        if out.numel() != 1 {
            return Err(NumericError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        if !out.is_finite() {
            return Err(NumericError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(out.shape().to_vec(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            self.propagate(i, g, lower)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, lower: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut lower[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v).to_vec(), data);
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, cols } => {
                let r = conv::backward(
                    gd,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    cols,
                    geom,
                    self.rg(*x),
                    self.rg(*w),
                    self.rg(*b),
                );
                if let Some(d) = r.dx {
                    acc(*x, like(*x, d)?);
                }
                if let Some(d) = r.dw {
                    acc(*w, like(*w, d)?);
                }
                if let Some(d) = r.db {
                    acc(*b, like(*b, d)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * inp];
                    matmul(gd, false, self.value(*w).data(), false, &mut dx, n, out, inp, false);
                    acc(*x, like(*x, dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); out * inp];
                    matmul(gd, true, self.value(*x).data(), false, &mut dw, out, n, inp, false);
                    acc(*w, like(*w, dw)?);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); out];
                    for row in gd.chunks(out) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    acc(*b, like(*b, db)?);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul(gd, false, self.value(*b).data(), false, &mut da, m, n, k, false);
                    acc(*a, like(*a, da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); n * k];
                    matmul(gd, true, self.value(*a).data(), false, &mut db, n, m, k, false);
                    acc(*b, like(*b, db)?);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                acc(*x, like(*x, d)?);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                acc(*x, like(*x, d)?);
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&g, &y)| g * y).collect();
                acc(*x, like(*x, d)?);
            }
            Op::Scale(x, c) => acc(*x, like(*x, gd.iter().map(|&g| g * *c).collect())?),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, like(*x, gd.to_vec())?),
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                    .collect();
                acc(*x, like(*x, d)?);
            }
            Op::Add(a, b) => {
                acc(*a, like(*a, gd.to_vec())?);
                acc(*b, like(*b, gd.to_vec())?);
            }
            Op::Sub(a, b) => {
                acc(*a, like(*a, gd.to_vec())?);
                acc(*b, like(*b, gd.iter().map(|&g| -g).collect())?);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    acc(*a, like(*a, gd.iter().zip(bv).map(|(&g, &q)| g * q).collect())?);
                }
                if self.rg(*b) {
                    acc(*b, like(*b, gd.iter().zip(av).map(|(&g, &p)| g * p).collect())?);
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let pick_a: Vec<bool> = av.iter().zip(bv).map(|(p, q)| p <= q).collect();
                let da = gd
                    .iter()
                    .zip(&pick_a)
                    .map(|(&g, &s)| if s { g } else { T::zero() })
                    .collect();
                let db = gd
                    .iter()
                    .zip(&pick_a)
                    .map(|(&g, &s)| if s { T::zero() } else { g })
                    .collect();
                acc(*a, like(*a, da)?);
                acc(*b, like(*b, db)?);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*x, like(*x, permute_data(gd, node.value.shape(), &inv))?);
            }
            Op::SliceRows { x, start } => {
                let xs = self.shape(*x);
                let row: usize = xs[1..].iter().product();
                let mut d = vec![T::zero(); self.value(*x).numel()];
                d[start * row..start * row + gd.len()].copy_from_slice(gd);
                acc(*x, like(*x, d)?);
            }
            Op::SpatialMean(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let d = gd.iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect();
                acc(*x, like(*x, d)?);
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x).to_vec(), gd[0])),
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                acc(*x, Tensor::full(self.shape(*x).to_vec(), gd[0] / n));
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let c = gd[0] * T::lit(2.0) / T::from_usize(pv.len()).unwrap();
                let d: Vec<T> = pv.iter().zip(tv).map(|(&a, &b)| c * (a - b)).collect();
                if self.rg(*t) {
                    acc(*t, like(*t, d.iter().map(|&v| -v).collect())?);
                }
                acc(*p, like(*p, d)?);
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let c = gd[0] / T::from_usize(targets.len()).unwrap();
                let mut d: Vec<T> = probs.iter().map(|&p| p * c).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * k + t] -= c;
                }
                acc(*logits, like(*logits, d)?);
            }
            Op::L2Penalty(x) => {
                let xv = self.value(*x);
                let rows = xv.shape().first().copied().unwrap_or(1);
                let c = gd[0] * T::lit(2.0) / T::from_usize(rows).unwrap();
                acc(*x, like(*x, xv.data().iter().map(|&v| c * v).collect())?);
            }
            Op::GaussianLogProb { mean, log_std, actions } => {
                let a = self.shape(*mean)[1];
                let (mv, sv) = (self.value(*mean).data(), self.value(*log_std).data());
                let mut dm = vec![T::zero(); mv.len()];
                let mut ds = vec![T::zero(); a];
                for (r, &g) in gd.iter().enumerate() {
                    for j in 0..a {
                        let idx = r * a + j;
                        let inv_std = (-sv[j]).exp();
                        let z = (actions.data()[idx] - mv[idx]) * inv_std;
                        dm[idx] = g * z * inv_std;
                        ds[j] += g * (z * z - T::one());
                    }
                }
                acc(*mean, like(*mean, dm)?);
                acc(*log_std, like(*log_std, ds)?);
            }
        }
        Ok(())
    }
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; `None` when `v` is off the loss path or
    /// does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero-filled when `v` is off the loss path.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
    }

    /// One gradient per parameter in `store`, in id order. Parameters that were
    /// never bound on `graph` get zeros.
    pub fn params(&self, graph: &Graph<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, p)| match graph.bound_params().get(&id) {
                Some(&v) => self.wrt(graph, v),
                None => Tensor::zeros(p.value.shape().to_vec()),
            })
            .collect()
    }
}
