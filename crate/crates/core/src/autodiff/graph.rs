//! Tape-based reverse-mode differentiation over coarse tensor ops.
//!
//! A [`Graph`] records every op as a node holding its forward value. Nodes
//! only carry gradient when some ancestor is a parameter or a tracked input,
//! so branches that never touch a tracked leaf receive exactly zero gradient.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{self, Conv1dGeom, Conv2dGeom, ConvT2dGeom, Padding};
use crate::deformation::{sampling, smoothing};
use crate::error::{Error, Result};
use crate::losses::lcc;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Offset(Var),
    LeakyRelu(Var, F),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Select(Var, usize),
    Transpose(Var),
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
    },
    ConvT2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvT2dGeom,
    },
    Conv1d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: Conv1dGeom,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SmoothPlanes {
        x: Var,
        kernel: Rc<Vec<F>>,
    },
    SmoothLeading {
        x: Var,
        kernel: Rc<Vec<F>>,
    },
    Compose(Var, Var),
    Warp {
        img: Var,
        disp: Var,
    },
    Lcc {
        a: Var,
        b: Var,
        window: usize,
    },
    Kl {
        mu: Var,
        logvar: Var,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
    param: Option<String>,
}

/// Computation graph for one forward/backward pass.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn spatial(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        _ => Err(Error::shape(op, format!("expected [C,H,W] or [H,W], got {shape:?}"))),
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Untracked leaf; never receives gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf without a parameter name (used by gradient checks).
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, t: Tensor<F>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn binary(&mut self, a: Var, b: Var, op_name: &'static str, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        check_same(op_name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(t, op, tr))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Sum of several same-shaped vars.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let mut acc = *vars
            .first()
            .ok_or_else(|| Error::InvalidArgument("add_all of nothing".into()))?;
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a).map(|x| x * s);
        let tr = self.tracked(&[a]);
        self.push(t, Op::Scale(a, s), tr)
    }

    /// Adds a constant tensor; gradient passes through to `a` only.
    pub fn offset(&mut self, a: Var, c: &Tensor<F>) -> Result<Var> {
        check_same("offset", self.shape(a), c.shape())?;
        let data = self.value(a).data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(c.shape(), data)?;
        let tr = self.tracked(&[a]);
        Ok(self.push(t, Op::Offset(a), tr))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let t = self.value(a).map(|x| if x > F::zero() { x } else { x * slope });
        let tr = self.tracked(&[a]);
        self.push(t, Op::LeakyRelu(a, slope), tr)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        let tr = self.tracked(&[a]);
        self.push(t, Op::Exp(a), tr)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let tr = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tr)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<F>() / F::of_usize(v.len());
        let tr = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), tr)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let tr = self.tracked(&[a]);
        Ok(self.push(t, Op::Reshape(a), tr))
    }

    /// Concatenation along axis 0; trailing extents must agree.
    pub fn concat(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let tail: Vec<usize> = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in vars {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("trailing extents {:?} vs {:?}", &s[1.min(s.len())..], tail)));
            }
            lead += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::new(&shape, data)?;
        let tr = self.tracked(vars);
        Ok(self.push(t, Op::Concat(vars.to_vec()), tr))
    }

    /// Stacks same-shaped vars along a new leading axis.
    pub fn stack(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of nothing".into()))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(vars.len() * self.value(*first).len());
        for &v in vars {
            check_same("stack", self.shape(v), &inner)?;
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![vars.len()];
        shape.extend(inner);
        let t = Tensor::new(&shape, data)?;
        let tr = self.tracked(vars);
        Ok(self.push(t, Op::Stack(vars.to_vec()), tr))
    }

    /// Slice `index` along axis 0, dropping that axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || index >= s[0] {
            return Err(Error::shape("select", format!("index {index} out of {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(a).data()[index * inner..(index + 1) * inner].to_vec();
        let t = Tensor::new(&s[1..], data)?;
        let tr = self.tracked(&[a]);
        Ok(self.push(t, Op::Select(a, index), tr))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = match *self.shape(a) {
            [r, c] => (r, c),
            ref s => return Err(Error::shape("transpose", format!("expected rank 2, got {s:?}"))),
        };
        let src = self.value(a).data();
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], data)?;
        let tr = self.tracked(&[a]);
        Ok(self.push(t, Op::Transpose(a), tr))
    }

    /// 2-D convolution of `x: [C,H,W]` with `k: [F,C,k,k]` (odd `k`), optional bias `[F]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: Padding) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::shape("conv2d", format!("input must be [C,H,W], got {s:?}"))),
        };
        let (f, kc, kh, kw) = match *self.shape(k) {
            [f, kc, kh, kw] => (f, kc, kh, kw),
            ref s => return Err(Error::shape("conv2d", format!("kernel must be [F,C,k,k], got {s:?}"))),
        };
        if kc != c {
            return Err(Error::shape("conv2d", format!("channel dimension: input C={c}, kernel C={kc}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel extent must be square and odd, got {kh}x{kw}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::InvalidArgument(format!("conv2d stride {stride} not in {{1,2}}")));
        }
        if let Some(b) = b {
            check_same("conv2d bias", self.shape(b), &[f])?;
        }
        let geom = Conv2dGeom::new(c, h, w, f, kh, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("spatial extent {h}x{w} too small for kernel {kh}")))?;
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(k).data(), b.map(|b| self.value(b).data()));
        let t = Tensor::new(&[f, geom.oh, geom.ow], out)?;
        let mut deps = vec![x, k];
        deps.extend(b);
        let tr = self.tracked(&deps);
        Ok(self.push(t, Op::Conv2d { x, k, b, geom }, tr))
    }

    /// Transposed convolution, kernel `[F,C,k,k]`, output extent `(n-1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::shape("conv_transpose2d", format!("input must be [C,H,W], got {s:?}"))),
        };
        let (f, kc, kh, kw) = match *self.shape(k) {
            [f, kc, kh, kw] => (f, kc, kh, kw),
            ref s => return Err(Error::shape("conv_transpose2d", format!("kernel must be [F,C,k,k], got {s:?}"))),
        };
        if kc != c {
            return Err(Error::shape("conv_transpose2d", format!("channel dimension: input C={c}, kernel C={kc}")));
        }
        if kh != kw {
            return Err(Error::shape("conv_transpose2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if let Some(b) = b {
            check_same("conv_transpose2d bias", self.shape(b), &[f])?;
        }
        let geom = ConvT2dGeom::new(c, h, w, f, kh, stride, pad)
            .ok_or_else(|| Error::shape("conv_transpose2d", "padding exceeds kernel support".to_string()))?;
        let out = kernels::conv_t2d_forward(&geom, self.value(x).data(), self.value(k).data(), b.map(|b| self.value(b).data()));
        let t = Tensor::new(&[f, geom.oh, geom.ow], out)?;
        let mut deps = vec![x, k];
        deps.extend(b);
        let tr = self.tracked(&deps);
        Ok(self.push(t, Op::ConvT2d { x, k, b, geom }, tr))
    }

    /// Centred dilated 1-D convolution with zero padding: `[C,T] * [F,C,k] -> [F,T]`.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (c, t) = match *self.shape(x) {
            [c, t] => (c, t),
            ref s => return Err(Error::shape("conv1d", format!("input must be [C,T], got {s:?}"))),
        };
        if t < 1 {
            return Err(Error::shape("conv1d", "sequence length T must be >= 1".to_string()));
        }
        let (f, kc, kk) = match *self.shape(k) {
            [f, kc, kk] => (f, kc, kk),
            ref s => return Err(Error::shape("conv1d", format!("kernel must be [F,C,k], got {s:?}"))),
        };
        if kc != c {
            return Err(Error::shape("conv1d", format!("channel dimension: input C={c}, kernel C={kc}")));
        }
        if kk % 2 == 0 || dilation == 0 {
            return Err(Error::InvalidArgument(format!("conv1d needs odd taps and dilation >= 1, got k={kk}, d={dilation}")));
        }
        if let Some(b) = b {
            check_same("conv1d bias", self.shape(b), &[f])?;
        }
        let geom = Conv1dGeom { c, t, f, k: kk, dilation };
        let out = kernels::conv1d_forward(&geom, self.value(x).data(), self.value(k).data(), b.map(|b| self.value(b).data()));
        let tt = Tensor::new(&[f, t], out)?;
        let mut deps = vec![x, k];
        deps.extend(b);
        let tr = self.tracked(&deps);
        Ok(self.push(tt, Op::Conv1d { x, k, b, geom }, tr))
    }

    /// Affine map `W x + b`, `x: [n]`, `W: [m,n]`, `b: [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let n = match *self.shape(x) {
            [n] => n,
            ref s => return Err(Error::shape("dense", format!("input must be a vector, got {s:?}"))),
        };
        let m = match *self.shape(w) {
            [m, wn] if wn == n => m,
            ref s => return Err(Error::shape("dense", format!("weights {s:?} incompatible with input length {n}"))),
        };
        if let Some(b) = b {
            check_same("dense bias", self.shape(b), &[m])?;
        }
        let out = kernels::dense_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), m, n);
        let t = Tensor::new(&[m], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let tr = self.tracked(&deps);
        Ok(self.push(t, Op::Dense { x, w, b }, tr))
    }

    /// Gaussian smoothing of every trailing `H×W` plane.
    pub fn smooth_planes(&mut self, x: Var, kernel: Rc<Vec<F>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("smooth_planes", format!("need at least 2 axes, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let out = smoothing::smooth_planes(self.value(x).data(), h, w, &kernel);
        let t = Tensor::new(&s, out)?;
        let tr = self.tracked(&[x]);
        Ok(self.push(t, Op::SmoothPlanes { x, kernel }, tr))
    }

    /// Gaussian smoothing along axis 0.
    pub fn smooth_leading(&mut self, x: Var, kernel: Rc<Vec<F>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("smooth_leading", "rank-0 input".to_string()));
        }
        let out = smoothing::smooth_leading(self.value(x).data(), s[0], &kernel);
        let t = Tensor::new(&s, out)?;
        let tr = self.tracked(&[x]);
        Ok(self.push(t, Op::SmoothLeading { x, kernel }, tr))
    }

    /// Displacement of `a ∘ b` for `[2,H,W]` displacement fields.
    pub fn compose(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("compose", self.shape(a), self.shape(b))?;
        let (c, h, w) = spatial("compose", self.shape(a))?;
        if c != 2 {
            return Err(Error::shape("compose", format!("displacements need 2 channels, got {c}")));
        }
        let out = sampling::compose_forward(self.value(a).data(), self.value(b).data(), h, w);
        let t = Tensor::new(&[2, h, w], out)?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Compose(a, b), tr))
    }

    /// Bilinear resampling of `img: [C,H,W]` at `x + disp(x)`.
    pub fn warp(&mut self, img: Var, disp: Var) -> Result<Var> {
        let ishape = self.shape(img).to_vec();
        let (c, h, w) = spatial("warp", &ishape)?;
        let (dc, dh, dw) = spatial("warp", self.shape(disp))?;
        if dc != 2 || dh != h || dw != w {
            return Err(Error::shape("warp", format!("image {h}x{w} vs displacement [{dc},{dh},{dw}]")));
        }
        let out = sampling::warp_forward(self.value(img).data(), c, self.value(disp).data(), h, w);
        let t = Tensor::new(&ishape, out)?;
        let tr = self.tracked(&[img, disp]);
        Ok(self.push(t, Op::Warp { img, disp }, tr))
    }

    /// Mean squared local normalised cross-correlation of two single-channel images.
    pub fn lcc(&mut self, a: Var, b: Var, window: usize) -> Result<Var> {
        check_same("lcc", self.shape(a), self.shape(b))?;
        let (c, h, w) = spatial("lcc", self.shape(a))?;
        if c != 1 {
            return Err(Error::shape("lcc", format!("single-channel images required, got {c}")));
        }
        if window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("lcc window must be odd, got {window}")));
        }
        let v = lcc::lcc_forward(self.value(a).data(), self.value(b).data(), h, w, window);
        let tr = self.tracked(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Lcc { a, b, window }, tr))
    }

    /// `KL(N(mu, exp(logvar)) || N(0, I))`.
    pub fn kl_unit_gaussian(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        check_same("kl", self.shape(mu), self.shape(logvar))?;
        let half = F::of(0.5);
        let v = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(logvar).data())
            .map(|(&m, &lv)| half * (m * m + lv.exp() - F::one() - lv))
            .sum();
        let tr = self.tracked(&[mu, logvar]);
        Ok(self.push(Tensor::scalar(v), Op::Kl { mu, logvar }, tr))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![F::one(); self.nodes[loss.0].value.len()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut [F]> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]).as_mut_slice())
    }

    fn take_buf(&self, grads: &mut [Option<Vec<F>>], v: Var) -> Option<Vec<F>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].take().unwrap_or_else(|| vec![F::zero(); n]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl Fn(usize) -> F) {
        if let Some(b) = self.buf(grads, v) {
            for (i, x) in b.iter_mut().enumerate() {
                *x += f(i);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |j| g[j]);
                self.accumulate(grads, *b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |j| g[j]);
                self.accumulate(grads, *b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |j| g[j] * vb[j]);
                self.accumulate(grads, *b, |j| g[j] * va[j]);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |j| g[j] * *s),
            Op::Offset(a) | Op::Reshape(a) => self.accumulate(grads, *a, |j| g[j]),
            Op::LeakyRelu(a, s) => {
                let va = val(*a);
                self.accumulate(grads, *a, |j| if va[j] > F::zero() { g[j] } else { g[j] * *s });
            }
            Op::Exp(a) => {
                let out = node.value.data();
                self.accumulate(grads, *a, |j| g[j] * out[j]);
            }
            Op::Sum(a) => self.accumulate(grads, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = F::of_usize(self.nodes[a.0].value.len());
                self.accumulate(grads, *a, |_| g[0] / n);
            }
            Op::Concat(vars) | Op::Stack(vars) => {
                let mut off = 0;
                for v in vars {
                    let n = self.nodes[v.0].value.len();
                    self.accumulate(grads, *v, |j| g[off + j]);
                    off += n;
                }
            }
            Op::Select(a, index) => {
                let n = node.value.len();
                let off = index * n;
                if let Some(b) = self.buf(grads, *a) {
                    for (x, &gv) in b[off..off + n].iter_mut().zip(g) {
                        *x += gv;
                    }
                }
            }
            Op::Transpose(a) => {
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                // output [c, r] from input [r, c]
                self.accumulate(grads, *a, |idx| {
                    let (ii, jj) = (idx / c, idx % c);
                    g[jj * r + ii]
                });
            }
            Op::Conv2d { x, k, b, geom } => {
                let (vx, vk) = (val(*x), val(*k));
                let mut gx = self.take_buf(grads, *x);
                let mut gk = self.take_buf(grads, *k);
                let mut gb = b.and_then(|b| self.take_buf(grads, b));
                kernels::conv2d_backward(geom, vx, vk, g, gx.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut());
                store(grads, *x, gx);
                store(grads, *k, gk);
                if let Some(b) = b {
                    store(grads, *b, gb);
                }
            }
            Op::ConvT2d { x, k, b, geom } => {
                let (vx, vk) = (val(*x), val(*k));
                let mut gx = self.take_buf(grads, *x);
                let mut gk = self.take_buf(grads, *k);
                let mut gb = b.and_then(|b| self.take_buf(grads, b));
                kernels::conv_t2d_backward(geom, vx, vk, g, gx.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut());
                store(grads, *x, gx);
                store(grads, *k, gk);
                if let Some(b) = b {
                    store(grads, *b, gb);
                }
            }
            Op::Conv1d { x, k, b, geom } => {
                let (vx, vk) = (val(*x), val(*k));
                let mut gx = self.take_buf(grads, *x);
                let mut gk = self.take_buf(grads, *k);
                let mut gb = b.and_then(|b| self.take_buf(grads, b));
                kernels::conv1d_backward(geom, vx, vk, g, gx.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut());
                store(grads, *x, gx);
                store(grads, *k, gk);
                if let Some(b) = b {
                    store(grads, *b, gb);
                }
            }
            Op::Dense { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let (m, n) = (vw.len() / vx.len(), vx.len());
                let mut gx = self.take_buf(grads, *x);
                let mut gw = self.take_buf(grads, *w);
                let mut gb = b.and_then(|b| self.take_buf(grads, b));
                kernels::dense_backward(vx, vw, g, m, n, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                store(grads, *x, gx);
                store(grads, *w, gw);
                if let Some(b) = b {
                    store(grads, *b, gb);
                }
            }
            Op::SmoothPlanes { x, kernel } => {
                let s = node.value.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(b) = self.buf(grads, *x) {
                    smoothing::smooth_planes_adjoint(g, b, h, w, kernel);
                }
            }
            Op::SmoothLeading { x, kernel } => {
                let t = node.value.shape()[0];
                if let Some(b) = self.buf(grads, *x) {
                    smoothing::smooth_leading_adjoint(g, b, t, kernel);
                }
            }
            Op::Compose(a, b) => {
                let s = node.value.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let (va, vb) = (val(*a), val(*b));
                let mut ga = self.buf(grads, *a).map(|_| vec![F::zero(); va.len()]);
                let mut gb = self.buf(grads, *b).map(|_| vec![F::zero(); vb.len()]);
                sampling::compose_backward(va, vb, h, w, g, ga.as_deref_mut(), gb.as_deref_mut());
                add_into(grads, *a, ga);
                add_into(grads, *b, gb);
            }
            Op::Warp { img, disp } => {
                let s = node.value.shape().to_vec();
                let (c, h, w) = spatial("warp", &s).expect("validated in forward");
                let (vi, vd) = (val(*img), val(*disp));
                let mut gi = self.buf(grads, *img).map(|_| vec![F::zero(); vi.len()]);
                let mut gd = self.buf(grads, *disp).map(|_| vec![F::zero(); vd.len()]);
                sampling::warp_backward(vi, c, vd, h, w, g, gi.as_deref_mut(), gd.as_deref_mut());
                add_into(grads, *img, gi);
                add_into(grads, *disp, gd);
            }
            Op::Lcc { a, b, window } => {
                let s = self.nodes[a.0].value.shape();
                let (_, h, w) = spatial("lcc", s).expect("validated in forward");
                let (va, vb) = (val(*a), val(*b));
                let mut ga = self.buf(grads, *a).map(|_| vec![F::zero(); va.len()]);
                let mut gb = self.buf(grads, *b).map(|_| vec![F::zero(); vb.len()]);
                lcc::lcc_backward(va, vb, h, w, *window, g[0], ga.as_deref_mut(), gb.as_deref_mut());
                add_into(grads, *a, ga);
                add_into(grads, *b, gb);
            }
            Op::Kl { mu, logvar } => {
                let (vm, vl) = (val(*mu), val(*logvar));
                let half = F::of(0.5);
                self.accumulate(grads, *mu, |j| g[0] * vm[j]);
                self.accumulate(grads, *logvar, |j| g[0] * half * (vl[j].exp() - F::one()));
            }
        }
    }
}

fn store<F>(grads: &mut [Option<Vec<F>>], v: Var, buf: Option<Vec<F>>) {
    if let Some(b) = buf {
        grads[v.0] = Some(b);
    }
}

fn add_into<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, contrib: Option<Vec<F>>) {
    if let (Some(c), Some(dst)) = (contrib, grads[v.0].as_mut()) {
        for (d, x) in dst.iter_mut().zip(c) {
            *d += x;
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient w.r.t. `v`; `None` when `v` is untracked or unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of every named parameter, zero-filled where the loss never reached it.
    pub fn params(&self, graph: &Graph<F>) -> BTreeMap<String, Tensor<F>> {
        let mut out = BTreeMap::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let shape = node.value.shape();
                let t = match &self.grads[i] {
                    Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
                    None => Tensor::zeros(shape),
                };
                match out.get_mut(name) {
                    None => {
                        out.insert(name.clone(), t);
                    }
                    Some(acc) => {
                        let acc: &mut Tensor<F> = acc;
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += *b;
                        }
                    }
                }
            }
        }
        out
    }
}
