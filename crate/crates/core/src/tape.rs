//! Recorded forward computation with reverse-mode gradient accumulation.
//!
//! Every primitive appends one record holding its output value and whatever
//! it needs for the backward sweep. Records are appended in execution order,
//! so the tape is topologically sorted by construction and `backward` visits
//! each record once, newest first.
//!
//! Feature maps are channel-last: `[N, H, W, C]`, where the leading batch
//! extent may be dropped (`[H, W, C]`) for single images.

use crate::error::{Error, Result};
use crate::kernels::{
    broadcast_offsets, broadcast_shape, col2im, depthwise_backward, depthwise_forward, gemm,
    im2col, ConvGeom,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{cst, Scalar, Tensor};

/// Handle to a recorded tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

impl From<ParamId> for Var {
    fn from(id: ParamId) -> Self {
        Var(id.index())
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    TransposeLast2(Var),
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cout: usize,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cin: usize,
    },
    Depthwise {
        x: Var,
        k: Var,
        b: Option<Var>,
        dims: (usize, usize, usize, usize),
        kh: usize,
        kw: usize,
    },
    GlobalAvgPool {
        x: Var,
        batch: usize,
        hw: usize,
        c: usize,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis_lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
        len: usize,
        full: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
        width: usize,
    },
    Charbonnier {
        a: Var,
        b: Var,
        eps: f64,
    },
    SigmoidFocal {
        logits: Var,
        targets: Vec<T>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
        norm: f64,
    },
    IouLoss {
        pred: Var,
        target: Vec<T>,
        norm: f64,
    },
    MemoryRead {
        query: Var,
        bank: Var,
        coeffs: Vec<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: usize,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // (Phi(x), phi(x)) of the standard normal
    let half = cst::<T>(0.5);
    let cdf = half * (T::one() + (x * cst::<T>(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * cst::<T>(0.398_942_280_401_432_7);
    (cdf, pdf)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Interpret a feature map as `[N, H, W, C]`.
fn nhwc(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::shape(op, format!("expected [H,W,C] or [N,H,W,C], got {shape:?}"))),
    }
}

fn with_spatial(shape: &[usize], h: usize, w: usize, c: usize) -> Vec<usize> {
    if shape.len() == 3 {
        vec![h, w, c]
    } else {
        vec![shape[0], h, w, c]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: 0,
            macs: 0,
        }
    }

    /// Start a tape whose first records are the parameters of `store`, so that
    /// `Var::from(param_id)` addresses them.
    pub fn with_params(store: &ParamStore<T>) -> Self {
        let mut tape = Self::new();
        for value in store.values() {
            tape.push(value.clone(), Op::Leaf, true);
        }
        tape.params = store.len();
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by the recorded forward computation.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// gradient reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    /// Parameter gradients in store order; `None` for parameters off the path.
    pub fn param_grads(&self) -> Vec<Option<&[T]>> {
        (0..self.params).map(|i| self.grads[i].as_deref()).collect()
    }

    // ---- elementwise ---------------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(op, &sa, &sb)?;
        let oa = broadcast_offsets(&out_shape, &sa);
        let ob = broadcast_offsets(&out_shape, &sb);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n: usize = out_shape.iter().product();
        let data: Vec<T> = match (&oa, &ob) {
            (None, None) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let ia = oa.as_ref().map_or(i, |o| o[i]);
                    let ib = ob.as_ref().map_or(i, |o| o[i]);
                    f(av[ia], bv[ib])
                })
                .collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok((Tensor::new(&out_shape, data)?, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        self.macs += out.len() as u64;
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let k = cst::<T>(s);
        let out = self.value(a).map(|v| v * k);
        self.macs += out.len() as u64;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let k = cst::<T>(s);
        let out = self.value(a).map(|v| v + k);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * gelu_parts(v).0);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|v| cst(sigmoid64(v.to_f64().unwrap_or(f64::NAN))));
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} invalid for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(x[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] = y[at(j)] / total;
                }
            }
        }
        let rg = self.rg(a);
        let out = Tensor::new(&shape, y)?;
        Ok(self.push(out, Op::Softmax { x: a, outer, len, inner }, rg))
    }

    /// Normalize over the last axis, then apply optional per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input has no last axis"))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(Error::mismatch("layer_norm", &shape, self.shape(p)));
            }
        }
        let rows = self.value(x).len() / c.max(1);
        let xv = self.value(x).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_c = cst::<T>(1.0 / c as f64);
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let s = T::one() / (var + cst(eps)).sqrt();
            rstd[r] = s;
            for (h, &v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *h = (v - mean) * s;
            }
        }
        let mut y = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g).data();
            for (i, v) in y.iter_mut().enumerate() {
                *v *= gv[i % c];
            }
        }
        if let Some(b) = beta {
            let bv = self.value(b).data();
            for (i, v) in y.iter_mut().enumerate() {
                *v += bv[i % c];
            }
        }
        self.macs += y.len() as u64;
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        let out = Tensor::new(&shape, y)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    // ---- linear algebra ------------------------------------------------------

    /// Affine map over the last axis: `x @ w + b` with `w: [Cin, Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let cin = *xs.last().ok_or_else(|| Error::shape("linear", "scalar input"))?;
        if ws.len() != 2 || ws[0] != cin {
            return Err(Error::mismatch("linear", &xs, &ws));
        }
        let cout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::mismatch("linear", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / cin.max(1);
        let mut y = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(rows, cin, cout, self.value(x).data(), false, self.value(w).data(), false, T::one(), &mut y);
        self.macs += (rows * cin * cout) as u64;
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, y)?, Op::Linear { x, w, b }, rg))
    }

    /// Batched matrix product `[.., M, K] @ [.., K, N]`; `b` may also be a
    /// single `[K, N]` matrix shared by every batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if kb != k || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::mismatch("matmul", &sa, &sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut y = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let boff = if shared_b { 0 } else { bi * k * n };
            gemm(
                m,
                k,
                n,
                &av[bi * m * k..(bi + 1) * m * k],
                false,
                &bv[boff..boff + k * n],
                false,
                T::zero(),
                &mut y[bi * m * n..(bi + 1) * m * n],
            );
        }
        self.macs += (batch * m * k * n) as u64;
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::MatMul { a, b, batch, m, k, n, shared_b },
            rg,
        ))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("need rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_blocks(self.value(a).data(), r, c);
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::TransposeLast2(a), rg))
    }

    // ---- convolutions --------------------------------------------------------

    /// Cross-correlation of `[N,H,W,Cin]` with `k: [kh,kw,Cin,Cout]`, explicit
    /// zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (n, h, w, cin) = nhwc("conv2d", &xs)?;
        if ks.len() != 4 || ks[2] != cin {
            return Err(Error::mismatch("conv2d", &xs, &ks));
        }
        let cout = ks[3];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::mismatch("conv2d", &ks, self.shape(b)));
            }
        }
        let geom = ConvGeom::new("conv2d", n, h, w, cin, ks[0], ks[1], stride, pad)?;
        let cols = im2col(self.value(x).data(), &geom);
        let rows = geom.out_positions();
        let mut y = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(rows, geom.patch_len(), cout, &cols, false, self.value(k).data(), false, T::one(), &mut y);
        self.macs += (rows * geom.patch_len() * cout) as u64;
        let shape = with_spatial(&xs, geom.out_h, geom.out_w, cout);
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, y)?, Op::Conv2d { x, k, b, geom, cout }, rg))
    }

    /// Adjoint of [`Tape::conv2d`] for the same kernel `k: [kh,kw,Cout,Cin]`:
    /// maps `Cin` channels to `Cout` channels and upsamples by `stride`.
    /// Output extent is `(H - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (n, h, w, cin) = nhwc("conv_transpose2d", &xs)?;
        if ks.len() != 4 || ks[3] != cin || stride == 0 {
            return Err(Error::mismatch("conv_transpose2d", &xs, &ks));
        }
        let cout = ks[2];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::mismatch("conv_transpose2d", &ks, self.shape(b)));
            }
        }
        let oh = ((h - 1) * stride + ks[0])
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape("conv_transpose2d", "padding exceeds output extent"))?;
        let ow = ((w - 1) * stride + ks[1])
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape("conv_transpose2d", "padding exceeds output extent"))?;
        let geom = ConvGeom::new("conv_transpose2d", n, oh, ow, cout, ks[0], ks[1], stride, pad)?;
        if geom.out_h != h || geom.out_w != w {
            return Err(Error::shape("conv_transpose2d", "geometry is not invertible for these sizes"));
        }
        let rows = n * h * w;
        let mut cols = vec![T::zero(); rows * geom.patch_len()];
        gemm(rows, cin, geom.patch_len(), self.value(x).data(), false, self.value(k).data(), true, T::zero(), &mut cols);
        let mut y = vec![T::zero(); n * oh * ow * cout];
        col2im(&cols, &geom, &mut y);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for px in y.chunks_mut(cout) {
                for (v, &bb) in px.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        self.macs += (rows * geom.patch_len() * cin) as u64;
        let shape = with_spatial(&xs, oh, ow, cout);
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, y)?, Op::ConvTranspose2d { x, k, b, geom, cin }, rg))
    }

    /// Per-channel "same" convolution with `k: [kh,kw,C]`, odd extents.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let dims = nhwc("depthwise_conv2d", &xs)?;
        if ks.len() != 3 || ks[2] != dims.3 {
            return Err(Error::mismatch("depthwise_conv2d", &xs, &ks));
        }
        if ks[0].is_multiple_of(2) || ks[1].is_multiple_of(2) {
            return Err(Error::shape("depthwise_conv2d", format!("same padding needs odd kernel, got {ks:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [dims.3] {
                return Err(Error::mismatch("depthwise_conv2d", &ks, self.shape(b)));
            }
        }
        let mut y = depthwise_forward(self.value(x).data(), self.value(k).data(), dims, ks[0], ks[1]);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for px in y.chunks_mut(dims.3) {
                for (v, &bb) in px.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        self.macs += (y.len() * ks[0] * ks[1]) as u64;
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&xs, y)?,
            Op::Depthwise { x, k, b, dims, kh: ks[0], kw: ks[1] },
            rg,
        ))
    }

    // ---- reductions and reshaping --------------------------------------------

    /// Spatial mean: `[N,H,W,C] -> [N,1,1,C]` (or `[H,W,C] -> [1,1,C]`).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, h, w, c) = nhwc("global_avg_pool", &xs)?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); n * c];
        let inv = cst::<T>(1.0 / hw as f64);
        for bi in 0..n {
            let acc = &mut y[bi * c..(bi + 1) * c];
            for px in xv[bi * hw * c..(bi + 1) * hw * c].chunks(c) {
                for (a, &v) in acc.iter_mut().zip(px) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
        self.macs += xv.len() as u64;
        let shape = with_spatial(&xs, 1, 1, c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, y)?, Op::GlobalAvgPool { x, batch: n, hw, c }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / cst(v.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Join tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} invalid for {first:?}")));
        }
        let mut axis_lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::mismatch("concat", &first, s));
            }
            axis_lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total_axis: usize = axis_lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&axis_lens) {
                let blk = len * inner;
                data.extend_from_slice(&self.value(p).data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat { parts: parts.to_vec(), axis_lens, outer, inner },
            rg,
        ))
    }

    /// Channels `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let full = *xs.last().ok_or_else(|| Error::shape("slice_last", "scalar input"))?;
        if len == 0 || start + len > full {
            return Err(Error::shape("slice_last", format!("range {start}..{} outside {full}", start + len)));
        }
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(full)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::SliceLast { x, start, len, full }, rg))
    }

    /// Rows of a 2-D tensor `[R, C]`, in the given order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("gather_rows", format!("expected [R, C], got {xs:?}")));
        }
        let (n, width) = (xs[0], xs[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} outside {n}")));
        }
        let xv = self.value(x).data();
        let data: Vec<T> = rows.iter().flat_map(|&r| xv[r * width..(r + 1) * width].iter().copied()).collect();
        let rg = self.rg(x);
        let op = Op::GatherRows { x, rows: rows.to_vec(), width };
        Ok(self.push(Tensor::new(&[rows.len(), width], data)?, op, rg))
    }

    // ---- fused losses --------------------------------------------------------

    /// Mean of `sqrt((a - b)^2 + eps^2)`.
    pub fn charbonnier(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::mismatch("charbonnier", self.shape(a), self.shape(b)));
        }
        let e2 = cst::<T>(eps * eps);
        let n = self.value(a).len().max(1);
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| ((x - y) * (x - y) + e2).sqrt())
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(total / cst(n as f64)), Op::Charbonnier { a, b, eps }, rg))
    }

    /// Sigmoid focal loss summed over every entry and divided by `norm`.
    /// `targets` holds 0/1 labels with the shape of `logits`.
    pub fn sigmoid_focal_loss(&mut self, logits: Var, targets: &Tensor<T>, alpha: f64, gamma: f64, norm: f64) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::mismatch("focal_loss", self.shape(logits), targets.shape()));
        }
        let mut total = 0.0f64;
        for (&x, &t) in self.value(logits).data().iter().zip(targets.data()) {
            let x = x.to_f64().unwrap_or(f64::NAN);
            let p = sigmoid64(x);
            total += if t > T::zero() {
                alpha * (1.0 - p).powf(gamma) * softplus(-x)
            } else {
                (1.0 - alpha) * p.powf(gamma) * softplus(x)
            };
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(cst(total / norm)),
            Op::SigmoidFocal { logits, targets: targets.data().to_vec(), alpha, gamma, norm },
            rg,
        ))
    }

    /// Binary cross-entropy on logits, summed and divided by `norm`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>, norm: f64) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::mismatch("bce_with_logits", self.shape(logits), targets.shape()));
        }
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| {
                let x = x.to_f64().unwrap_or(f64::NAN);
                softplus(x) - t.to_f64().unwrap_or(0.0) * x
            })
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(cst(total / norm)),
            Op::BceWithLogits { logits, targets: targets.data().to_vec(), norm },
            rg,
        ))
    }

    /// `sum(1 - IoU) / norm` over rows of `(l, t, r, b)` distances measured
    /// from a shared anchor point. `pred` and `target` are `[P, 4]`, positive.
    pub fn iou_loss(&mut self, pred: Var, target: &Tensor<T>, norm: f64) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        if ps.len() != 2 || ps[1] != 4 || ps[..] != *target.shape() {
            return Err(Error::mismatch("iou_loss", &ps, target.shape()));
        }
        let total: T = self
            .value(pred)
            .data()
            .chunks(4)
            .zip(target.data().chunks(4))
            .map(|(p, g)| T::one() - ltrb_iou(p, g))
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total / cst(norm)),
            Op::IouLoss { pred, target: target.data().to_vec(), norm },
            rg,
        ))
    }

    /// Soft retrieval from a memory bank `[K, B]` for queries `[N, K]`:
    /// `I = softmax(query @ bank)` over the `B` entries and
    /// `out = I @ bank^T`, shape `[N, K]`. Returns the output and `I`.
    ///
    /// Reductions over the bank axis are summed in sorted order, so the
    /// result does not depend on the order of the bank entries.
    pub fn memory_read(&mut self, query: Var, bank: Var) -> Result<(Var, Tensor<T>)> {
        let qs = self.shape(query).to_vec();
        let bs = self.shape(bank).to_vec();
        if qs.len() != 2 || bs.len() != 2 || qs[1] != bs[0] {
            return Err(Error::mismatch("memory_read", &qs, &bs));
        }
        let (n, k, b) = (qs[0], qs[1], bs[1]);
        let q = self.value(query).data();
        let m = self.value(bank).data();
        let mut coeffs = vec![T::zero(); n * b];
        let mut out = vec![T::zero(); n * k];
        let mut terms = vec![T::zero(); b];
        for row in 0..n {
            let qr = &q[row * k..(row + 1) * k];
            let ir = &mut coeffs[row * b..(row + 1) * b];
            for (j, logit) in ir.iter_mut().enumerate() {
                *logit = (0..k).map(|kk| qr[kk] * m[kk * b + j]).sum();
            }
            let max = ir.iter().copied().fold(T::neg_infinity(), T::max);
            for v in ir.iter_mut() {
                *v = (*v - max).exp();
            }
            terms.copy_from_slice(ir);
            let total = sorted_sum(&mut terms);
            for v in ir.iter_mut() {
                *v = *v / total;
            }
            for kk in 0..k {
                for j in 0..b {
                    terms[j] = ir[j] * m[kk * b + j];
                }
                out[row * k + kk] = sorted_sum(&mut terms);
            }
        }
        self.macs += (2 * n * k * b) as u64;
        let rg = self.rg(query) || self.rg(bank);
        let coeff_t = Tensor::new(&[n, b], coeffs.clone())?;
        let v = self.push(Tensor::new(&[n, k], out)?, Op::MemoryRead { query, bank, coeffs }, rg);
        Ok((v, coeff_t))
    }

    // ---- backward ------------------------------------------------------------

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Sum-reduce an output-shaped gradient onto a broadcast operand.
    fn reduce_to(&self, g: &[T], out_shape: &[usize], v: Var) -> Vec<T> {
        match broadcast_offsets(out_shape, self.shape(v)) {
            None => g.to_vec(),
            Some(offs) => {
                let mut acc = vec![T::zero(); self.value(v).len()];
                for (i, &o) in offs.iter().enumerate() {
                    acc[o] += g[i];
                }
                acc
            }
        }
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every tensor
    /// that requires them and lies on a path to the loss. Gradients from an
    /// earlier call are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, g: &[T]) {
        let op = self.nodes[idx].op.clone_shallow();
        let out_shape = self.nodes[idx].value.shape().to_vec();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ga = self.reduce_to(g, &out_shape, a);
                let gb = self.reduce_to(g, &out_shape, b);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_to(g, &out_shape, a);
                let gb: Vec<T> = self.reduce_to(g, &out_shape, b).into_iter().map(|v| -v).collect();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Mul(a, b) => {
                let oa = broadcast_offsets(&out_shape, self.shape(a));
                let ob = broadcast_offsets(&out_shape, self.shape(b));
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let ia = oa.as_ref().map_or(i, |o| o[i]);
                    let ib = ob.as_ref().map_or(i, |o| o[i]);
                    ga[ia] += gi * bv[ib];
                    gb[ib] += gi * av[ia];
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Scale(a, s) => {
                let k = cst::<T>(s);
                self.accumulate(a, g.iter().map(|&v| v * k).collect());
            }
            Op::AddScalar(a) => self.accumulate(a, g.to_vec()),
            Op::Exp(a) => {
                let y = self.nodes[idx].value.data();
                let d = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect();
                self.accumulate(a, d);
            }
            Op::Gelu(a) => {
                let d = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&gi, &x)| {
                        let (cdf, pdf) = gelu_parts(x);
                        gi * (cdf + x * pdf)
                    })
                    .collect();
                self.accumulate(a, d);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.data();
                let d = g.iter().zip(y).map(|(&gi, &s)| gi * s * (T::one() - s)).collect();
                self.accumulate(a, d);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = self.nodes[idx].value.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(x, d);
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let (xhat, rstd) = match &self.nodes[idx].op {
                    Op::LayerNorm { xhat, rstd, .. } => (xhat.clone(), rstd.clone()),
                    _ => unreachable!(),
                };
                let c = *out_shape.last().unwrap();
                if let Some(b) = beta {
                    let mut gb = vec![T::zero(); c];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % c] += gi;
                    }
                    self.accumulate(b, gb);
                }
                let gv: Option<Vec<T>> = gamma.map(|gm| self.value(gm).data().to_vec());
                if let Some(gm) = gamma {
                    let mut gg = vec![T::zero(); c];
                    for (i, (&gi, &h)) in g.iter().zip(&xhat).enumerate() {
                        gg[i % c] += gi * h;
                    }
                    self.accumulate(gm, gg);
                }
                if self.rg(x) {
                    let inv_c = cst::<T>(1.0 / c as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &s) in rstd.iter().enumerate() {
                        let range = r * c..(r + 1) * c;
                        let dh: Vec<T> = g[range.clone()]
                            .iter()
                            .enumerate()
                            .map(|(j, &gi)| gv.as_ref().map_or(gi, |gv| gi * gv[j]))
                            .collect();
                        let m1 = dh.iter().copied().sum::<T>() * inv_c;
                        let m2 = dh.iter().zip(&xhat[range.clone()]).map(|(&a, &h)| a * h).sum::<T>() * inv_c;
                        for (j, out) in dx[range.clone()].iter_mut().enumerate() {
                            *out = s * (dh[j] - m1 - xhat[r * c + j] * m2);
                        }
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let cin = self.shape(w)[0];
                let cout = self.shape(w)[1];
                let rows = g.len() / cout.max(1);
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); cout];
                    for row in g.chunks(cout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(b, gb);
                }
                if self.rg(w) {
                    let mut gw = vec![T::zero(); cin * cout];
                    gemm(cin, rows, cout, self.value(x).data(), true, g, false, T::zero(), &mut gw);
                    self.accumulate(w, gw);
                }
                if self.rg(x) {
                    let mut gx = vec![T::zero(); rows * cin];
                    gemm(rows, cout, cin, g, false, self.value(w).data(), true, T::zero(), &mut gx);
                    self.accumulate(x, gx);
                }
            }
            Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                if self.rg(a) {
                    let bv = self.value(b).data();
                    let mut ga = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        gemm(m, n, k, &g[bi * m * n..(bi + 1) * m * n], false, &bv[boff..boff + k * n], true, T::zero(), &mut ga[bi * m * k..(bi + 1) * m * k]);
                    }
                    self.accumulate(a, ga);
                }
                if self.rg(b) {
                    let av = self.value(a).data();
                    let mut gb = vec![T::zero(); self.value(b).len()];
                    for bi in 0..batch {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        let beta = if shared_b && bi > 0 { T::one() } else { T::zero() };
                        gemm(k, m, n, &av[bi * m * k..(bi + 1) * m * k], true, &g[bi * m * n..(bi + 1) * m * n], false, beta, &mut gb[boff..boff + k * n]);
                    }
                    self.accumulate(b, gb);
                }
            }
            Op::TransposeLast2(a) => {
                let l = out_shape.len();
                let (r, c) = (out_shape[l - 2], out_shape[l - 1]);
                self.accumulate(a, transpose_blocks(g, r, c));
            }
            Op::Conv2d { x, k, b, geom, cout } => {
                let rows = geom.out_positions();
                let patch = geom.patch_len();
                if let Some(b) = b {
                    self.accumulate(b, channel_sums(g, cout));
                }
                if self.rg(k) {
                    let cols = im2col(self.value(x).data(), &geom);
                    let mut gk = vec![T::zero(); patch * cout];
                    gemm(patch, rows, cout, &cols, true, g, false, T::zero(), &mut gk);
                    self.accumulate(k, gk);
                }
                if self.rg(x) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    gemm(rows, cout, patch, g, false, self.value(k).data(), true, T::zero(), &mut dcols);
                    let mut gx = vec![T::zero(); self.value(x).len()];
                    col2im(&dcols, &geom, &mut gx);
                    self.accumulate(x, gx);
                }
            }
            Op::ConvTranspose2d { x, k, b, geom, cin } => {
                let rows = geom.out_positions();
                let patch = geom.patch_len();
                if let Some(b) = b {
                    self.accumulate(b, channel_sums(g, geom.channels));
                }
                let cols = im2col(g, &geom);
                if self.rg(k) {
                    let mut gk = vec![T::zero(); patch * cin];
                    gemm(patch, rows, cin, &cols, true, self.value(x).data(), false, T::zero(), &mut gk);
                    self.accumulate(k, gk);
                }
                if self.rg(x) {
                    let mut gx = vec![T::zero(); rows * cin];
                    gemm(rows, patch, cin, &cols, false, self.value(k).data(), false, T::zero(), &mut gx);
                    self.accumulate(x, gx);
                }
            }
            Op::Depthwise { x, k, b, dims, kh, kw } => {
                if let Some(b) = b {
                    self.accumulate(b, channel_sums(g, dims.3));
                }
                if self.rg(x) || self.rg(k) {
                    let (gx, gk) = depthwise_backward(self.value(x).data(), self.value(k).data(), g, dims, kh, kw);
                    self.accumulate(x, gx);
                    self.accumulate(k, gk);
                }
            }
            Op::GlobalAvgPool { x, batch, hw, c } => {
                let inv = cst::<T>(1.0 / hw as f64);
                let mut gx = Vec::with_capacity(batch * hw * c);
                for bi in 0..batch {
                    let row: Vec<T> = g[bi * c..(bi + 1) * c].iter().map(|&v| v * inv).collect();
                    for _ in 0..hw {
                        gx.extend_from_slice(&row);
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Sum(a) => {
                let n = self.value(a).len();
                self.accumulate(a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(a).len();
                self.accumulate(a, vec![g[0] / cst(n.max(1) as f64); n]);
            }
            Op::Reshape(a) => self.accumulate(a, g.to_vec()),
            Op::Concat { parts, axis_lens, outer, inner } => {
                let total: usize = axis_lens.iter().sum();
                let mut offset = 0;
                for (&p, &len) in parts.iter().zip(&axis_lens) {
                    let blk = len * inner;
                    let mut gp = Vec::with_capacity(outer * blk);
                    for o in 0..outer {
                        let start = o * total * inner + offset * inner;
                        gp.extend_from_slice(&g[start..start + blk]);
                    }
                    offset += len;
                    self.accumulate(p, gp);
                }
            }
            Op::SliceLast { x, start, len, full } => {
                let rows = g.len() / len;
                let mut gx = vec![T::zero(); rows * full];
                for r in 0..rows {
                    gx[r * full + start..r * full + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(x, gx);
            }
            Op::GatherRows { x, rows, width } => {
                let mut gx = vec![T::zero(); self.value(x).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..width {
                        gx[r * width + c] += g[i * width + c];
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Charbonnier { a, b, eps } => {
                let n = self.value(a).len().max(1);
                let scale = g[0] / cst(n as f64);
                let e2 = cst::<T>(eps * eps);
                let ga: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| scale * (x - y) / ((x - y) * (x - y) + e2).sqrt())
                    .collect();
                let gb = ga.iter().map(|&v| -v).collect();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::SigmoidFocal { logits, alpha, gamma, norm, .. } => {
                let targets = match &self.nodes[idx].op {
                    Op::SigmoidFocal { targets, .. } => targets.clone(),
                    _ => unreachable!(),
                };
                let scale = g[0].to_f64().unwrap_or(f64::NAN) / norm;
                let d = self
                    .value(logits)
                    .data()
                    .iter()
                    .zip(&targets)
                    .map(|(&x, &t)| {
                        let x = x.to_f64().unwrap_or(f64::NAN);
                        let p = sigmoid64(x);
                        let v = if t > T::zero() {
                            // d/dx [-a (1-p)^g ln p]
                            alpha * (1.0 - p).powf(gamma) * (-gamma * p * softplus(-x) - (1.0 - p))
                        } else {
                            // d/dx [-(1-a) p^g ln(1-p)]
                            (1.0 - alpha) * p.powf(gamma) * (p + gamma * (1.0 - p) * softplus(x))
                        };
                        cst(v * scale)
                    })
                    .collect();
                self.accumulate(logits, d);
            }
            Op::BceWithLogits { logits, norm, .. } => {
                let targets = match &self.nodes[idx].op {
                    Op::BceWithLogits { targets, .. } => targets.clone(),
                    _ => unreachable!(),
                };
                let scale = g[0] / cst(norm);
                let d = self
                    .value(logits)
                    .data()
                    .iter()
                    .zip(&targets)
                    .map(|(&x, &t)| (cst::<T>(sigmoid64(x.to_f64().unwrap_or(f64::NAN))) - t) * scale)
                    .collect();
                self.accumulate(logits, d);
            }
            Op::MemoryRead { query, bank, .. } => {
                let coeffs = match &self.nodes[idx].op {
                    Op::MemoryRead { coeffs, .. } => coeffs.clone(),
                    _ => unreachable!(),
                };
                let qs = self.shape(query).to_vec();
                let (n, k) = (qs[0], qs[1]);
                let b = self.shape(bank)[1];
                let q = self.value(query).data();
                let m = self.value(bank).data();
                let mut gq = vec![T::zero(); n * k];
                let mut gm = vec![T::zero(); k * b];
                for row in 0..n {
                    let ir = &coeffs[row * b..(row + 1) * b];
                    let gr = &g[row * k..(row + 1) * k];
                    // dL/dI_j, then through the softmax
                    let u: Vec<T> = (0..b).map(|j| (0..k).map(|kk| gr[kk] * m[kk * b + j]).sum()).collect();
                    let mean: T = ir.iter().zip(&u).map(|(&i, &uj)| i * uj).sum();
                    let ds: Vec<T> = ir.iter().zip(&u).map(|(&i, &uj)| i * (uj - mean)).collect();
                    for kk in 0..k {
                        for j in 0..b {
                            gm[kk * b + j] += gr[kk] * ir[j] + q[row * k + kk] * ds[j];
                            gq[row * k + kk] += m[kk * b + j] * ds[j];
                        }
                    }
                }
                self.accumulate(query, gq);
                self.accumulate(bank, gm);
            }
            Op::IouLoss { pred, norm, .. } => {
                let target = match &self.nodes[idx].op {
                    Op::IouLoss { target, .. } => target.clone(),
                    _ => unreachable!(),
                };
                let scale = g[0] / cst(norm);
                let mut d = Vec::with_capacity(target.len());
                for (p, t) in self.value(pred).data().chunks(4).zip(target.chunks(4)) {
                    d.extend(ltrb_iou_grad(p, t).into_iter().map(|v| -v * scale));
                }
                self.accumulate(pred, d);
            }
        }
    }
}

impl<T: Clone> Op<T> {
    /// Copy of the op without its saved buffers; backward re-reads those from
    /// the node when it needs them.
    fn clone_shallow(&self) -> Op<T> {
        match self {
            Op::LayerNorm { x, gamma, beta, .. } => Op::LayerNorm {
                x: *x,
                gamma: *gamma,
                beta: *beta,
                xhat: Vec::new(),
                rstd: Vec::new(),
            },
            Op::SigmoidFocal { logits, alpha, gamma, norm, .. } => Op::SigmoidFocal {
                logits: *logits,
                targets: Vec::new(),
                alpha: *alpha,
                gamma: *gamma,
                norm: *norm,
            },
            Op::BceWithLogits { logits, norm, .. } => Op::BceWithLogits {
                logits: *logits,
                targets: Vec::new(),
                norm: *norm,
            },
            Op::MemoryRead { query, bank, .. } => Op::MemoryRead {
                query: *query,
                bank: *bank,
                coeffs: Vec::new(),
            },
            Op::IouLoss { pred, norm, .. } => Op::IouLoss {
                pred: *pred,
                target: Vec::new(),
                norm: *norm,
            },
            other => other.clone(),
        }
    }
}

/// Order-independent sum: terms are added in ascending order.
fn sorted_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    terms.iter().copied().sum()
}

fn channel_sums<T: Scalar>(g: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for px in g.chunks(c) {
        for (a, &v) in out.iter_mut().zip(px) {
            *a += v;
        }
    }
    out
}

fn transpose_blocks<T: Scalar>(data: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (blk, src) in data.chunks(r * c).enumerate() {
        let dst = &mut out[blk * r * c..(blk + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// IoU of two boxes given as distances `(l, t, r, b)` from the same point.
pub fn ltrb_iou<T: Scalar>(p: &[T], g: &[T]) -> T {
    let ap = (p[0] + p[2]) * (p[1] + p[3]);
    let ag = (g[0] + g[2]) * (g[1] + g[3]);
    let iw = p[0].min(g[0]) + p[2].min(g[2]);
    let ih = p[1].min(g[1]) + p[3].min(g[3]);
    let inter = iw * ih;
    inter / (ap + ag - inter)
}

fn ltrb_iou_grad<T: Scalar>(p: &[T], g: &[T]) -> [T; 4] {
    let (wp, hp) = (p[0] + p[2], p[1] + p[3]);
    let ap = wp * hp;
    let ag = (g[0] + g[2]) * (g[1] + g[3]);
    let iw = p[0].min(g[0]) + p[2].min(g[2]);
    let ih = p[1].min(g[1]) + p[3].min(g[3]);
    let inter = iw * ih;
    let union = ap + ag - inter;
    let mut out = [T::zero(); 4];
    for j in 0..4 {
        let horizontal = j % 2 == 0;
        let d_area = if horizontal { hp } else { wp };
        let active = if p[j] <= g[j] { T::one() } else { T::zero() };
        let d_inter = active * if horizontal { ih } else { iw };
        let d_union = d_area - d_inter;
        out[j] = (d_inter * union - inter * d_union) / (union * union);
    }
    out
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
