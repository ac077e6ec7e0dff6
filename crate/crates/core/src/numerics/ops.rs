use super::gemm::gemm;
use super::{numel_of, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

// ── broadcasting ───────────────────────────────────────────────────────

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// Row-major strides of `shape` aligned to `out`, with 0 on broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let mut strides = vec![0; r];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + r - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

#[derive(Clone)]
struct Broadcast {
    out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let out = broadcast_shape(a, b)?;
        Ok(Self { sa: aligned_strides(a, &out), sb: aligned_strides(b, &out), out })
    }

    /// Calls `f(out_offset, a_offset, b_offset, a_step, b_step, len)` for each
    /// contiguous run along the last output axis.
    fn visit(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let r = self.out.len();
        if r == 0 {
            f(0, 0, 0, 0, 0, 1);
            return;
        }
        let len = self.out[r - 1];
        let (astep, bstep) = (self.sa[r - 1], self.sb[r - 1]);
        let rows = numel_of(&self.out[..r - 1]);
        let mut idx = vec![0usize; r - 1];
        let (mut ao, mut bo) = (0usize, 0usize);
        for row in 0..rows {
            f(row * len, ao, bo, astep, bstep, len);
            for d in (0..r - 1).rev() {
                idx[d] += 1;
                ao += self.sa[d];
                bo += self.sb[d];
                if idx[d] < self.out[d] {
                    break;
                }
                ao -= self.sa[d] * idx[d];
                bo -= self.sb[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    #[inline]
    fn apply<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        }
    }
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
    let bc = Broadcast::new(a.shape(), b.shape())?;
    let out_len = numel_of(&bc.out);
    let mut out = vec![T::zero(); out_len];
    {
        let ad = a.data();
        let bd = b.data();
        if a.shape() == b.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(ad.iter()).zip(bd.iter()) {
                *o = op.apply(x, y);
            }
        } else {
            bc.visit(|oo, ao, bo, as_, bs, len| {
                for j in 0..len {
                    out[oo + j] = op.apply(ad[ao + j * as_], bd[bo + j * bs]);
                }
            });
        }
    }
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    Ok(Tensor::from_op(bc.out.clone(), out, vec![a.clone(), b.clone()], move |g, ps| {
        let (a, b) = (&ps[0], &ps[1]);
        let same = sa == sb;
        let mut ga = a.requires_grad().then(|| vec![T::zero(); numel_of(&sa)]);
        let mut gb = b.requires_grad().then(|| vec![T::zero(); numel_of(&sb)]);
        let ad = a.data();
        let bd = b.data();
        let mut body = |oo: usize, ao: usize, bo: usize, as_: usize, bs: usize, len: usize| {
            for j in 0..len {
                let gv = g[oo + j];
                let (ia, ib) = (ao + j * as_, bo + j * bs);
                let (da, db) = match op {
                    BinOp::Add => (gv, gv),
                    BinOp::Sub => (gv, -gv),
                    BinOp::Mul => (gv * bd[ib], gv * ad[ia]),
                    BinOp::Div => (gv / bd[ib], -gv * ad[ia] / (bd[ib] * bd[ib])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += db;
                }
            }
        };
        if same {
            body(0, 0, 0, 1, 1, g.len());
        } else {
            bc.visit(body);
        }
        vec![ga, gb]
    }))
}

// ── elementwise unary ──────────────────────────────────────────────────

fn unary<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T, df: impl Fn(T) -> T + 'static) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g, ps| {
        let xd = ps[0].data();
        vec![Some(g.iter().zip(xd.iter()).map(|(&gv, &xv)| gv * df(xv)).collect())]
    })
}

#[inline]
fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // split on sign so exp never overflows
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

// ── reduction helpers ──────────────────────────────────────────────────

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel_of(&shape[..axis]), shape[axis], numel_of(&shape[axis + 1..]))
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinOp::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinOp::Mul)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinOp::Div)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        let out = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())])
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let out = self.data().iter().map(|&v| v + s).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |g, _| vec![Some(g.to_vec())])
    }

    pub fn square(&self) -> Tensor<T> {
        let two = T::from_f64c(2.0);
        unary(self, |v| v * v, move |v| two * v)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let half = T::from_f64c(0.5);
        unary(self, |v| v.sqrt(), move |v| half / v.sqrt())
    }

    pub fn exp(&self) -> Tensor<T> {
        unary(self, |v| v.exp(), |v| v.exp())
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor<T> {
        unary(
            self,
            |v| v.abs(),
            |v| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// `max(x, floor)` elementwise.
    pub fn clamp_min(&self, floor: T) -> Tensor<T> {
        unary(self, move |v| if v > floor { v } else { floor }, move |v| if v > floor { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(self, sigmoid_scalar, |v| {
            let s = sigmoid_scalar(v);
            s * (T::one() - s)
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        unary(
            self,
            |v| v * sigmoid_scalar(v),
            |v| {
                let s = sigmoid_scalar(v);
                s * (T::one() + v * (T::one() - s))
            },
        )
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum_all().mul_scalar(T::one() / T::from_usize(n).expect("usize fits"))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(dim_err!("sum_axis: axis {} out of range for {:?}", axis, self.shape()));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        {
            let d = self.data();
            for o in 0..outer {
                for k in 0..n {
                    let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for (a, &b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    gx[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let n = *self.shape().get(axis).ok_or_else(|| dim_err!("mean_axis: bad axis {axis}"))?;
        if n == 0 {
            return Err(dim_err!("mean over empty axis {axis}"));
        }
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(T::one() / T::from_usize(n).expect("usize fits")))
    }

    // ── shape manipulation ─────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape(), shape));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), vec![self.clone()], |g, _| vec![Some(g.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(dim_err!("invalid permutation {:?} for rank {}", axes, r));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let out = permute_data(&self.data(), &in_shape, axes);
        let mut inverse = vec![0; r];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape_c = out_shape.clone();
        Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move |g, _| vec![Some(permute_data(g, &out_shape_c, &inverse))]))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(dim_err!("transpose axes {a},{b} out of range"));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn cat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| dim_err!("cat of zero tensors"))?;
        let r = first.rank();
        if axis >= r {
            return Err(dim_err!("cat axis {axis} out of range"));
        }
        for p in parts {
            if p.rank() != r || (0..r).any(|d| d != axis && p.shape()[d] != first.shape()[d]) {
                return Err(dim_err!("cat shape mismatch {:?} vs {:?}", first.shape(), p.shape()));
            }
        }
        let outer = numel_of(&first.shape()[..axis]);
        let inner = numel_of(&first.shape()[axis + 1..]);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let parents: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
        Ok(Tensor::from_op(shape, out, parents, move |g, ps| {
            let mut grads: Vec<Option<Vec<T>>> = ps.iter().zip(&lens).map(|(p, &l)| p.requires_grad().then(|| Vec::with_capacity(outer * l * inner))).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                    }
                    off += l * inner;
                }
            }
            grads
        }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(dim_err!("narrow({axis}, {start}, {len}) out of range for {:?}", self.shape()));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + start + len) * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Rows of a `[vocab, dim]` table selected by `ids`, as `[ids.len(), dim]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(dim_err!("gather_rows needs a rank-2 table, got {:?}", self.shape()));
        }
        let (v, dim) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Lookup(format!("row {bad} out of range for table of {v} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        {
            let d = self.data();
            for &i in ids {
                out.extend_from_slice(&d[i * dim..(i + 1) * dim]);
            }
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(vec![ids.len(), dim], out, vec![self.clone()], move |g, _| {
            let mut gt = vec![T::zero(); v * dim];
            for (r, &i) in ids.iter().enumerate() {
                for c in 0..dim {
                    gt[i * dim + c] += g[r * dim + c];
                }
            }
            vec![Some(gt)]
        }))
    }

    // ── matrix products ────────────────────────────────────────────────

    /// `[..., m, k] x [k, n]` (shared right operand) or batched
    /// `[b.., m, k] x [b.., k, n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_impl(self, rhs, false)
    }

    /// `self x rhsᵀ` over the last two axes; `rhs` is `[n, k]` or `[b.., n, k]`.
    pub fn matmul_t(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_impl(self, rhs, true)
    }

    // ── normalisation ──────────────────────────────────────────────────

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(dim_err!("softmax axis {axis} out of range for {:?}", self.shape()));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        if n == 0 {
            return Err(dim_err!("softmax over an empty axis"));
        }
        let mut out = vec![T::zero(); self.numel()];
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut mx = T::neg_infinity();
                    for k in 0..n {
                        mx = mx.max(d[base + k * inner]);
                    }
                    let mut s = T::zero();
                    for k in 0..n {
                        let e = (d[base + k * inner] - mx).exp();
                        out[base + k * inner] = e;
                        s += e;
                    }
                    let inv = T::one() / s;
                    for k in 0..n {
                        out[base + k * inner] *= inv;
                    }
                }
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut dot = T::zero();
                    for k in 0..n {
                        dot += g[base + k * inner] * y[base + k * inner];
                    }
                    for k in 0..n {
                        let j = base + k * inner;
                        gx[j] = y[j] * (g[j] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Normalises each row of the last axis to zero mean and unit
    /// (population) variance. No affine parameters.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor<T>> {
        let c = *self.shape().last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        if c == 0 {
            return Err(dim_err!("layer_norm over an empty axis"));
        }
        let rows = self.numel() / c;
        let eps = T::from_f64c(eps);
        let cn = T::from_usize(c).expect("usize fits");
        let mut out = vec![T::zero(); self.numel()];
        let mut inv_std = vec![T::zero(); rows];
        {
            let d = self.data();
            for r in 0..rows {
                let row = &d[r * c..(r + 1) * c];
                let mean = row.iter().copied().sum::<T>() / cn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                    *o = (v - mean) * is;
                }
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); y.len()];
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let yr = &y[r * c..(r + 1) * c];
                let mg = gr.iter().copied().sum::<T>() / cn;
                let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / cn;
                for k in 0..c {
                    gx[r * c + k] = inv_std[r] * (gr[k] - mg - yr[k] * mgy);
                }
            }
            vec![Some(gx)]
        }))
    }
}

pub(crate) fn permute_data<T: Scalar>(data: &[T], in_shape: &[usize], axes: &[usize]) -> Vec<T> {
    let r = in_shape.len();
    let n = data.len();
    if r == 0 || n == 0 {
        return data.to_vec();
    }
    let mut in_strides = vec![1; r];
    for i in (0..r - 1).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    let last = r - 1;
    let (len, step) = (out_shape[last], src_strides[last]);
    let rows = n / len;
    for _ in 0..rows {
        for j in 0..len {
            out.push(data[off + j * step]);
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn matmul_impl<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return Err(dim_err!("matmul needs rank >= 2, got {:?} and {:?}", a.shape(), b.shape()));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (kb, n) = if tb { (b.shape()[rb - 1], b.shape()[rb - 2]) } else { (b.shape()[rb - 2], b.shape()[rb - 1]) };
    if k != kb {
        return Err(dim_err!("matmul inner extents differ: {:?} x {:?}{}", a.shape(), b.shape(), if tb { "ᵀ" } else { "" }));
    }
    let shared = rb == 2;
    let (batch, rows, out_shape) = if shared {
        let mut s = a.shape()[..ra - 1].to_vec();
        s.push(n);
        (1, a.numel() / k.max(1), s)
    } else {
        if a.shape()[..ra - 2] != b.shape()[..rb - 2] {
            return Err(dim_err!("matmul batch extents differ: {:?} vs {:?}", a.shape(), b.shape()));
        }
        let mut s = a.shape()[..ra - 2].to_vec();
        s.extend([m, n]);
        (numel_of(&a.shape()[..ra - 2]), m, s)
    };
    let rows = if k == 0 { numel_of(&a.shape()[..ra - 1]) / batch.max(1) } else { rows };
    let mut out = vec![T::zero(); batch * rows * n];
    {
        let (ad, bd) = (a.data(), b.data());
        for i in 0..batch {
            let bo = if shared { 0 } else { i * k * n };
            gemm(rows, k, n, &ad[i * rows * k..], false, &bd[bo..], tb, &mut out[i * rows * n..], false);
        }
    }
    Ok(Tensor::from_op(out_shape, out, vec![a.clone(), b.clone()], move |g, ps| {
        let (a, b) = (&ps[0], &ps[1]);
        let (ad, bd) = (a.data(), b.data());
        let ga = a.requires_grad().then(|| {
            let mut ga = vec![T::zero(); a.numel()];
            for i in 0..batch {
                let bo = if shared { 0 } else { i * k * n };
                // dA = G op(B)ᵀ
                gemm(rows, n, k, &g[i * rows * n..], false, &bd[bo..], !tb, &mut ga[i * rows * k..], false);
            }
            ga
        });
        let gb = b.requires_grad().then(|| {
            let mut gb = vec![T::zero(); b.numel()];
            for i in 0..batch {
                let (ao, go) = (i * rows * k, i * rows * n);
                let bo = if shared { 0 } else { i * k * n };
                if tb {
                    // dB = Gᵀ A, stored [n, k]
                    gemm(n, rows, k, &g[go..], true, &ad[ao..], false, &mut gb[bo..], shared);
                } else {
                    // dB = Aᵀ G, stored [k, n]
                    gemm(k, rows, n, &ad[ao..], true, &g[go..], false, &mut gb[bo..], shared);
                }
            }
            gb
        });
        vec![ga, gb]
    }))
}

/// `softmax(q kᵀ / sqrt(d)) v` for `q: [b, n, d]`, `k: [b, m, d]`, `v: [b, m, dv]`.
pub fn scaled_dot_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *q.shape().last().ok_or_else(|| dim_err!("attention on a scalar"))?;
    let scale = T::one() / T::from_usize(d.max(1)).expect("usize fits").sqrt();
    let logits = q.matmul_t(k)?.mul_scalar(scale);
    let axis = logits.rank() - 1;
    logits.softmax(axis)?.matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let i2 = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(i2.matmul(&m).unwrap().to_vec(), vec![1., 2., 3., 4.]);
    }

    #[test]
    fn row_times_column() {
        let a = t(&[1, 2], &[1., 2.]);
        let b = t(&[2, 1], &[3., 4.]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = t(&[2, 3], &[0.; 6]);
        let b = t(&[2, 2], &[0.; 4]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn broadcast_row_and_column() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let row = t(&[3], &[10., 20., 30.]);
        let col = t(&[2, 1], &[100., 200.]);
        assert_eq!(a.add(&row).unwrap().to_vec(), vec![11., 22., 33., 14., 25., 36.]);
        assert_eq!(a.mul(&col).unwrap().to_vec(), vec![100., 200., 300., 800., 1000., 1200.]);
        assert!(a.add(&t(&[2], &[1., 2.])).is_err());
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let s = t(&[2], &[0., 0.]).softmax(0).unwrap().to_vec();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = t(&[2], &[1000., 1000.]).softmax(0).unwrap().to_vec();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let e = Tensor::<f64>::zeros(&[2, 0]);
        assert!(matches!(e.softmax(1), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let c = t(&[3], &[5., 5., 5.]).layer_norm(1e-5).unwrap().to_vec();
        assert!(c.iter().all(|&v| v == 0.0));
        let n = t(&[2], &[1., -1.]).layer_norm(0.0).unwrap().to_vec();
        assert_eq!(n, vec![1., -1.]);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let s = t(&[3], &[0., -1000., 1000.]).sigmoid().to_vec();
        assert_eq!(s[0], 0.5);
        assert!(s[1] >= 0.0 && s[1] < 1e-300);
        assert_eq!(s[2], 1.0);
    }

    #[test]
    fn backward_sum_and_square() {
        let x = Tensor::<f64>::param(&[3], vec![1., -2., 4.]).unwrap();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1., 1., 1.]);
        let y = Tensor::<f64>::param(&[2], vec![1., 2.]).unwrap();
        y.square().sum_all().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![2., 4.]);
        // accumulation on repeat
        y.square().sum_all().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![4., 8.]);
        y.zero_grad();
        assert!(y.grad().is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::<f64>::param(&[2], vec![1., 2.]).unwrap();
        assert!(matches!(x.square().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn permute_roundtrip() {
        let x = t(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>());
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.to_vec()[1], 4.0);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn cat_and_narrow_invert() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[9., 8.]);
        let c = Tensor::cat(&[&a, &b], 1).unwrap();
        assert_eq!(c.to_vec(), vec![1., 2., 9., 3., 4., 8.]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().to_vec(), a.to_vec());
        assert_eq!(c.narrow(1, 2, 1).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f64>::param(&[2], vec![1., 2.]).unwrap();
        let y = super::super::no_grad(|| x.square().sum_all());
        assert!(!y.requires_grad());
        assert!(super::super::grad_enabled());
    }
}
