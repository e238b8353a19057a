//! Forward implementations and adjoint rules of every recorded operation.

use super::{ConvGeom, Graph, Node, Op, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{
    axis_split, broadcast_shape, broadcast_strides, for_each_broadcast, gemm, Layout, Scalar,
    Tensor,
};

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.data().iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric(format!("{what}: NaN input")));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        let mut ax = nd;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

impl<T: Scalar> Graph<T> {
    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = broadcast_shape(va.shape(), vb.shape())?;
        let data = if va.shape() == vb.shape() {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let sa = broadcast_strides(va.shape(), &out);
            let sb = broadcast_strides(vb.shape(), &out);
            let mut d = vec![T::zero(); out.iter().product()];
            let (xa, xb) = (va.data(), vb.data());
            for_each_broadcast(&out, &sa, &sb, |o, ia, ib| d[o] = f(xa[ia], xb[ib]));
            d
        };
        Ok(self.push(op, Tensor::new(&out, data)?))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x).map(f);
        self.push(op, v)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `log(1 + exp(x))`, stable for large |x|.
    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Matrix product over the last two axes. `a` is `[.., M, K]`; `b` is
    /// either a shared `[K, P]` matrix or batched `[.., K, P]` with the same
    /// leading extents as `a`. With `trans_b`, `b` is read as `[.., P, K]`.
    pub fn matmul_ext(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err!("matmul needs matrices, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, p) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let shared = sb.len() == 2;
        if k != kb || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(dim_err!(
                "matmul shape mismatch: {sa:?} x {sb:?}{}",
                if trans_b { " (transposed)" } else { "" }
            ));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, p]);
        let mut c = vec![T::zero(); batch * m * p];
        let lb = if trans_b { Layout::Trans } else { Layout::Plain };
        if shared {
            gemm(batch * m, k, p, va.data(), Layout::Plain, vb.data(), lb, &mut c, false);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    p,
                    &va.data()[i * m * k..],
                    Layout::Plain,
                    &vb.data()[i * k * p..],
                    lb,
                    &mut c[i * m * p..],
                    false,
                );
            }
        }
        self.add_macs((batch * m * k * p) as u64);
        Ok(self.push(Op::MatMul { a, b, trans_b }, Tensor::new(&out_shape, c)?))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, true)
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
        }
        Ok(shape)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    /// Softmax along `axis` restricted to entries where `keep` (broadcast to
    /// the shape of `x`) is nonzero. Excluded entries come out exactly zero;
    /// a lane with no kept entries is all zeros.
    pub fn masked_softmax(&self, x: Var, axis: usize, keep: Option<&Tensor<T>>) -> Result<Var> {
        let shape = self.check_axis(x, axis)?;
        let vx = self.value(x);
        check_finite(&vx, "softmax")?;
        let keep_flags: Option<Vec<bool>> = match keep {
            None => None,
            Some(k) => {
                let out = broadcast_shape(&shape, k.shape())?;
                if out != shape {
                    return Err(dim_err!(
                        "softmax mask {:?} does not broadcast onto {shape:?}",
                        k.shape()
                    ));
                }
                let sx = broadcast_strides(&shape, &shape);
                let sk = broadcast_strides(k.shape(), &shape);
                let mut flags = vec![false; vx.len()];
                let kd = k.data();
                for_each_broadcast(&shape, &sx, &sk, |o, _, ik| flags[o] = kd[ik] != T::zero());
                Some(flags)
            }
        };
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = vx.data();
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for n in 0..inner {
                let at = |i: usize| (o * len + i) * inner + n;
                let kept = |i: usize| keep_flags.as_ref().is_none_or(|f| f[at(i)]);
                let mut mx = T::neg_infinity();
                for i in 0..len {
                    if kept(i) {
                        mx = mx.max(xd[at(i)]);
                    }
                }
                if mx == T::neg_infinity() {
                    continue;
                }
                let mut s = T::zero();
                for i in 0..len {
                    if kept(i) {
                        let e = (xd[at(i)] - mx).exp();
                        y[at(i)] = e;
                        s += e;
                    }
                }
                for i in 0..len {
                    y[at(i)] = y[at(i)] / s;
                }
            }
        }
        Ok(self.push(Op::Softmax { x, axis }, Tensor::new(&shape, y)?))
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(x, axis)?;
        let vx = self.value(x);
        check_finite(&vx, "log_softmax")?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = vx.data();
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for n in 0..inner {
                let at = |i: usize| (o * len + i) * inner + n;
                let mx = (0..len).map(|i| xd[at(i)]).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|i| (xd[at(i)] - mx).exp()).sum();
                let lse = mx + s.ln();
                for i in 0..len {
                    y[at(i)] = xd[at(i)] - lse;
                }
            }
        }
        Ok(self.push(Op::LogSoftmax { x, axis }, Tensor::new(&shape, y)?))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(x, axis)?;
        let vx = self.value(x);
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = vx.data();
        let mut y = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &xd[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (acc, &v) in y[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out = shape;
        out[axis] = 1;
        Ok(self.push(Op::SumAxis { x, axis }, Tensor::new(&out, y)?))
    }

    /// Maximum along `axis`, keeping it with extent 1. The gradient goes to
    /// the first maximising entry.
    pub fn max_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(x, axis)?;
        let vx = self.value(x);
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = vx.data();
        let mut y = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for n in 0..inner {
                let mut best = 0;
                for i in 1..len {
                    if xd[(o * len + i) * inner + n] > xd[(o * len + best) * inner + n] {
                        best = i;
                    }
                }
                y[o * inner + n] = xd[(o * len + best) * inner + n];
                argmax[o * inner + n] = best;
            }
        }
        let mut out = shape;
        out[axis] = 1;
        Ok(self.push(Op::MaxAxis { x, axis, argmax }, Tensor::new(&out, y)?))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = (*self.value(x)).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let nd = vx.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("invalid permutation {perm:?} for shape {:?}", vx.shape()));
        }
        let (d, s) = permute_data(vx.data(), vx.shape(), perm);
        Ok(self.push(
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            Tensor::new(&s, d)?,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(dim_err!("transpose needs at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let base = self.check_axis(*first, axis)?;
        let vals: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(dim_err!("concat shape mismatch {s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            Tensor::new(&shape, out)?,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.check_axis(x, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(dim_err!(
                "narrow [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            ));
        }
        let vx = self.value(x);
        let (outer, full, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&vx.data()[s..s + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(Op::Narrow { x, axis, start }, Tensor::new(&oshape, out)?))
    }

    /// Row lookup: `table` is `[V, D]`; result is `[ids.len(), D]`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.ndim() != 2 {
            return Err(dim_err!("gather needs a 2-d table, got {:?}", vt.shape()));
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(Error::Vocabulary(format!("id {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(&[ids.len(), d], out)?,
        ))
    }

    /// 2-d convolution on NHWC input with a square kernel. `w` has shape
    /// `[kernel·kernel·C_in, C_out]` with rows ordered (ky, kx, c).
    pub fn conv2d(&self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let sx = vx.shape();
        if sx.len() != 4 {
            return Err(dim_err!("conv2d expects NHWC input, got {sx:?}"));
        }
        let (batch, height, width, channels) = (sx[0], sx[1], sx[2], sx[3]);
        let sw = vw.shape();
        if sw.len() != 2 || sw[0] != kernel * kernel * channels {
            return Err(dim_err!(
                "conv2d weight {sw:?} does not match kernel {kernel} and {channels} input channels"
            ));
        }
        if height + 2 * pad < kernel || width + 2 * pad < kernel || stride == 0 {
            return Err(dim_err!("conv2d geometry invalid for input {sx:?}"));
        }
        let geom = ConvGeom {
            batch,
            height,
            width,
            channels,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
            out_channels: sw[1],
        };
        let cols = im2col(vx.data(), &geom);
        let rows = batch * geom.out_height * geom.out_width;
        let kk = kernel * kernel * channels;
        let mut out = vec![T::zero(); rows * geom.out_channels];
        gemm(rows, kk, geom.out_channels, &cols, Layout::Plain, vw.data(), Layout::Plain, &mut out, false);
        self.add_macs((rows * kk * geom.out_channels) as u64);
        let shape = [batch, geom.out_height, geom.out_width, geom.out_channels];
        Ok(self.push(Op::Conv2d { x, w, geom, cols }, Tensor::new(&shape, out)?))
    }

    /// Nearest-neighbour 2× upsampling of an NHWC tensor.
    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 {
            return Err(dim_err!("upsample2x expects NHWC input, got {s:?}"));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![T::zero(); b * 4 * h * w * c];
        let xd = vx.data();
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((bi * h + y / 2) * w + xx / 2) * c;
                    let dst = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
        Ok(self.push(Op::Upsample2x(x), Tensor::new(&[b, 2 * h, 2 * w, c], out)?))
    }

    /// Normalise over the last axis to zero mean and unit variance (no
    /// affine part).
    pub fn layer_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("non-empty shape");
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).expect("usize to float");
        let rows = vx.len() / d;
        let mut xhat = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let out = Tensor::new(vx.shape(), xhat.clone())?;
        Ok(self.push(Op::LayerNorm { x, xhat, inv_std }, out))
    }

    // -- composites ---------------------------------------------------------

    /// `x · w + b` over the last axis.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.kernel * g.kernel * g.channels;
    let mut cols = vec![T::zero(); g.batch * g.out_height * g.out_width * kk];
    let c = g.channels;
    for b in 0..g.batch {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = ((b * g.out_height + oy) * g.out_width + ox) * kk;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let dst = row + (ky * g.kernel + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let kk = g.kernel * g.kernel * g.channels;
    let c = g.channels;
    for b in 0..g.batch {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = ((b * g.out_height + oy) * g.out_width + ox) * kk;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let src = row + (ky * g.kernel + kx) * c;
                        for (d, &s) in dx[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient slot for `id`, allocated on first use.
fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    id: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[id.0].requires_grad {
        return None;
    }
    let len = nodes[id.0].value.len();
    Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); len]))
}

/// Accumulate `g` (shaped like `out`) into the gradient of `x`, summing over
/// broadcast axes. `scale(o, ix)` multiplies each contribution.
fn acc_broadcast<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    x: Var,
    other: Var,
    out: &[usize],
    g: &[T],
    f: impl Fn(usize, usize, usize) -> T,
) {
    let xs = nodes[x.0].value.shape().to_vec();
    let os = nodes[other.0].value.shape().to_vec();
    let Some(dst) = slot(nodes, grads, x) else {
        return;
    };
    let sx = broadcast_strides(&xs, out);
    let so = broadcast_strides(&os, out);
    for_each_broadcast(out, &sx, &so, |o, ix, io| {
        dst[ix] += g[o] * f(o, ix, io);
    });
}

pub(super) fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let node = &nodes[id];
    let y = node.value.data();
    let out = node.value.shape();
    let val = |v: Var| nodes[v.0].value.data();

    // elementwise unary helper
    let unary = |grads: &mut [Option<Vec<T>>], x: Var, d: &dyn Fn(usize) -> T| {
        if let Some(dst) = slot(nodes, grads, x) {
            for i in 0..dst.len() {
                dst[i] += g[i] * d(i);
            }
        }
    };

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_broadcast(nodes, grads, *a, *b, out, g, |_, _, _| T::one());
            acc_broadcast(nodes, grads, *b, *a, out, g, |_, _, _| T::one());
        }
        Op::Sub(a, b) => {
            acc_broadcast(nodes, grads, *a, *b, out, g, |_, _, _| T::one());
            acc_broadcast(nodes, grads, *b, *a, out, g, |_, _, _| -T::one());
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(*a), val(*b));
            acc_broadcast(nodes, grads, *a, *b, out, g, |_, _, ib| db[ib]);
            acc_broadcast(nodes, grads, *b, *a, out, g, |_, _, ia| da[ia]);
        }
        Op::Div(a, b) => {
            let (da, db) = (val(*a), val(*b));
            acc_broadcast(nodes, grads, *a, *b, out, g, |_, _, ib| T::one() / db[ib]);
            acc_broadcast(nodes, grads, *b, *a, out, g, |_, ib, ia| {
                -da[ia] / (db[ib] * db[ib])
            });
        }
        Op::Scale(x, c) => unary(grads, *x, &|_| *c),
        Op::AddScalar(x) => unary(grads, *x, &|_| T::one()),
        Op::Relu(x) => unary(grads, *x, &|i| {
            if y[i] > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }),
        Op::Square(x) => {
            let dx = val(*x);
            unary(grads, *x, &|i| dx[i] + dx[i])
        }
        Op::Sqrt(x) => unary(grads, *x, &|i| T::one() / (y[i] + y[i])),
        Op::Exp(x) => unary(grads, *x, &|i| y[i]),
        Op::Log(x) => {
            let dx = val(*x);
            unary(grads, *x, &|i| T::one() / dx[i])
        }
        Op::Sigmoid(x) => unary(grads, *x, &|i| y[i] * (T::one() - y[i])),
        Op::Softplus(x) => {
            let dx = val(*x);
            unary(grads, *x, &|i| sigmoid(dx[i]))
        }
        Op::MatMul { a, b, trans_b } => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (va.shape(), vb.shape());
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let p = out[out.len() - 1];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let shared = sb.len() == 2;
            // dA = dC · Bᵀ   (or dC · B when b is stored transposed)
            let lb = if *trans_b { Layout::Plain } else { Layout::Trans };
            if let Some(da) = slot(nodes, grads, *a) {
                if shared {
                    gemm(batch * m, p, k, g, Layout::Plain, vb.data(), lb, da, true);
                } else {
                    for i in 0..batch {
                        gemm(
                            m,
                            p,
                            k,
                            &g[i * m * p..],
                            Layout::Plain,
                            &vb.data()[i * k * p..],
                            lb,
                            &mut da[i * m * k..],
                            true,
                        );
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                let rows = if shared { 1 } else { batch };
                let mm = if shared { batch * m } else { m };
                for i in 0..rows {
                    let ga = &g[i * mm * p..];
                    let aa = &va.data()[i * mm * k..];
                    let dst = &mut db[i * k * p..];
                    if *trans_b {
                        // dB (P×K) = dCᵀ · A
                        gemm(p, mm, k, ga, Layout::Trans, aa, Layout::Plain, dst, true);
                    } else {
                        // dB (K×P) = Aᵀ · dC
                        gemm(k, mm, p, aa, Layout::Trans, ga, Layout::Plain, dst, true);
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(out, *axis);
            if let Some(dst) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for n in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + n;
                        let s: T = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            dst[at(i)] += y[at(i)] * (g[at(i)] - s);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = axis_split(out, *axis);
            if let Some(dst) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for n in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + n;
                        let s: T = (0..len).map(|i| g[at(i)]).sum();
                        for i in 0..len {
                            dst[at(i)] += g[at(i)] - y[at(i)].exp() * s;
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dst) = slot(nodes, grads, *x) {
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumAxis { x, axis } => {
            let xs = nodes[x.0].value.shape().to_vec();
            let (outer, len, inner) = axis_split(&xs, *axis);
            if let Some(dst) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..len {
                        for n in 0..inner {
                            dst[(o * len + i) * inner + n] += g[o * inner + n];
                        }
                    }
                }
            }
        }
        Op::MaxAxis { x, axis, argmax } => {
            let xs = nodes[x.0].value.shape().to_vec();
            let (outer, len, inner) = axis_split(&xs, *axis);
            if let Some(dst) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for n in 0..inner {
                        let i = argmax[o * inner + n];
                        dst[(o * len + i) * inner + n] += g[o * inner + n];
                    }
                }
            }
        }
        Op::Reshape(x) => unary(grads, *x, &|_| T::one()),
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (back, _) = permute_data(g, out, &inv);
            if let Some(dst) = slot(nodes, grads, *x) {
                for (d, v) in dst.iter_mut().zip(back) {
                    *d += v;
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = axis_split(out, *axis);
            let mut offset = 0;
            for &x in xs {
                let len = nodes[x.0].value.shape()[*axis];
                if let Some(dst) = slot(nodes, grads, x) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let d0 = o * len * inner;
                        for (d, &s) in dst[d0..d0 + len * inner].iter_mut().zip(&g[src..]) {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = nodes[x.0].value.shape().to_vec();
            let (outer, full, inner) = axis_split(&xs, *axis);
            let len = out[*axis];
            if let Some(dst) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let d0 = (o * full + start) * inner;
                    let s0 = o * len * inner;
                    for (d, &s) in dst[d0..d0 + len * inner].iter_mut().zip(&g[s0..]) {
                        *d += s;
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            let d = out[1];
            if let Some(dst) = slot(nodes, grads, *table) {
                for (r, &i) in ids.iter().enumerate() {
                    for (a, &v) in dst[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..]) {
                        *a += v;
                    }
                }
            }
        }
        Op::Conv2d { x, w, geom, cols } => {
            let rows = geom.batch * geom.out_height * geom.out_width;
            let kk = geom.kernel * geom.kernel * geom.channels;
            let co = geom.out_channels;
            if let Some(dw) = slot(nodes, grads, *w) {
                gemm(kk, rows, co, cols, Layout::Trans, g, Layout::Plain, dw, true);
            }
            if nodes[x.0].requires_grad {
                let wd = nodes[w.0].value.data();
                let mut dcols = vec![T::zero(); rows * kk];
                gemm(rows, co, kk, g, Layout::Plain, wd, Layout::Trans, &mut dcols, false);
                if let Some(dx) = slot(nodes, grads, *x) {
                    col2im(&dcols, geom, dx);
                }
            }
        }
        Op::Upsample2x(x) => {
            let (b, h2, w2, c) = (out[0], out[1], out[2], out[3]);
            let (h, w) = (h2 / 2, w2 / 2);
            if let Some(dst) = slot(nodes, grads, *x) {
                for bi in 0..b {
                    for yy in 0..h2 {
                        for xx in 0..w2 {
                            let s = ((bi * h2 + yy) * w2 + xx) * c;
                            let d = ((bi * h + yy / 2) * w + xx / 2) * c;
                            for (a, &v) in dst[d..d + c].iter_mut().zip(&g[s..s + c]) {
                                *a += v;
                            }
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, xhat, inv_std } => {
            let d = out[out.len() - 1];
            let dn = T::from_usize(d).expect("usize to float");
            if let Some(dst) = slot(nodes, grads, *x) {
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mg = gr.iter().copied().sum::<T>() / dn;
                    let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for j in 0..d {
                        dst[r * d + j] += inv * (gr[j] - mg - xr[j] * mgx);
                    }
                }
            }
        }
    }
}
