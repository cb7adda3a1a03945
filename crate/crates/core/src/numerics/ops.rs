//! Differentiable operations on [`Graph`] values.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::scalar::{gemm, MatRef, Scalar};
use super::tensor::{numel, Tensor};

const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu_scalar<S: Scalar>(x: S) -> S {
    let k = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = S::lit(0.5);
    half * x * (S::one() + (k * (x + S::lit(GELU_C) * x * x * x)).tanh())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let k = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = S::lit(0.5);
    let t = (k * (x + S::lit(GELU_C) * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + S::lit(3.0 * GELU_C) * x * x)
}

pub(crate) fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Sums `g` (shape `big`) down to `small`, where `small` is a suffix of
/// `big` or holds a single element.
fn reduce_to<S: Scalar>(g: &Tensor<S>, small: &[usize]) -> Tensor<S> {
    let inner = numel(small);
    let mut out = vec![S::zero(); inner];
    if inner == 1 {
        out[0] = g.sum();
    } else {
        for chunk in g.data().chunks(inner) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
    }
    Tensor::from_vec(small, out).expect("reduce shape")
}

/// Batched matrix product with optional transposes of the trailing two axes.
/// `b` may be rank 2 and is then shared across all batches of `a`.
fn bmm<S: Scalar>(a: &Tensor<S>, ta: bool, b: &Tensor<S>, tb: bool) -> Result<Tensor<S>> {
    let (ar, br) = (a.rank(), b.rank());
    if ar < 2 || br < 2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (a0, a1) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (b0, b1) = (b.shape()[br - 2], b.shape()[br - 1]);
    let (n, k) = if ta { (a1, a0) } else { (a0, a1) };
    let (kb, m) = if tb { (b1, b0) } else { (b0, b1) };
    let batch_a = &a.shape()[..ar - 2];
    let batch_b = &b.shape()[..br - 2];
    let shared_b = batch_b.is_empty();
    if k != kb || (!shared_b && batch_a != batch_b) {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let batches = numel(batch_a);
    let mut shape = batch_a.to_vec();
    shape.extend([n, m]);
    let mut out = vec![S::zero(); batches * n * m];
    let (asz, bsz) = (a0 * a1, b0 * b1);
    for i in 0..batches {
        let am = MatRef::new(&a.data()[i * asz..(i + 1) * asz], a0, a1);
        let boff = if shared_b { 0 } else { i * bsz };
        let bm = MatRef::new(&b.data()[boff..boff + bsz], b0, b1);
        let am = if ta { am.t() } else { am };
        let bm = if tb { bm.t() } else { bm };
        gemm(am, bm, S::zero(), &mut out[i * n * m..(i + 1) * n * m]);
    }
    Tensor::from_vec(&shape, out)
}

fn sum_leading<S: Scalar>(t: &Tensor<S>, keep: &[usize]) -> Tensor<S> {
    reduce_to(t, keep)
}

impl<'p, S: Scalar> Graph<'p, S> {
    fn unary(
        &self,
        x: Var,
        f: impl Fn(S) -> S,
        df: impl Fn(S, S) -> S + 'static,
    ) -> Var {
        let xv = self.value(x);
        let y = Rc::new(xv.map(&f));
        let yc = Rc::clone(&y);
        let out = (*y).clone();
        self.push_op(out, &[x], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(yc.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), data).expect("unary grad"))]
        })
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -S::one())
    }

    pub fn scale(&self, x: Var, c: S) -> Var {
        self.unary(x, |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, x: Var, c: S) -> Var {
        self.unary(x, |v| v + c, |_, _| S::one())
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |x, _| S::one() / x)
    }

    /// Square root; the derivative at zero is taken as zero.
    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.sqrt(),
            |_, y| {
                if y > S::zero() {
                    S::lit(0.5) / y
                } else {
                    S::zero()
                }
            },
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y| S::one() - y * y)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, |_, y| y * (S::one() - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, gelu_scalar, |x, _| gelu_grad_scalar(x))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.abs(),
            |x, _| {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| x + x)
    }

    fn binary_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        da: impl Fn(S, S, S) -> S + 'static,
        db: impl Fn(S, S, S) -> S + 'static,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(op, av.shape(), bv.shape()));
        }
        let y = av.zip_map(&bv, f)?;
        Ok(self.push_op(y, &[a, b], move |g, needs| {
            let grad = |d: &dyn Fn(S, S, S) -> S| {
                let data = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(&g, (&x, &y))| d(g, x, y))
                    .collect();
                Tensor::from_vec(g.shape(), data).expect("binary grad")
            };
            vec![
                needs[0].then(|| grad(&da)),
                needs[1].then(|| grad(&db)),
            ]
        }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(
            "div",
            a,
            b,
            |x, y| x / y,
            |g, _, y| g / y,
            |g, x, y| -g * x / (y * y),
        )
    }

    /// Repeats `x` to `shape`. `x` must hold one element or have a shape
    /// equal to a suffix of `shape`.
    pub fn broadcast_to(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape().to_vec();
        if xs == shape {
            return Ok(x);
        }
        let scalar = xv.len() == 1;
        let suffix = xs.len() <= shape.len() && shape[shape.len() - xs.len()..] == xs[..];
        if !scalar && !suffix {
            return Err(Error::dim("broadcast_to", &xs, shape));
        }
        let n = numel(shape);
        let data: Vec<S> = if scalar {
            vec![xv.data()[0]; n]
        } else {
            xv.data().iter().copied().cycle().take(n).collect()
        };
        let y = Tensor::from_vec(shape, data)?;
        Ok(self.push_op(y, &[x], move |g, _| vec![Some(reduce_to(g, &xs))]))
    }

    pub fn add_bcast(&self, x: Var, b: Var) -> Result<Var> {
        let b = self.broadcast_to(b, &self.shape(x))?;
        self.add(x, b)
    }

    pub fn mul_bcast(&self, x: Var, b: Var) -> Result<Var> {
        let b = self.broadcast_to(b, &self.shape(x))?;
        self.mul(x, b)
    }

    pub fn div_bcast(&self, x: Var, b: Var) -> Result<Var> {
        let b = self.broadcast_to(b, &self.shape(x))?;
        self.div(x, b)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        self.push_op(Tensor::scalar(xv.sum()), &[x], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, S::one() / S::lit(n as f64))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", &shape, &[axis]));
        }
        let outer = numel(&shape[..axis]);
        let n = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xv.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let y = Tensor::from_vec(&oshape, out)?;
        Ok(self.push_op(y, &[x], move |g, _| {
            let mut data = vec![S::zero(); outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    data[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_vec(&shape, data).expect("sum_axis grad"))]
        }))
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", &self.shape(x), &[axis]))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, S::one() / S::lit(n.max(1) as f64)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let old = xv.shape().to_vec();
        let y = xv.reshape(shape)?;
        Ok(self.push_op(y, &[x], move |g, _| {
            vec![Some(g.reshape(&old).expect("reshape grad"))]
        }))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = self.value(x).permute(perm)?;
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(self.push_op(y, &[x], move |g, _| {
            vec![Some(g.permute(&inv).expect("permute grad"))]
        }))
    }

    /// Swaps the trailing two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", &self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, len]));
        }
        let outer = numel(&shape[..axis]);
        let n = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let y = Tensor::from_vec(&oshape, data)?;
        Ok(self.push_op(y, &[x], move |g, _| {
            let mut d = vec![S::zero(); outer * n * inner];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                d[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_vec(&shape, d).expect("slice grad"))]
        }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or(Error::EmptyInput("concat"))?;
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&x| self.shape(x)).collect();
        let base = &shapes[0];
        if axis >= base.len() {
            return Err(Error::dim("concat", base, &[axis]));
        }
        for s in &shapes[1..] {
            let ok = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", base, s));
            }
        }
        if xs.len() == 1 {
            return Ok(*first);
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let lens: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        let total: usize = lens.iter().sum();
        let vals: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in vals.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut oshape = base.clone();
        oshape[axis] = total;
        let y = Tensor::from_vec(&oshape, data)?;
        Ok(self.push_op(y, xs, move |g, needs| {
            let mut out = Vec::with_capacity(lens.len());
            let mut offset = 0;
            for ((s, &l), &need) in shapes.iter().zip(&lens).zip(needs) {
                if need {
                    let mut d = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        let b = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[b..b + l * inner]);
                    }
                    out.push(Some(Tensor::from_vec(s, d).expect("concat grad")));
                } else {
                    out.push(None);
                }
                offset += l;
            }
            out
        }))
    }

    /// Gathers entries of axis 0.
    pub fn select_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(Error::dim("select_rows", &shape, rows));
        }
        let inner = numel(&shape[1..]);
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&xv.data()[r * inner..(r + 1) * inner]);
        }
        let mut oshape = shape.clone();
        oshape[0] = rows.len();
        let y = Tensor::from_vec(&oshape, data)?;
        let rows = rows.to_vec();
        Ok(self.push_op(y, &[x], move |g, _| {
            let mut d = vec![S::zero(); numel(&shape)];
            for (i, &r) in rows.iter().enumerate() {
                for (dst, &s) in d[r * inner..(r + 1) * inner]
                    .iter_mut()
                    .zip(&g.data()[i * inner..(i + 1) * inner])
                {
                    *dst += s;
                }
            }
            vec![Some(Tensor::from_vec(&shape, d).expect("select grad"))]
        }))
    }

    /// Extends `[C, H, W]` to `[C, h, w]` by replicating the last row/column.
    pub fn pad_replicate(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() != 3 || h < shape[1] || w < shape[2] || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::dim("pad_replicate", &shape, &[h, w]));
        }
        if h == shape[1] && w == shape[2] {
            return Ok(x);
        }
        let (c, hi, wi) = (shape[0], shape[1], shape[2]);
        let src = move |y: usize, x: usize| (y.min(hi - 1), x.min(wi - 1));
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let (sy, sx) = src(y, xx);
                    data.push(xv.data()[(ch * hi + sy) * wi + sx]);
                }
            }
        }
        let out = Tensor::from_vec(&[c, h, w], data)?;
        Ok(self.push_op(out, &[x], move |g, _| {
            let mut d = vec![S::zero(); c * hi * wi];
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let (sy, sx) = src(y, xx);
                        d[(ch * hi + sy) * wi + sx] += g.data()[(ch * h + y) * w + xx];
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[c, hi, wi], d).expect("pad grad"))]
        }))
    }

    /// Keeps the top-left `[C, h, w]` block.
    pub fn crop(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() != 3 || h > shape[1] || w > shape[2] {
            return Err(Error::dim("crop", &shape, &[h, w]));
        }
        if h == shape[1] && w == shape[2] {
            return Ok(x);
        }
        let (c, hi, wi) = (shape[0], shape[1], shape[2]);
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let b = (ch * hi + y) * wi;
                data.extend_from_slice(&xv.data()[b..b + w]);
            }
        }
        let out = Tensor::from_vec(&[c, h, w], data)?;
        Ok(self.push_op(out, &[x], move |g, _| {
            let mut d = vec![S::zero(); c * hi * wi];
            for ch in 0..c {
                for y in 0..h {
                    let b = (ch * hi + y) * wi;
                    d[b..b + w].copy_from_slice(&g.data()[(ch * h + y) * w..(ch * h + y + 1) * w]);
                }
            }
            vec![Some(Tensor::from_vec(&[c, hi, wi], d).expect("crop grad"))]
        }))
    }

    fn matmul_ex(&self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        // fold the batch of `a` into rows when `b` is a shared matrix
        if bv.rank() == 2 && av.rank() > 2 && !ta {
            let s = av.shape().to_vec();
            let rows = numel(&s[..s.len() - 1]);
            let a2 = self.reshape(a, &[rows, s[s.len() - 1]])?;
            let y = self.matmul_ex(a2, false, b, tb)?;
            let mut os = s[..s.len() - 1].to_vec();
            os.push(self.shape(y)[1]);
            return self.reshape(y, &os);
        }
        if bv.rank() == 2 && av.rank() > 2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let y = bmm(&av, ta, &bv, tb)?;
        let shared_b = bv.rank() == 2 && av.rank() == 2;
        debug_assert!(shared_b || bv.rank() == av.rank());
        Ok(self.push_op(y, &[a, b], move |g, needs| {
            let da = needs[0].then(|| {
                if ta {
                    bmm(&bv, tb, g, true)
                } else {
                    bmm(g, false, &bv, !tb)
                }
                .expect("matmul grad a")
            });
            let db = needs[1].then(|| {
                if tb {
                    bmm(g, true, &av, ta)
                } else {
                    bmm(&av, !ta, g, false)
                }
                .expect("matmul grad b")
            });
            vec![da, db]
        }))
    }

    /// `[..., n, k] x [..., k, m]`; a rank-2 right operand is shared by all batches.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a * b^T` over the trailing two axes.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    /// `y[..., o] = sum_i x[..., i] w[o, i] + b[o]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(Error::dim("linear", &xs, &ws));
        }
        let y = if xs.len() == 1 {
            let x2 = self.reshape(x, &[1, ws[1]])?;
            let y = self.matmul_nt(x2, w)?;
            self.reshape(y, &[ws[0]])?
        } else {
            self.matmul_nt(x, w)?
        };
        match b {
            Some(b) => {
                let bs = self.shape(b);
                if bs != [ws[0]] {
                    return Err(Error::dim("linear bias", &bs, &ws));
                }
                self.add_bcast(y, b)
            }
            None => Ok(y),
        }
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("softmax", &shape, &[]))?;
        let mut y = xv.data().to_vec();
        if n > 0 {
            for row in y.chunks_mut(n) {
                let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
                let mut z = S::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        let y = Rc::new(Tensor::from_vec(&shape, y)?);
        let yc = Rc::clone(&y);
        Ok(self.push_op((*y).clone(), &[x], move |g, _| {
            let mut d = vec![S::zero(); g.len()];
            if n > 0 {
                for ((dr, gr), yr) in d
                    .chunks_mut(n)
                    .zip(g.data().chunks(n))
                    .zip(yc.data().chunks(n))
                {
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
            }
            vec![Some(Tensor::from_vec(g.shape(), d).expect("softmax grad"))]
        }))
    }

    /// Normalizes over the last axis (epsilon 1e-5), then applies `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let shape = xv.shape().to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("layer_norm", &shape, &[]))?;
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(Error::dim("layer_norm", &shape, gv.shape()));
        }
        let eps = S::lit(1e-5);
        let rows = if n == 0 { 0 } else { xv.len() / n };
        let mut xhat = vec![S::zero(); xv.len()];
        let mut inv_std = vec![S::zero(); rows];
        let nf = S::lit(n as f64);
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let y: Vec<S> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv.data()[i % n] + bv.data()[i % n])
            .collect();
        let y = Tensor::from_vec(&shape, y)?;
        Ok(self.push_op(y, &[x, gain, bias], move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut d = vec![S::zero(); gd.len()];
                for r in 0..rows {
                    let xh = &xhat[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let dxh: Vec<S> = gr.iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                    let m1 = dxh.iter().copied().sum::<S>() / nf;
                    let m2 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>() / nf;
                    for i in 0..n {
                        d[r * n + i] = inv_std[r] * (dxh[i] - m1 - xh[i] * m2);
                    }
                }
                Tensor::from_vec(&shape, d).expect("ln grad")
            });
            let dg = needs[1].then(|| {
                let mut d = vec![S::zero(); n];
                for (i, (&gi, &h)) in gd.iter().zip(&xhat).enumerate() {
                    d[i % n] += gi * h;
                }
                Tensor::from_vec(&[n], d).expect("ln gain grad")
            });
            let db = needs[2].then(|| sum_leading(g, &[n]));
            vec![dx, dg, db]
        }))
    }

    /// Zero-padded "same" cross-correlation of `[C_in, H, W]` with
    /// `[C_out, C_in, kh, kw]` (odd kernel extents only).
    pub fn conv2d(&self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (xs, ks) = (xv.shape().to_vec(), kv.shape().to_vec());
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return Err(Error::dim("conv2d", &xs, &ks));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::UnsupportedKernel { kh, kw });
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [cout] {
                return Err(Error::dim("conv2d bias", &bs, &[cout]));
            }
        }
        let geo = ConvGeom { cin, h, w, kh, kw };
        let cols = Rc::new(geo.im2col(xv.data()));
        let hw = h * w;
        let kk = cin * kh * kw;
        let mut out = vec![S::zero(); cout * hw];
        gemm(
            MatRef::new(kv.data(), cout, kk),
            MatRef::new(&cols, kk, hw),
            S::zero(),
            &mut out,
        );
        if let Some(b) = bias {
            let bv = self.value(b);
            for (co, row) in out.chunks_mut(hw.max(1)).enumerate().take(cout) {
                for v in row.iter_mut() {
                    *v += bv.data()[co];
                }
            }
        }
        let y = Tensor::from_vec(&[cout, h, w], out)?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        Ok(self.push_op(y, &parents, move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut dcols = vec![S::zero(); kk * hw];
                gemm(
                    MatRef::new(kv.data(), cout, kk).t(),
                    MatRef::new(gd, cout, hw),
                    S::zero(),
                    &mut dcols,
                );
                Tensor::from_vec(&[cin, h, w], geo.col2im(&dcols)).expect("conv dx")
            });
            let dk = needs[1].then(|| {
                let mut d = vec![S::zero(); cout * kk];
                gemm(
                    MatRef::new(gd, cout, hw),
                    MatRef::new(&cols, kk, hw).t(),
                    S::zero(),
                    &mut d,
                );
                Tensor::from_vec(&[cout, cin, kh, kw], d).expect("conv dk")
            });
            let mut out = vec![dx, dk];
            if needs.len() > 2 {
                out.push(needs[2].then(|| {
                    let d = (0..cout)
                        .map(|co| gd[co * hw..(co + 1) * hw].iter().copied().sum())
                        .collect();
                    Tensor::from_vec(&[cout], d).expect("conv db")
                }));
            }
            out
        }))
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    /// Rows indexed by (c, ky, kx), columns by output pixel.
    fn im2col<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let (ph, pw) = ((self.kh - 1) / 2, (self.kw - 1) / 2);
        let hw = self.h * self.w;
        let mut cols = vec![S::zero(); self.cin * self.kh * self.kw * hw];
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * hw;
                    for y in 0..self.h {
                        let sy = y + ky;
                        if sy < ph || sy - ph >= self.h {
                            continue;
                        }
                        let sy = sy - ph;
                        for xx in 0..self.w {
                            let sx = xx + kx;
                            if sx < pw || sx - pw >= self.w {
                                continue;
                            }
                            cols[row + y * self.w + xx] = x[(c * self.h + sy) * self.w + sx - pw];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<S: Scalar>(&self, cols: &[S]) -> Vec<S> {
        let (ph, pw) = ((self.kh - 1) / 2, (self.kw - 1) / 2);
        let hw = self.h * self.w;
        let mut x = vec![S::zero(); self.cin * hw];
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * hw;
                    for y in 0..self.h {
                        let sy = y + ky;
                        if sy < ph || sy - ph >= self.h {
                            continue;
                        }
                        let sy = sy - ph;
                        for xx in 0..self.w {
                            let sx = xx + kx;
                            if sx < pw || sx - pw >= self.w {
                                continue;
                            }
                            x[(c * self.h + sy) * self.w + sx - pw] += cols[row + y * self.w + xx];
                        }
                    }
                }
            }
        }
        x
    }
}
