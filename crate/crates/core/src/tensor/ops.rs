//! Core differentiable operations: elementwise, matmul, softmax, shape
//! movement, reductions.
//!
//! Every reduction accumulates in ascending index order so results do not
//! depend on how work is scheduled.

use crate::error::{Error, Result};

use super::tape::{Cost, Tape, Var};
use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, kind: Binary, a: Var, b: Var) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let shape = self.shape(a).to_vec();
        self.emit(op, &[a, b], shape, Cost::MOVE, move |t| {
            let (x, y) = (t.value(a), t.value(b));
            let out = match kind {
                Binary::Add => x.iter().zip(y).map(|(&p, &q)| p + q).collect(),
                Binary::Sub => x.iter().zip(y).map(|(&p, &q)| p - q).collect(),
                Binary::Mul => x.iter().zip(y).map(|(&p, &q)| p * q).collect(),
            };
            Ok((
                out,
                Some(Box::new(move |ctx, sink| {
                    let g = ctx.grad();
                    match kind {
                        Binary::Add | Binary::Sub => {
                            if sink.wants(a) {
                                sink.add(a, g.to_vec());
                            }
                            if sink.wants(b) {
                                let gb = match kind {
                                    Binary::Sub => g.iter().map(|&v| -v).collect(),
                                    _ => g.to_vec(),
                                };
                                sink.add(b, gb);
                            }
                        }
                        Binary::Mul => {
                            if sink.wants(a) {
                                let y = ctx.value(b);
                                sink.add(a, g.iter().zip(y).map(|(&p, &q)| p * q).collect());
                            }
                            if sink.wants(b) {
                                let x = ctx.value(a);
                                sink.add(b, g.iter().zip(x).map(|(&p, &q)| p * q).collect());
                            }
                        }
                    }
                })),
            ))
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", Binary::Mul, a, b)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        self.emit("scale", &[x], shape, Cost::MOVE, move |t| {
            let out = t.value(x).iter().map(|&v| v * s).collect();
            Ok((
                out,
                Some(Box::new(move |ctx, sink| {
                    sink.add(x, ctx.grad().iter().map(|&g| g * s).collect());
                })),
            ))
        })
    }

    /// Pointwise map `f` with derivative `df(x, y)` evaluated at input `x`
    /// and output `y`.
    pub(crate) fn unary<F, D>(&mut self, op: &'static str, x: Var, f: F, df: D) -> Result<Var>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let shape = self.shape(x).to_vec();
        self.emit(op, &[x], shape, Cost::MOVE, move |t| {
            let out = t.value(x).iter().map(|&v| f(v)).collect();
            Ok((
                out,
                Some(Box::new(move |ctx, sink| {
                    let xs = ctx.value(x);
                    let ys = ctx.output();
                    let g = ctx.grad();
                    let slot = sink.slot(x);
                    for i in 0..g.len() {
                        slot[i] = slot[i] + g[i] * df(xs[i], ys[i]);
                    }
                })),
            ))
        })
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary("recip", x, |v| v.recip(), |_, y| -(y * y))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let two = T::lit(2.0);
        self.unary("square", x, |v| v * v, move |v, _| two * v)
    }

    /// Multiplies each slice along `axis` by the matching entry of the
    /// rank-1 tensor `s`.
    pub fn scale_along_axis(&mut self, x: Var, s: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(s) != [shape[axis]] {
            return Err(Error::mismatch("scale_along_axis", &shape, self.shape(s)));
        }
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        self.emit("scale_along_axis", &[x, s], shape, Cost::MOVE, move |t| {
            let xs = t.value(x);
            let ss = t.value(s);
            let out = xs
                .iter()
                .enumerate()
                .map(|(i, &v)| v * ss[(i / inner) % extent])
                .collect();
            Ok((
                out,
                Some(Box::new(move |ctx, sink| {
                    let g = ctx.grad();
                    if sink.wants(x) {
                        let ss = ctx.value(s);
                        let gx = g
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| v * ss[(i / inner) % extent])
                            .collect();
                        sink.add(x, gx);
                    }
                    if sink.wants(s) {
                        let xs = ctx.value(x);
                        let slot = sink.slot(s);
                        for (i, (&gv, &xv)) in g.iter().zip(xs).enumerate() {
                            let k = (i / inner) % extent;
                            slot[k] = slot[k] + gv * xv;
                        }
                    }
                })),
            ))
        })
    }

    fn batch_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::mismatch(op, sa, sb));
        }
        let lead = sa[..sa.len() - 2].to_vec();
        Ok((lead.iter().product(), lead))
    }

    /// Batched `a · b` with `a: [.., m, k]`, `b: [.., k, n]`. Each output
    /// element accumulates over ascending `k`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, lead) = self.batch_dims("matmul", a, b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::mismatch("matmul", sa, sb));
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let cost = Cost::macs(batch * m * k * n);
        self.emit("matmul", &[a, b], shape, cost, move |t| {
            let (av, bv) = (t.value(a), t.value(b));
            let mut out = vec![T::zero(); batch * m * n];
            for z in 0..batch {
                let (ab, bb) = (&av[z * m * k..][..m * k], &bv[z * k * n..][..k * n]);
                let ob = &mut out[z * m * n..][..m * n];
                for i in 0..m {
                    let row = &mut ob[i * n..][..n];
                    for p in 0..k {
                        let s = ab[i * k + p];
                        for (o, &bj) in row.iter_mut().zip(&bb[p * n..][..n]) {
                            *o = *o + s * bj;
                        }
                    }
                }
            }
            Ok((
                out,
                Some(Box::new(move |ctx, sink| {
                    let g = ctx.grad();
                    let (av, bv) = (ctx.value(a), ctx.value(b));
                    if sink.wants(a) {
                        let slot = sink.slot(a);
                        for z in 0..batch {
                            let gb = &g[z * m * n..][..m * n];
                            let bb = &bv[z * k * n..][..k * n];
                            for i in 0..m {
                                for p in 0..k {
                                    let d = dot(&gb[i * n..][..n], &bb[p * n..][..n]);
                                    let s = &mut slot[z * m * k + i * k + p];
                                    *s = *s + d;
                                }
                            }
                        }
                    }
                    if sink.wants(b) {
                        let slot = sink.slot(b);
                        for z in 0..batch {
                            let gb = &g[z * m * n..][..m * n];
                            let ab = &av[z * m * k..][..m * k];
                            let sb = &mut slot[z * k * n..][..k * n];
                            for i in 0..m {
                                for p in 0..k {
                                    let s = ab[i * k + p];
                                    for (o, &gj) in sb[p * n..][..n].iter_mut().zip(&gb[i * n..][..n]) {
                                        *o = *o + s * gj;
                                    }
                                }
                            }
                        }
                    }
                })),
            ))
        })
    }

    /// Batched `a · bᵀ` with `a: [.., m, k]`, `b: [.., n, k]`, summing over
    /// ascending `k`.
    pub fn matmul_transposed_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, lead) = self.batch_dims("matmul_transposed_b", a, b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (n, k2) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::mismatch("matmul_transposed_b", sa, sb));
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let cost = Cost::macs(batch * m * k * n);
        self.emit("matmul_transposed_b", &[a, b], shape, cost, move |t| {
            let (av, bv) = (t.value(a), t.value(b));
            let mut out = vec![T::zero(); batch * m * n];
            for z in 0..batch {
                let (ab, bb) = (&av[z * m * k..][..m * k], &bv[z * n * k..][..n * k]);
                for i in 0..m {
                    for j in 0..n {
                        out[z * m * n + i * n + j] = dot(&ab[i * k..][..k], &bb[j * k..][..k]);
                    }
                }
            }
            Ok((
                out,
                Some(Box::new(move |ctx, sink| {
                    let g = ctx.grad();
                    let (av, bv) = (ctx.value(a), ctx.value(b));
                    if sink.wants(a) {
                        let slot = sink.slot(a);
                        for z in 0..batch {
                            let bb = &bv[z * n * k..][..n * k];
                            for i in 0..m {
                                let row = &mut slot[z * m * k + i * k..][..k];
                                for j in 0..n {
                                    let s = g[z * m * n + i * n + j];
                                    for (o, &bj) in row.iter_mut().zip(&bb[j * k..][..k]) {
                                        *o = *o + s * bj;
                                    }
                                }
                            }
                        }
                    }
                    if sink.wants(b) {
                        let slot = sink.slot(b);
                        for z in 0..batch {
                            let ab = &av[z * m * k..][..m * k];
                            for i in 0..m {
                                for j in 0..n {
                                    let s = g[z * m * n + i * n + j];
                                    let row = &mut slot[z * n * k + j * k..][..k];
                                    for (o, &ai) in row.iter_mut().zip(&ab[i * k..][..k]) {
                                        *o = *o + s * ai;
                                    }
                                }
                            }
                        }
                    }
                })),
            ))
        })
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax_last", "rank-0 input"))?;
        let rows = shape.iter().product::<usize>() / len;
        let cost = Cost::macs(rows * len);
        self.emit("softmax_last", &[x], shape, cost, move |t| {
            let xs = t.value(x);
            let mut out = vec![T::zero(); xs.len()];
            for (src, dst) in xs.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
                let mx = src.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mx).exp();
                    total = total + *d;
                }
                for d in dst.iter_mut() {
                    *d = *d / total;
                }
            }
            Ok((
                out,
                Some(Box::new(move |ctx, sink| {
                    let y = ctx.output();
                    let g = ctx.grad();
                    let slot = sink.slot(x);
                    for r in 0..rows {
                        let (yr, gr) = (&y[r * len..][..len], &g[r * len..][..len]);
                        let inner = dot(yr, gr);
                        for i in 0..len {
                            let s = &mut slot[r * len + i];
                            *s = *s + yr[i] * (gr[i] - inner);
                        }
                    }
                })),
            ))
        })
    }

    /// Reinterprets the element buffer under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.shape(x).iter().product::<usize>() {
            return Err(Error::mismatch("reshape", self.shape(x), shape));
        }
        self.emit("reshape", &[x], shape.to_vec(), Cost::VIEW, move |t| {
            Ok((
                t.value(x).to_vec(),
                Some(Box::new(move |ctx, sink| sink.add(x, ctx.grad().to_vec()))),
            ))
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let rank = src_shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("invalid axes {axes:?} for rank {rank}"),
            ));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
        let map = permutation_map(&src_shape, axes);
        self.gather("permute", x, shape, map)
    }

    /// Pure data movement: output element `o` is input element `map[o]`,
    /// where `map` is a permutation of the input indices.
    pub(crate) fn gather(&mut self, op: &'static str, x: Var, shape: Vec<usize>, map: Vec<usize>) -> Result<Var> {
        debug_assert_eq!(map.len(), shape.iter().product::<usize>());
        self.emit(op, &[x], shape, Cost::MOVE, move |t| {
            let xs = t.value(x);
            let out = map.iter().map(|&s| xs[s]).collect();
            Ok((
                out,
                Some(Box::new(move |ctx, sink| {
                    let g = ctx.grad();
                    let slot = sink.slot(x);
                    for (o, &s) in map.iter().enumerate() {
                        slot[s] = slot[s] + g[o];
                    }
                })),
            ))
        })
    }

    /// Concatenates along axis 1. All other extents must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(Error::shape("concat_channels", "rank < 2"));
        }
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::mismatch("concat_channels", &base, s));
            }
            widths.push(s[1]);
        }
        let inner: usize = base[2..].iter().product();
        let total: usize = widths.iter().sum();
        let mut shape = base.clone();
        shape[1] = total;
        let batch = base[0];
        let inputs = xs.to_vec();
        self.emit("concat_channels", xs, shape, Cost::MOVE, move |t| {
            let mut out = Vec::with_capacity(batch * total * inner);
            for n in 0..batch {
                for (&v, &c) in inputs.iter().zip(&widths) {
                    out.extend_from_slice(&t.value(v)[n * c * inner..][..c * inner]);
                }
            }
            Ok((
                out,
                Some(Box::new(move |ctx, sink| {
                    let g = ctx.grad();
                    let mut offset = 0;
                    for (&v, &c) in inputs.iter().zip(&widths) {
                        if sink.wants(v) {
                            let slot = sink.slot(v);
                            for n in 0..batch {
                                let src = &g[n * total * inner + offset * inner..][..c * inner];
                                for (s, &gv) in slot[n * c * inner..][..c * inner].iter_mut().zip(src) {
                                    *s = *s + gv;
                                }
                            }
                        }
                        offset += c;
                    }
                })),
            ))
        })
    }

    /// Splits along axis 1 into consecutive pieces of the given widths.
    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || sizes.iter().sum::<usize>() != shape[1] || sizes.contains(&0) {
            return Err(Error::shape(
                "split_channels",
                format!("sizes {sizes:?} do not partition {shape:?}"),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let (batch, total) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &c in sizes {
            let mut piece = shape.clone();
            piece[1] = c;
            let off = offset;
            let v = self.emit("split_channels", &[x], piece, Cost::MOVE, move |t| {
                let xs = t.value(x);
                let mut data = Vec::with_capacity(batch * c * inner);
                for n in 0..batch {
                    data.extend_from_slice(&xs[n * total * inner + off * inner..][..c * inner]);
                }
                Ok((
                    data,
                    Some(Box::new(move |ctx, sink| {
                        let g = ctx.grad();
                        let slot = sink.slot(x);
                        for n in 0..batch {
                            let dst = &mut slot[n * total * inner + off * inner..][..c * inner];
                            for (d, &gv) in dst.iter_mut().zip(&g[n * c * inner..][..c * inner]) {
                                *d = *d + gv;
                            }
                        }
                    })),
                ))
            })?;
            out.push(v);
            offset += c;
        }
        Ok(out)
    }

    /// Sum or mean over `axes`; reduced axes are removed from the shape.
    /// An empty axis set returns the input unchanged.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        if axes.iter().any(|&a| a >= rank) {
            return Err(Error::shape("reduce", format!("axes {axes:?} invalid for rank {rank}")));
        }
        if axes.is_empty() {
            return Ok(x);
        }
        let keep: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
        let out_len: usize = out_shape.iter().product();
        let count = shape.iter().product::<usize>() / out_len;
        // Output index of every input element.
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for &a in keep.iter().rev() {
            strides[a] = acc;
            acc *= shape[a];
        }
        let index = flat_projection(&shape, &strides);
        let norm = match kind {
            ReduceKind::Sum => T::one(),
            ReduceKind::Mean => T::one() / T::lit(count as f64),
        };
        self.emit("reduce", &[x], out_shape, Cost::MOVE, move |t| {
            let xs = t.value(x);
            let mut out = vec![T::zero(); out_len];
            for (&o, &v) in index.iter().zip(xs) {
                out[o] = out[o] + v;
            }
            if kind == ReduceKind::Mean {
                out.iter_mut().for_each(|v| *v = *v * norm);
            }
            Ok((
                out,
                Some(Box::new(move |ctx, sink| {
                    let g = ctx.grad();
                    let slot = sink.slot(x);
                    for (s, &o) in slot.iter_mut().zip(&index) {
                        *s = *s + g[o] * norm;
                    }
                })),
            ))
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceKind::Sum, x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceKind::Mean, x, &axes)
    }
}

/// Sequential dot product in ascending index order.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

const LANES: usize = 8;

/// Dot product with `LANES` interleaved partial sums, each accumulated in
/// ascending order and combined left to right. The order is fixed, so the
/// result is reproducible, and the loop vectorises.
#[inline]
pub(crate) fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    let len = a.len().min(b.len());
    let mut acc = [T::zero(); LANES];
    let (ac, bc) = (a[..len].chunks_exact(LANES), b[..len].chunks_exact(LANES));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    for (l, (&x, &y)) in ar.iter().zip(br).enumerate() {
        acc[l] = acc[l] + x * y;
    }
    acc.iter().fold(T::zero(), |s, &v| s + v)
}

/// Four [`dot_lanes`] products sharing `a`, bitwise equal to four separate
/// calls but with independent dependency chains.
#[inline]
pub(crate) fn dot_lanes4<T: Scalar>(a: &[T], b: [&[T]; 4]) -> [T; 4] {
    let len = b.iter().fold(a.len(), |m, s| m.min(s.len()));
    let mut acc = [[T::zero(); LANES]; 4];
    let whole = len / LANES * LANES;
    let (a, b) = (&a[..len], b.map(|s| &s[..len]));
    let mut i = 0;
    while i < whole {
        let x = &a[i..i + LANES];
        for (acc, s) in acc.iter_mut().zip(&b) {
            let y = &s[i..i + LANES];
            for l in 0..LANES {
                acc[l] = acc[l] + x[l] * y[l];
            }
        }
        i += LANES;
    }
    for (acc, s) in acc.iter_mut().zip(&b) {
        for (l, j) in (whole..len).enumerate() {
            acc[l] = acc[l] + a[j] * s[j];
        }
    }
    acc.map(|lanes| lanes.iter().fold(T::zero(), |s, &v| s + v))
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// For every element of `shape` in row-major order, the dot product of its
/// multi-index with `strides`.
fn flat_projection(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut cur = 0usize;
    for _ in 0..n {
        out.push(cur);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            cur += strides[a];
            if idx[a] < shape[a] {
                break;
            }
            cur -= strides[a] * idx[a];
            idx[a] = 0;
        }
    }
    out
}

/// Source flat index for each output element of a permutation.
fn permutation_map(src_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = row_major_strides(src_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    flat_projection(&out_shape, &strides)
}
