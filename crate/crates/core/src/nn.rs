//! Layers used by the attention block and the restoration network.
//!
//! The free functions are differentiable tape ops over [`Var`]s; the
//! `*Params` structs own [`ParamId`]s and wire those ops to stored weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::ops::{dot, dot_lanes, dot_lanes4};
use crate::tensor::tape::Cost;
use crate::tensor::{dims4, Scalar, Tape, Var};

/// Slope used by [`Activation::LeakyRelu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
    LeakyRelu,
    Silu,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Self::Gelu),
            "relu" => Ok(Self::Relu),
            "leaky_relu" | "leakyrelu" | "lrelu" => Ok(Self::LeakyRelu),
            "silu" => Ok(Self::Silu),
            "identity" | "none" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Applies a pointwise activation. GELU is the exact Gaussian-CDF form.
pub fn activation<T: Scalar>(tape: &mut Tape<T>, kind: Activation, x: Var) -> Result<Var> {
    let half = T::lit(0.5);
    match kind {
        Activation::Identity => Ok(x),
        Activation::Gelu => {
            let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
            let inv_sqrt_2pi = T::lit(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
            tape.unary(
                "gelu",
                x,
                move |v| half * v * (T::one() + (v * inv_sqrt2).erf()),
                move |v, y| {
                    // Φ(v) recovered from the output away from zero saves an erf.
                    let cdf = if v.abs() > T::lit(1e-2) {
                        y / v
                    } else {
                        half * (T::one() + (v * inv_sqrt2).erf())
                    };
                    cdf + v * inv_sqrt_2pi * (-half * v * v).exp()
                },
            )
        }
        Activation::Relu => tape.unary(
            "relu",
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |v, _| if v > T::zero() { T::one() } else { T::zero() },
        ),
        Activation::LeakyRelu => {
            let slope = T::lit(LEAKY_RELU_SLOPE);
            tape.unary(
                "leaky_relu",
                x,
                move |v| if v > T::zero() { v } else { slope * v },
                move |v, _| if v > T::zero() { T::one() } else { slope },
            )
        }
        Activation::Silu => tape.unary(
            "silu",
            x,
            |v| v / (T::one() + (-v).exp()),
            |v, _| {
                let s = T::one() / (T::one() + (-v).exp());
                s * (T::one() + v * (T::one() - s))
            },
        ),
    }
}

/// 1×1 convolution: a per-pixel linear map across channels.
/// `weight: [cout, cin, 1, 1]`, `bias: [cout]`.
pub fn pointwise_conv<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let (n, cin, h, w) = dims4(tape.shape(x), "pointwise_conv")?;
    let ws = tape.shape(weight).to_vec();
    if ws.len() != 4 || ws[1] != cin || ws[2] != 1 || ws[3] != 1 {
        return Err(Error::mismatch("pointwise_conv", tape.shape(x), &ws));
    }
    let cout = ws[0];
    check_bias(tape, bias, cout, "pointwise_conv")?;
    let hw = h * w;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    let cost = Cost::macs(n * cout * cin * hw);
    tape.emit("pointwise_conv", &inputs, vec![n, cout, h, w], cost, move |t| {
        let (xs, wv) = (t.value(x), t.value(weight));
        let bv = bias.map(|b| t.value(b));
        let mut out = vec![T::zero(); n * cout * hw];
        for b in 0..n {
            let xb = &xs[b * cin * hw..][..cin * hw];
            for (start, len) in tiles(hw) {
                for co in 0..cout {
                    let mut acc = [bv.map_or(T::zero(), |bv| bv[co]); TILE];
                    let acc = &mut acc[..len];
                    for ci in 0..cin {
                        axpy(acc, wv[co * cin + ci], &xb[ci * hw + start..][..len]);
                    }
                    out[(b * cout + co) * hw + start..][..len].copy_from_slice(acc);
                }
            }
        }
        Ok((
            out,
            Some(Box::new(move |ctx, sink| {
                let g = ctx.grad();
                let (xs, wv) = (ctx.value(x), ctx.value(weight));
                if sink.wants(x) {
                    let slot = sink.slot(x);
                    for b in 0..n {
                        for (start, len) in tiles(hw) {
                            for ci in 0..cin {
                                let dst = &mut slot[(b * cin + ci) * hw + start..][..len];
                                let mut acc = [T::zero(); TILE];
                                let acc = &mut acc[..len];
                                acc.copy_from_slice(dst);
                                for co in 0..cout {
                                    axpy(acc, wv[co * cin + ci], &g[(b * cout + co) * hw + start..][..len]);
                                }
                                dst.copy_from_slice(acc);
                            }
                        }
                    }
                }
                if sink.wants(weight) {
                    let slot = sink.slot(weight);
                    for b in 0..n {
                        let xb = |ci: usize| &xs[(b * cin + ci) * hw..][..hw];
                        for co in 0..cout {
                            let gr = &g[(b * cout + co) * hw..][..hw];
                            let row = &mut slot[co * cin..][..cin];
                            let mut ci = 0;
                            while ci + 4 <= cin {
                                let d = dot_lanes4(gr, [xb(ci), xb(ci + 1), xb(ci + 2), xb(ci + 3)]);
                                for (k, v) in d.into_iter().enumerate() {
                                    row[ci + k] = row[ci + k] + v;
                                }
                                ci += 4;
                            }
                            for ci in ci..cin {
                                row[ci] = row[ci] + dot_lanes(gr, xb(ci));
                            }
                        }
                    }
                }
                if let Some(bias) = bias {
                    accumulate_bias_grad(sink, bias, g, n, cout, hw);
                }
            })),
        ))
    })
}

/// 3×3 depth-wise convolution, stride 1, zero padding 1.
/// `weight: [c, 1, 3, 3]`, `bias: [c]`.
pub fn depthwise_conv3x3<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let (_, c, _, _) = dims4(tape.shape(x), "depthwise_conv3x3")?;
    if tape.shape(weight) != [c, 1, 3, 3] {
        return Err(Error::mismatch("depthwise_conv3x3", tape.shape(x), tape.shape(weight)));
    }
    conv3x3_grouped(tape, "depthwise_conv3x3", x, weight, bias, 1, c)
}

/// Dense 3×3 convolution with zero padding 1 and the given stride.
/// `weight: [cout, cin, 3, 3]`, `bias: [cout]`.
pub fn conv3x3<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
    conv3x3_grouped(tape, "conv3x3", x, weight, bias, stride, 1)
}

const TILE: usize = 64;

/// `(start, len)` tiles of at most `TILE` covering `0..len`.
fn tiles(len: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..len).step_by(TILE).map(move |s| (s, TILE.min(len - s)))
}

#[inline]
fn axpy<T: Scalar>(acc: &mut [T], s: T, x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a = *a + s * v;
    }
}

/// `acc[i] += Σ_t k[t]·src[i + offs[t]]`, taps added one at a time in order.
#[inline]
fn taps9<T: Scalar>(acc: &mut [T], src: &[T], offs: &[usize; 9], k: &[T]) {
    let n = acc.len();
    let (k0, k1, k2, k3, k4, k5, k6, k7, k8) = (k[0], k[1], k[2], k[3], k[4], k[5], k[6], k[7], k[8]);
    let s0 = &src[offs[0]..][..n];
    let s1 = &src[offs[1]..][..n];
    let s2 = &src[offs[2]..][..n];
    let s3 = &src[offs[3]..][..n];
    let s4 = &src[offs[4]..][..n];
    let s5 = &src[offs[5]..][..n];
    let s6 = &src[offs[6]..][..n];
    let s7 = &src[offs[7]..][..n];
    let s8 = &src[offs[8]..][..n];
    for i in 0..n {
        let mut a = acc[i];
        a = a + k0 * s0[i];
        a = a + k1 * s1[i];
        a = a + k2 * s2[i];
        a = a + k3 * s3[i];
        a = a + k4 * s4[i];
        a = a + k5 * s5[i];
        a = a + k6 * s6[i];
        a = a + k7 * s7[i];
        a = a + k8 * s8[i];
        acc[i] = a;
    }
}

/// Valid output range `lo..hi` along one axis for kernel tap `k` (0..3):
/// positions `o` with `0 <= o*stride + k - 1 < len`.
fn tap_range(len: usize, out_len: usize, stride: usize, k: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if len + 1 > k {
        ((len + 1 - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_grouped<T: Scalar>(
    tape: &mut Tape<T>,
    op: &'static str,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    groups: usize,
) -> Result<Var> {
    let (n, cin, h, w) = dims4(tape.shape(x), op)?;
    let ws = tape.shape(weight).to_vec();
    if stride == 0 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || cin % groups != 0 || ws[1] != cin / groups {
        return Err(Error::mismatch(op, tape.shape(x), &ws));
    }
    let cout = ws[0];
    if cout % groups != 0 {
        return Err(Error::shape(
            op,
            format!("{cout} outputs not divisible into {groups} groups"),
        ));
    }
    check_bias(tape, bias, cout, op)?;
    let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let (hw, ohw) = (h * w, ho * wo);
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    let cost = Cost::macs(n * cout * cin_g * 9 * ohw);
    if stride == 1 {
        let geom = PaddedPlane::new(h, w);
        return tape.emit(op, &inputs, vec![n, cout, h, w], cost, move |t| {
            let (xs, wv) = (t.value(x), t.value(weight));
            let bv = bias.map(|b| t.value(b));
            let padded: Vec<Vec<T>> = (0..n * cin).map(|p| geom.pad(&xs[p * hw..][..hw])).collect();
            let mut out = vec![T::zero(); n * cout * hw];
            let mut acc = vec![T::zero(); geom.span()];
            for b in 0..n {
                for co in 0..cout {
                    acc.fill(bv.map_or(T::zero(), |bv| bv[co]));
                    let g = co / cout_g;
                    for cig in 0..cin_g {
                        let src = &padded[b * cin + g * cin_g + cig];
                        taps9(&mut acc, src, &geom.offsets(), &wv[(co * cin_g + cig) * 9..][..9]);
                    }
                    geom.unpad(&acc, &mut out[(b * cout + co) * hw..][..hw]);
                }
            }
            Ok((
                out,
                Some(Box::new(move |ctx, sink| {
                    let grad = ctx.grad();
                    let (xs, wv) = (ctx.value(x), ctx.value(weight));
                    // Output gradients laid out like the accumulator, zero in the pad columns.
                    let gpad: Vec<Vec<T>> = (0..n * cout).map(|p| geom.spread(&grad[p * hw..][..hw])).collect();
                    if sink.wants(x) {
                        // Input gradient as a correlation with the flipped kernel over a
                        // copy of the output gradient shifted by the largest tap offset.
                        let shift = geom.offset(8);
                        let gext: Vec<Vec<T>> = gpad
                            .iter()
                            .map(|gp| {
                                let mut e = vec![T::zero(); geom.len() + shift];
                                e[shift..shift + gp.len()].copy_from_slice(gp);
                                e
                            })
                            .collect();
                        let mut flipped = geom.offsets();
                        flipped.reverse();
                        let slot = sink.slot(x);
                        let mut dpad = vec![T::zero(); geom.len()];
                        for b in 0..n {
                            for ci in 0..cin {
                                dpad.fill(T::zero());
                                let g = ci / cin_g;
                                let cig = ci % cin_g;
                                for cog in 0..cout_g {
                                    let co = g * cout_g + cog;
                                    taps9(
                                        &mut dpad,
                                        &gext[b * cout + co],
                                        &flipped,
                                        &wv[(co * cin_g + cig) * 9..][..9],
                                    );
                                }
                                geom.accumulate_interior(&dpad, &mut slot[(b * cin + ci) * hw..][..hw]);
                            }
                        }
                    }
                    if sink.wants(weight) {
                        let padded: Vec<Vec<T>> = (0..n * cin).map(|p| geom.pad(&xs[p * hw..][..hw])).collect();
                        let slot = sink.slot(weight);
                        for b in 0..n {
                            for co in 0..cout {
                                let gp = &gpad[b * cout + co];
                                let g = co / cout_g;
                                for cig in 0..cin_g {
                                    let src = &padded[b * cin + g * cin_g + cig];
                                    let tap = |t: usize| &src[geom.offset(t)..][..geom.span()];
                                    let k = &mut slot[(co * cin_g + cig) * 9..][..9];
                                    for t0 in [0, 4] {
                                        let d = dot_lanes4(gp, [tap(t0), tap(t0 + 1), tap(t0 + 2), tap(t0 + 3)]);
                                        for (j, v) in d.into_iter().enumerate() {
                                            k[t0 + j] = k[t0 + j] + v;
                                        }
                                    }
                                    k[8] = k[8] + dot_lanes(gp, tap(8));
                                }
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        accumulate_bias_grad(sink, bias, grad, n, cout, hw);
                    }
                })),
            ))
        });
    }

    // For each tap: (input offset, output rows, output cols).
    let taps: Vec<(usize, usize, (usize, usize), (usize, usize))> = (0..9)
        .map(|t| {
            let (ky, kx) = (t / 3, t % 3);
            (ky, kx, tap_range(h, ho, stride, ky), tap_range(w, wo, stride, kx))
        })
        .collect();

    tape.emit(op, &inputs, vec![n, cout, ho, wo], cost, move |t| {
        let (xs, wv) = (t.value(x), t.value(weight));
        let bv = bias.map(|b| t.value(b));
        let mut out = vec![T::zero(); n * cout * ohw];
        for b in 0..n {
            for co in 0..cout {
                let plane = &mut out[(b * cout + co) * ohw..][..ohw];
                if let Some(bv) = bv {
                    plane.fill(bv[co]);
                }
                let g = co / cout_g;
                for cig in 0..cin_g {
                    let ci = g * cin_g + cig;
                    let src = &xs[(b * cin + ci) * hw..][..hw];
                    let kern = &wv[(co * cin_g + cig) * 9..][..9];
                    for &(ky, kx, (y0, y1), (x0, x1)) in &taps {
                        let s = kern[ky * 3 + kx];
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - 1;
                            let orow = &mut plane[oy * wo..][x0..x1];
                            if stride == 1 {
                                let irow = &src[iy * w + x0 + kx - 1..][..x1 - x0];
                                for (o, &v) in orow.iter_mut().zip(irow) {
                                    *o = *o + s * v;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    let ix = (x0 + j) * stride + kx - 1;
                                    *o = *o + s * src[iy * w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((
            out,
            Some(Box::new(move |ctx, sink| {
                let grad = ctx.grad();
                let (xs, wv) = (ctx.value(x), ctx.value(weight));
                if sink.wants(x) {
                    let slot = sink.slot(x);
                    for b in 0..n {
                        for co in 0..cout {
                            let gp = &grad[(b * cout + co) * ohw..][..ohw];
                            let g = co / cout_g;
                            for cig in 0..cin_g {
                                let ci = g * cin_g + cig;
                                let dst = &mut slot[(b * cin + ci) * hw..][..hw];
                                let kern = &wv[(co * cin_g + cig) * 9..][..9];
                                for &(ky, kx, (y0, y1), (x0, x1)) in &taps {
                                    let s = kern[ky * 3 + kx];
                                    for oy in y0..y1 {
                                        let iy = oy * stride + ky - 1;
                                        let grow = &gp[oy * wo..][x0..x1];
                                        if stride == 1 {
                                            let drow = &mut dst[iy * w + x0 + kx - 1..][..x1 - x0];
                                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                                *d = *d + s * gv;
                                            }
                                        } else {
                                            for (j, &gv) in grow.iter().enumerate() {
                                                let ix = (x0 + j) * stride + kx - 1;
                                                dst[iy * w + ix] = dst[iy * w + ix] + s * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if sink.wants(weight) {
                    let slot = sink.slot(weight);
                    for b in 0..n {
                        for co in 0..cout {
                            let gp = &grad[(b * cout + co) * ohw..][..ohw];
                            let g = co / cout_g;
                            for cig in 0..cin_g {
                                let ci = g * cin_g + cig;
                                let src = &xs[(b * cin + ci) * hw..][..hw];
                                for &(ky, kx, (y0, y1), (x0, x1)) in &taps {
                                    let mut acc = T::zero();
                                    for oy in y0..y1 {
                                        let iy = oy * stride + ky - 1;
                                        let grow = &gp[oy * wo..][x0..x1];
                                        if stride == 1 {
                                            acc = acc + dot_lanes(grow, &src[iy * w + x0 + kx - 1..][..x1 - x0]);
                                        } else {
                                            for (j, &gv) in grow.iter().enumerate() {
                                                acc = acc + gv * src[iy * w + (x0 + j) * stride + kx - 1];
                                            }
                                        }
                                    }
                                    let k = (co * cin_g + cig) * 9 + ky * 3 + kx;
                                    slot[k] = slot[k] + acc;
                                }
                            }
                        }
                    }
                }
                if let Some(bias) = bias {
                    accumulate_bias_grad(sink, bias, grad, n, cout, ohw);
                }
            })),
        ))
    })
}

/// Zero-padded plane layout for stride-1 3×3 convolution. A plane of
/// `h × w` is stored with row pitch `w + 2` and one zero row/column on every
/// side (plus slack), so each kernel tap reads one contiguous run of
/// `span = h·(w+2)` elements. Output positions in the two pad columns are
/// junk and dropped by `unpad`.
#[derive(Clone, Copy)]
struct PaddedPlane {
    h: usize,
    w: usize,
    pitch: usize,
}

impl PaddedPlane {
    fn new(h: usize, w: usize) -> Self {
        Self { h, w, pitch: w + 2 }
    }

    fn len(&self) -> usize {
        (self.h + 2) * self.pitch + 2
    }

    fn span(&self) -> usize {
        self.h * self.pitch
    }

    fn offset(&self, tap: usize) -> usize {
        (tap / 3) * self.pitch + tap % 3
    }

    fn offsets(&self) -> [usize; 9] {
        std::array::from_fn(|t| self.offset(t))
    }

    fn pad<T: Scalar>(&self, plane: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.len()];
        for (y, row) in plane.chunks_exact(self.w).enumerate() {
            out[(y + 1) * self.pitch + 1..][..self.w].copy_from_slice(row);
        }
        out
    }

    /// Places an `h × w` plane in the accumulator layout.
    fn spread<T: Scalar>(&self, plane: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.span()];
        for (y, row) in plane.chunks_exact(self.w).enumerate() {
            out[y * self.pitch..][..self.w].copy_from_slice(row);
        }
        out
    }

    fn unpad<T: Scalar>(&self, acc: &[T], out: &mut [T]) {
        for (y, row) in out.chunks_exact_mut(self.w).enumerate() {
            row.copy_from_slice(&acc[y * self.pitch..][..self.w]);
        }
    }

    fn accumulate_interior<T: Scalar>(&self, padded: &[T], out: &mut [T]) {
        for (y, row) in out.chunks_exact_mut(self.w).enumerate() {
            for (o, &v) in row.iter_mut().zip(&padded[(y + 1) * self.pitch + 1..][..self.w]) {
                *o = *o + v;
            }
        }
    }
}

fn check_bias<T: Scalar>(tape: &Tape<T>, bias: Option<Var>, cout: usize, op: &'static str) -> Result<()> {
    match bias {
        Some(b) if tape.shape(b) != [cout] => Err(Error::mismatch(op, &[cout], tape.shape(b))),
        _ => Ok(()),
    }
}

fn accumulate_bias_grad<T: Scalar>(
    sink: &mut crate::tensor::GradSink<'_, T>,
    bias: Var,
    g: &[T],
    n: usize,
    c: usize,
    hw: usize,
) {
    if !sink.wants(bias) {
        return;
    }
    let slot = sink.slot(bias);
    for b in 0..n {
        for (co, s) in slot.iter_mut().enumerate() {
            let mut acc = T::zero();
            for &v in &g[(b * c + co) * hw..][..hw] {
                acc = acc + v;
            }
            *s = *s + acc;
        }
    }
}

/// Layer normalisation across channels at every (n, h, w) location.
pub fn layer_norm_channel<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
    let (n, c, h, w) = dims4(tape.shape(x), "layer_norm_channel")?;
    if tape.shape(gain) != [c] || tape.shape(offset) != [c] {
        return Err(Error::mismatch("layer_norm_channel", tape.shape(x), tape.shape(gain)));
    }
    if eps <= 0.0 {
        return Err(Error::Config("layer norm epsilon must be positive".into()));
    }
    let hw = h * w;
    let shape = tape.shape(x).to_vec();
    tape.emit("layer_norm_channel", &[x, gain, offset], shape, Cost::MOVE, move |t| {
        let (xs, gv, ov) = (t.value(x), t.value(gain), t.value(offset));
        let inv_c = T::one() / T::lit(c as f64);
        let eps = T::lit(eps);
        let mut mean = vec![T::zero(); n * hw];
        let mut rstd = vec![T::zero(); n * hw];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            let xb = &xs[b * c * hw..][..c * hw];
            let mb = &mut mean[b * hw..][..hw];
            for ch in 0..c {
                for (m, &v) in mb.iter_mut().zip(&xb[ch * hw..][..hw]) {
                    *m = *m + v;
                }
            }
            mb.iter_mut().for_each(|m| *m = *m * inv_c);
            let rb = &mut rstd[b * hw..][..hw];
            for ch in 0..c {
                for ((r, &v), &m) in rb.iter_mut().zip(&xb[ch * hw..][..hw]).zip(mb.iter()) {
                    let d = v - m;
                    *r = *r + d * d;
                }
            }
            rb.iter_mut().for_each(|r| *r = (*r * inv_c + eps).sqrt().recip());
            for ch in 0..c {
                let orow = &mut out[(b * c + ch) * hw..][..hw];
                for (((o, &v), &m), &r) in orow.iter_mut().zip(&xb[ch * hw..][..hw]).zip(mb.iter()).zip(rb.iter()) {
                    *o = gv[ch] * (v - m) * r + ov[ch];
                }
            }
        }
        Ok((
            out,
            Some(Box::new(move |ctx, sink| {
                let g = ctx.grad();
                let (xs, gv) = (ctx.value(x), ctx.value(gain));
                if sink.wants(gain) || sink.wants(offset) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for p in 0..hw {
                                let xhat = (xs[base + p] - mean[b * hw + p]) * rstd[b * hw + p];
                                dg[ch] = dg[ch] + g[base + p] * xhat;
                                db[ch] = db[ch] + g[base + p];
                            }
                        }
                    }
                    sink.add(gain, dg);
                    sink.add(offset, db);
                }
                if sink.wants(x) {
                    let inv_c = T::one() / T::lit(c as f64);
                    let slot = sink.slot(x);
                    let mut s1 = vec![T::zero(); hw];
                    let mut s2 = vec![T::zero(); hw];
                    for b in 0..n {
                        let (mb, rb) = (&mean[b * hw..][..hw], &rstd[b * hw..][..hw]);
                        s1.fill(T::zero());
                        s2.fill(T::zero());
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for p in 0..hw {
                                let dxhat = g[base + p] * gv[ch];
                                let xhat = (xs[base + p] - mb[p]) * rb[p];
                                s1[p] = s1[p] + dxhat;
                                s2[p] = s2[p] + dxhat * xhat;
                            }
                        }
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for p in 0..hw {
                                let dxhat = g[base + p] * gv[ch];
                                let xhat = (xs[base + p] - mb[p]) * rb[p];
                                let d = rb[p] * (dxhat - s1[p] * inv_c - xhat * s2[p] * inv_c);
                                slot[base + p] = slot[base + p] + d;
                            }
                        }
                    }
                }
            })),
        ))
    })
}

/// Space-to-depth by factor `r`: output channel `c*r² + dy*r + dx` holds the
/// pixel at offset (dy, dx) of each r×r block of input channel `c`.
pub fn pixel_unshuffle<T: Scalar>(tape: &mut Tape<T>, x: Var, r: usize) -> Result<Var> {
    let (n, c, h, w) = dims4(tape.shape(x), "pixel_unshuffle")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("factor {r} does not divide {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / r, w / r);
    let mut map = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    for i in 0..ho {
                        for j in 0..wo {
                            map.push(((b * c + ch) * h + i * r + dy) * w + j * r + dx);
                        }
                    }
                }
            }
        }
    }
    tape.gather("pixel_unshuffle", x, vec![n, c * r * r, ho, wo], map)
}

/// Depth-to-space by factor `r`; exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Scalar>(tape: &mut Tape<T>, x: Var, r: usize) -> Result<Var> {
    let (n, crr, h, w) = dims4(tape.shape(x), "pixel_shuffle")?;
    if r == 0 || crr % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{crr} channels not divisible by {r}²"),
        ));
    }
    let c = crr / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut map = Vec::with_capacity(n * crr * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let (i, dy, j, dx) = (y / r, y % r, xx / r, xx % r);
                    map.push(((b * crr + ch * r * r + dy * r + dx) * h + i) * w + j);
                }
            }
        }
    }
    tape.gather("pixel_shuffle", x, vec![n, c, ho, wo], map)
}

/// Divides each last-axis slice by `max(‖slice‖₂, eps)`.
pub fn l2_normalize_last<T: Scalar>(tape: &mut Tape<T>, x: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let len = *shape
        .last()
        .ok_or_else(|| Error::shape("l2_normalize_last", "rank-0 input"))?;
    tape.emit("l2_normalize_last", &[x], shape, Cost::MOVE, move |t| {
        let xs = t.value(x);
        let eps = T::lit(eps);
        let mut norms = Vec::with_capacity(xs.len() / len);
        let mut out = vec![T::zero(); xs.len()];
        for (src, dst) in xs.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            let norm = dot(src, src).sqrt();
            let clamped = norm > eps;
            let d = if clamped { norm } else { eps };
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v / d;
            }
            norms.push((d, clamped));
        }
        Ok((
            out,
            Some(Box::new(move |ctx, sink| {
                let y = ctx.output();
                let g = ctx.grad();
                let slot = sink.slot(x);
                for (r, &(d, on_sphere)) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * len..][..len], &g[r * len..][..len]);
                    let proj = if on_sphere { dot(yr, gr) } else { T::zero() };
                    for i in 0..len {
                        let s = &mut slot[r * len + i];
                        *s = *s + (gr[i] - yr[i] * proj) / d;
                    }
                }
            })),
        ))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Pointwise,
    Depthwise3x3,
    Full3x3 { stride: usize },
}

/// Weights of one convolution layer.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvParams {
    pub fn pointwise<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        Self::build(pb, name, ConvKind::Pointwise, cin, cout, bias)
    }

    pub fn depthwise<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, bias: bool) -> Self {
        Self::build(pb, name, ConvKind::Depthwise3x3, channels, channels, bias)
    }

    pub fn full3x3<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        Self::build(pb, name, ConvKind::Full3x3 { stride }, cin, cout, bias)
    }

    fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        kind: ConvKind,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        let shape = self_weight_shape(kind, cin, cout);
        let fan_in = shape[1] * shape[2] * shape[3];
        pb.push(name);
        let weight = pb.fan_in_uniform("weight", &shape, fan_in);
        let bias = bias.then(|| pb.fan_in_uniform("bias", &[cout], fan_in));
        pb.pop();
        Self {
            kind,
            cin,
            cout,
            weight,
            bias,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        self_weight_shape(self.kind, self.cin, self.cout)
    }

    /// Parameter count: weights plus bias.
    pub fn numel(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.bias.map_or(0, |_| self.cout)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let bias = self.bias.map(|b| p[b]);
        match self.kind {
            ConvKind::Pointwise => pointwise_conv(tape, x, p[self.weight], bias),
            ConvKind::Depthwise3x3 => depthwise_conv3x3(tape, x, p[self.weight], bias),
            ConvKind::Full3x3 { stride } => conv3x3(tape, x, p[self.weight], bias, stride),
        }
    }
}

fn self_weight_shape(kind: ConvKind, cin: usize, cout: usize) -> [usize; 4] {
    match kind {
        ConvKind::Pointwise => [cout, cin, 1, 1],
        ConvKind::Depthwise3x3 => [cout, 1, 3, 3],
        ConvKind::Full3x3 { .. } => [cout, cin, 3, 3],
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub channels: usize,
    pub gain: ParamId,
    pub offset: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        pb.push(name);
        let gain = pb.constant("gain", &[channels], 1.0);
        let offset = pb.constant("offset", &[channels], 0.0);
        pb.pop();
        Self {
            channels,
            gain,
            offset,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn numel(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        layer_norm_channel(tape, x, p[self.gain], p[self.offset], self.eps)
    }
}
