//! Training losses: L1 and frequency-domain L1, summed over output scales.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::LEVELS;
use crate::tensor::tape::Cost;
use crate::tensor::{dims4, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_freq: f64,
    /// Weights of the 1, ½ and ¼ scale terms.
    pub scale_weights: [f64; LEVELS],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_freq: 0.1,
            scale_weights: [1.0; LEVELS],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.lambda_freq).chain(self.scale_weights);
        if all.into_iter().any(|v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let a = tape.unary("abs", d, |v| v.abs(), |v, _| sign(v))?;
    tape.mean_all(a)
}

/// 2-D DFT of every `h × w` plane of `planes` in place, via FFT.
fn fft2<T: Scalar>(planes: &mut [Complex<T>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<T>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for plane in planes.chunks_exact_mut(h * w) {
        row.process(plane);
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }
}

/// Direct O((hw)²) 2-D DFT of one real plane, `F[k] = Σ x[n]·e^{-2πi k·n/N}`.
pub fn dft2_direct(plane: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let phase = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    acc += plane[y * w + x] * Complex::new(phase.cos(), phase.sin());
                }
            }
            out.push(acc);
        }
    }
    out
}

/// 2-D DFT of one real plane via FFT.
pub fn dft2_fft(plane: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut buf: Vec<_> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut buf, h, w, false);
    buf
}

/// Mean over bins, channels and batch of `|Re Δ| + |Im Δ|`, where `Δ` is
/// the DFT of `pred − gt`.
pub fn frequency_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let (n, c, h, w) = dims4(tape.shape(pred), "frequency_loss")?;
    let d = tape.sub(pred, gt)?;
    let hw = h * w;
    let m = T::lit((n * c * hw) as f64);
    let log_cost = |len: usize| (usize::BITS - len.leading_zeros()) as usize;
    let cost = Cost::macs(n * c * hw * (log_cost(h) + log_cost(w)));
    tape.emit("frequency_loss", &[d], vec![], cost, move |t| {
        let mut spec: Vec<Complex<T>> = t.value(d).iter().map(|&v| Complex::new(v, T::zero())).collect();
        fft2(&mut spec, h, w, false);
        let mut total = T::zero();
        for z in &spec {
            total = total + z.re.abs() + z.im.abs();
        }
        Ok((
            vec![total / m],
            Some(Box::new(move |ctx, sink| {
                // dL/dx = Re(DFT(sign Re Δ − i·sign Im Δ)) / m
                let scale = ctx.grad()[0] / m;
                let mut s: Vec<Complex<T>> = spec.iter().map(|z| Complex::new(sign(z.re), -sign(z.im))).collect();
                fft2(&mut s, h, w, false);
                let slot = sink.slot(d);
                for (g, z) in slot.iter_mut().zip(&s) {
                    *g = *g + z.re * scale;
                }
            })),
        ))
    })
}

/// Frequency loss of two tensors evaluated with the direct DFT.
pub fn frequency_loss_direct(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::mismatch("frequency_loss_direct", pred.shape(), gt.shape()));
    }
    let (n, c, h, w) = pred.dims4()?;
    let diff: Vec<f64> = pred.data().iter().zip(gt.data()).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for plane in diff.chunks_exact(h * w) {
        total += dft2_direct(plane, h, w)
            .iter()
            .map(|z| z.re.abs() + z.im.abs())
            .sum::<f64>();
    }
    Ok(total / (n * c * h * w) as f64)
}

/// Loss terms of one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Unweighted L1 summed over scales.
    pub l1: Var,
    /// Unweighted frequency loss summed over scales.
    pub freq: Var,
}

/// `Σ_s w_s·(l1_s + λ·freq_s)` over the three output scales.
pub fn multiscale_loss<T: Scalar>(
    tape: &mut Tape<T>,
    preds: &[Var; LEVELS],
    gts: &[Var; LEVELS],
    weights: &LossWeights,
) -> Result<LossTerms> {
    let mut total = None;
    let mut l1_sum = None;
    let mut freq_sum = None;
    let accumulate = |tape: &mut Tape<T>, acc: &mut Option<Var>, v: Var| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
        Ok(())
    };
    for s in 0..LEVELS {
        if tape.shape(preds[s]) != tape.shape(gts[s]) {
            return Err(Error::mismatch(
                "multiscale_loss",
                tape.shape(preds[s]),
                tape.shape(gts[s]),
            ));
        }
        let l1 = l1_loss(tape, preds[s], gts[s])?;
        let freq = frequency_loss(tape, preds[s], gts[s])?;
        let weighted_freq = tape.scale(freq, T::lit(weights.lambda_freq))?;
        let term = tape.add(l1, weighted_freq)?;
        let term = tape.scale(term, T::lit(weights.scale_weights[s]))?;
        accumulate(tape, &mut total, term)?;
        accumulate(tape, &mut l1_sum, l1)?;
        accumulate(tape, &mut freq_sum, freq)?;
    }
    Ok(LossTerms {
        total: total.expect("three scales"),
        l1: l1_sum.expect("three scales"),
        freq: freq_sum.expect("three scales"),
    })
}
