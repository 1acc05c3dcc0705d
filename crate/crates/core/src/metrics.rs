//! Evaluation metrics: PSNR, SSIM, MAE and BT.601 luma.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn clamped<T: Scalar>(t: &Tensor<T>, max_val: f64) -> impl Iterator<Item = f64> + '_ {
    t.data().iter().map(move |v| v.as_f64().clamp(0.0, max_val))
}

/// Peak signal-to-noise ratio in dB after clamping both inputs to
/// `[0, max_val]`. Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    check_same("psnr", a, b)?;
    let sse: f64 = clamped(a, max_val)
        .zip(clamped(b, max_val))
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let mse = sse / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

pub fn mae<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same("mae", a, b)?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(total / a.numel() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter, valid positions only.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one pair of planes with dynamic range 1.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64]) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, g);
    let mu_b = filter_valid(b, h, w, g);
    let aa = filter_valid(&prod(a, a), h, w, g);
    let bb = filter_valid(&prod(b, b), h, w, g);
    let ab = filter_valid(&prod(a, b), h, w, g);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Single-scale SSIM (11×11 Gaussian window, σ 1.5, valid positions),
/// averaged over channels and batch. Inputs are clamped to `[0, 1]`.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same("ssim", a, b)?;
    let (n, c, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let g = gaussian_window();
    let av: Vec<f64> = clamped(a, 1.0).collect();
    let bv: Vec<f64> = clamped(b, 1.0).collect();
    let planes = n * c;
    let total: f64 = (0..planes)
        .map(|p| ssim_plane(&av[p * h * w..][..h * w], &bv[p * h * w..][..h * w], h, w, &g))
        .sum();
    Ok(total / planes as f64)
}

/// BT.601 luma `0.299R + 0.587G + 0.114B`, returning `N×1×H×W`.
pub fn rgb_to_y<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = img.dims4()?;
    if c != 3 {
        return Err(Error::shape("rgb_to_y", format!("expected 3 channels, got {c}")));
    }
    let hw = h * w;
    let (kr, kg, kb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let d = img.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        let base = b * 3 * hw;
        for i in 0..hw {
            out.push(kr * d[base + i] + kg * d[base + hw + i] + kb * d[base + 2 * hw + i]);
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// PSNR, SSIM and MAE of one prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

impl Metrics {
    /// Evaluates on RGB, or on the luma channel when `y_channel` is set.
    pub fn evaluate<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, y_channel: bool) -> Result<Self> {
        let (p, g) = if y_channel {
            (rgb_to_y(pred)?, rgb_to_y(gt)?)
        } else {
            (pred.clone(), gt.clone())
        };
        Ok(Self {
            psnr: psnr(&p, &g, 1.0)?,
            ssim: ssim(&p, &g)?,
            mae: mae(&p, &g)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| ((i * 7919) % 1000) as f64 / 1000.0 * 0.8)
    }

    #[test]
    fn psnr_examples() {
        let a = ramp(&[1, 3, 8, 8]);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!((mae(&a, &b).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_error() {
        let a = ramp(&[1, 1, 8, 8]).map(|v| v * 0.5);
        let mut last = f64::INFINITY;
        for k in 1..20 {
            let p = psnr(&a, &a.map(|v| v + 0.01 * k as f64), 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn psnr_clamps_out_of_range() {
        let a = Tensor::full(vec![1, 1, 2, 2], 1.0f64);
        let b = Tensor::full(vec![1, 1, 2, 2], 1.7f64);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let a = ramp(&[2, 3, 16, 16]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let b = a.map(|v| (v * 1.3 + 0.05).min(1.0));
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0 && ab > -1.0);
        let board = Tensor::from_fn(vec![1, 1, 16, 16], |i| ((i / 16 + i % 16) % 2) as f64);
        let inverted = board.map(|v| 1.0 - v);
        assert!(ssim(&board, &inverted).unwrap() < 0.0);
        assert!(ssim(
            &Tensor::<f64>::zeros(vec![1, 1, 8, 8]),
            &Tensor::zeros(vec![1, 1, 8, 8])
        )
        .is_err());
    }

    /// Windowed SSIM written as a direct 11×11 sum per position.
    #[test]
    fn ssim_matches_direct_window_sum() {
        let a = ramp(&[1, 1, 13, 12]);
        let b = a.map(|v| (v * v + 0.1).min(1.0));
        let g = gaussian_window();
        let (h, w) = (13, 12);
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i] * g[j];
                        let (p, q) = (a.data()[(y + i) * w + x + j], b.data()[(y + i) * w + x + j]);
                        ma += wt * p;
                        mb += wt * q;
                        aa += wt * p * p;
                        bb += wt * q * q;
                        ab += wt * p * q;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                total += ((2.0 * ma * mb + c1) * (2.0 * (ab - ma * mb) + c2))
                    / ((ma * ma + mb * mb + c1) * (aa - ma * ma + bb - mb * mb + c2));
                count += 1;
            }
        }
        assert!((ssim(&a, &b).unwrap() - total / count as f64).abs() < 1e-12);
    }

    #[test]
    fn luma_examples() {
        let px = |r: f64, g: f64, b: f64| {
            rgb_to_y(&Tensor::new(vec![1, 3, 1, 1], vec![r, g, b]).unwrap())
                .unwrap()
                .data()[0]
        };
        assert!((px(1.0, 1.0, 1.0) - 1.0).abs() < 1e-15);
        assert_eq!(px(0.0, 1.0, 0.0), 0.587);
        for v in [0.0, 0.2, 0.73] {
            assert!((px(v, v, v) - v).abs() < 1e-15);
        }
        assert!(rgb_to_y(&Tensor::<f64>::zeros(vec![1, 2, 2, 2])).is_err());
    }
}
