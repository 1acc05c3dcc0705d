use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Probe at most this many evenly spaced coordinates per input.
    pub max_coords_per_input: Option<usize>,
    /// Error denominators never drop below this fraction of the largest
    /// analytic gradient entry, where central differences are dominated by
    /// round-off.
    pub scale_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_coords_per_input: None,
            scale_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate, analytic, numeric) at the worst point.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords_checked: usize,
    /// Largest analytic gradient magnitude among the probed coordinates.
    pub max_abs_grad: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// The relative error at each coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8, scale_floor·max|∇|)`, with the last term
/// taken over every analytic gradient entry of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.item(out);
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v, &tape)).collect();
    let largest = analytic
        .iter()
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (opts.scale_floor * largest).max(1e-8);

    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
        max_abs_grad: 0.0,
        tol: opts.tol,
    };
    for (k, analytic) in analytic.iter().enumerate() {
        let n = inputs[k].numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + opts.step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - opts.step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = x0;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.square(v).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[2.0, 4.0]);

        let report = grad_check(
            |t, v| {
                let sq = t.square(v[0])?;
                t.sum_all(sq)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 0.7]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let s = tape.softmax_last(v).unwrap();
        let total = tape.sum_all(s).unwrap();
        let g = tape.backward(total).unwrap();
        assert!(g.get(v).unwrap().iter().all(|g: &f64| g.abs() < 1e-15));
    }

    #[test]
    fn detects_a_wrong_backward_rule() {
        // d/dx of x*x via a deliberately broken rule (slope 3x instead of 2x).
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = grad_check(
            |t, v| {
                let y = t.unary("bad_square", v[0], |a| a * a, |a, _| 3.0 * a)?;
                t.sum_all(y)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }
}
