use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Flat index of the element with the largest error.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` at `input` against central finite
/// differences. `f` receives a fresh tape and the input leaf and must
/// return a scalar.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let v = tape.param(input.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; input.numel()]);

    let mut numeric = Vec::with_capacity(input.numel());
    let mut x = input.clone();
    for i in 0..input.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let fp = eval(&x)?;
        x.data_mut()[i] = orig - h;
        let fm = eval(&x)?;
        x.data_mut()[i] = orig;
        numeric.push((fp - fm) / (2.0 * h));
    }

    let errs: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .collect();
    let (worst, max_rel_error) = errs
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    let mean_rel_error = if errs.is_empty() {
        0.0
    } else {
        errs.iter().sum::<f64>() / errs.len() as f64
    };
    Ok(GradCheckReport {
        max_rel_error,
        mean_rel_error,
        worst,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::from_f64(vec![4], &[0.5, -1.25, 2.0, 0.75]).unwrap();
        let x = Tensor::from_f64(vec![4], &[0.1, 0.2, -0.3, 0.4]).unwrap();
        let report = grad_check(
            |t, v| {
                let wv = t.constant(w.clone());
                let p = t.mul(v, wv)?;
                Ok(t.sum(p))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn uniform_logit_cross_entropy_matches_closed_form() {
        // Cross-entropy at uniform logits: gradient is (p - onehot) / rows.
        let rows = 3;
        let classes = 4;
        let targets = [0usize, 2, 3];
        let logits = Tensor::zeros(vec![rows, classes]);
        let f = |t: &mut Tape<f64>, v: Var| {
            let l = t.focal_loss(v, &targets, &[1.0 / rows as f64; 3], 0.0)?;
            Ok(l)
        };
        let report = grad_check(f, &logits, DEFAULT_STEP).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        for r in 0..rows {
            for c in 0..classes {
                let onehot = if targets[r] == c { 1.0 } else { 0.0 };
                let want = (0.25 - onehot) / rows as f64;
                assert!((report.analytic[r * classes + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-12);
    }
}
