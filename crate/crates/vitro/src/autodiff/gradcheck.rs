//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward path, so it stays an
//! independent oracle for the reverse pass no matter which ops a graph uses.

use crate::autodiff::tape::Tape;
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

/// Relative gradient error per parameter tensor: ‖g_tape − g_fd‖₂ over
/// max(‖g_fd‖₂, 1e-12), with g_fd from central differences of the forward
/// evaluation.
///
/// `build` must construct the scalar loss from scratch on the given tape each
/// time it is called; `params` are the leaves to differentiate.
pub fn relative_grad_errors(
    params: &[Tensor],
    h: f64,
    mut build: impl FnMut(&mut Tape) -> Result<Tensor>,
) -> Result<Vec<f64>> {
    // Reverse-mode gradients in one pass.
    for p in params {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for p in params {
        p.zero_grad();
    }

    let eval = |build: &mut dyn FnMut(&mut Tape) -> Result<Tensor>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape)?;
        Ok(loss.value())
    };

    let mut errors = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let numel = p.numel();
        let mut numeric = vec![0.0; numel];
        for i in 0..numel {
            p.nudge(i, h);
            let f_plus = eval(&mut build)?;
            p.nudge(i, -2.0 * h);
            let f_minus = eval(&mut build)?;
            p.nudge(i, h);
            numeric[i] = (f_plus - f_minus) / (2.0 * h);
        }
        let diff_sq: f64 = analytic[pi]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum();
        let ref_sq: f64 = numeric.iter().map(|n| n * n).sum();
        errors.push(diff_sq.sqrt() / ref_sq.sqrt().max(1e-12));
    }
    Ok(errors)
}

/// Largest relative gradient error across all parameters.
pub fn max_relative_grad_error(
    params: &[Tensor],
    h: f64,
    build: impl FnMut(&mut Tape) -> Result<Tensor>,
) -> Result<f64> {
    let errs = relative_grad_errors(params, h, build)?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_grad_checks_out() {
        let x = Tensor::from_vec(vec![3], vec![0.5, -1.5, 2.0]).unwrap().trainable();
        let xc = x.clone();
        let err = max_relative_grad_error(&[x], 1e-6, move |tape| {
            let y = tape.mul(&xc, &xc)?;
            tape.mean_all(&y)
        })
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn reports_one_error_per_parameter() {
        let a = Tensor::from_vec(vec![2, 2], vec![0.3, -0.2, 0.9, 0.4]).unwrap().trainable();
        let b = Tensor::from_vec(vec![2, 2], vec![1.0, 0.5, -0.5, 0.25]).unwrap().trainable();
        let (ac, bc) = (a.clone(), b.clone());
        let errs = relative_grad_errors(&[a, b], 1e-6, move |tape| {
            let c = tape.matmul(&ac, &bc)?;
            let d = tape.gelu(&c)?;
            tape.mean_all(&d)
        })
        .unwrap();
        assert_eq!(errs.len(), 2);
        assert!(errs.iter().all(|e| *e < 1e-7), "{errs:?}");
    }
}
