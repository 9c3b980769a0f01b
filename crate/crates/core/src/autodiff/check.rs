//! Central finite-difference verification of backward passes, run at f64.

use super::{Tape, Var};
use crate::tensor::Tensor;

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_coords: usize,
    pub tol: f64,
    /// (input index, flat coordinate, analytic, finite-difference) for every
    /// coordinate whose relative error exceeded the tolerance.
    pub failures: Vec<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "grad check: {} coords, max rel err {:.3e} (tol {:.1e}), {} failures",
            self.n_coords,
            self.max_rel_err,
            self.tol,
            self.failures.len()
        )?;
        for &(inp, coord, a, fd) in self.failures.iter().take(5) {
            write!(f, "\n  input {inp}[{coord}]: analytic {a:.6e} vs fd {fd:.6e}")?;
        }
        Ok(())
    }
}

/// Compares analytic gradients of a scalar-valued function against central
/// finite differences over every coordinate of every input.
///
/// Relative error uses max(|analytic|, |fd|, 1e-3) as the denominator so
/// coordinates with near-zero gradients are judged on an absolute scale that
/// finite differences can actually resolve.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: &F, step: f64, tol: f64) -> GradCheckReport
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Var<'a, f64>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    assert_eq!(loss.value().len(), 1, "grad_check needs a scalar function");
    tape.backward(&loss).expect("backward over scalar loss");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var<f64>> = probe.iter().map(|x| t.leaf(x.clone())).collect();
        f(&t, &vs).data()[0]
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        n_coords: 0,
        tol,
        failures: Vec::new(),
    };
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut data = input.data().to_vec();
            data[j] += step;
            plus[i] = Tensor::from_vec(input.shape().to_vec(), data.clone());
            let f_plus = eval(&plus);
            data[j] -= 2.0 * step;
            plus[i] = Tensor::from_vec(input.shape().to_vec(), data);
            let f_minus = eval(&plus);
            let fd = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[i][j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            report.n_coords += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            if rel > tol {
                report.failures.push((i, j, a, fd));
            }
        }
    }
    report
}
