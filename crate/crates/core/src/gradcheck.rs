//! Central finite-difference checks for tape gradients.
//!
//! The checker only ever evaluates the forward pass of the graph under
//! test; the numerical derivative is independent of every backward rule.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs_floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    /// Largest relative error among elements above the absolute floor.
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Compares tape gradients of the scalar produced by `build` against
/// central differences, for every element of every input.
///
/// `build` must be deterministic: it is re-run for each perturbation.
pub fn check<F>(inputs: &[Tensor<f64>], build: F, tol: Tolerance) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t)).collect();
        let out = build(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[ti].len()]);
        for ei in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + tol.step;
            let up = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - tol.step;
            let down = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;

            let numeric = (up - down) / (2.0 * tol.step);
            let a = analytic[ei];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > tol.abs_floor {
                let rel = abs / scale;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = Some((ti, ei, a, numeric));
                }
                if rel > tol.rel {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

fn scalar(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::shape(
            "gradcheck",
            format!("graph output must be a scalar, got {:?}", t.shape()),
        ));
    }
    Ok(t.data()[0])
}
