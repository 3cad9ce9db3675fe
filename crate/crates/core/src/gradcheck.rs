//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forwards on fresh tapes, so it is
//! independent of every backward rule it checks.

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// `|analytic − numeric| / (|numeric| + 1e-8)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Worst element seen by a check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

impl Report {
    pub fn max_rel_err(&self) -> f64 {
        self.worst.map_or(0.0, |m| m.rel_err)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }

    fn record(&mut self, m: Mismatch) {
        self.checked += 1;
        if self.worst.map_or(true, |w| m.rel_err > w.rel_err) {
            self.worst = Some(m);
        }
    }
}

/// Compares the tape gradient of `f` against central differences with
/// respect to every element of every input.
///
/// `f` receives the inputs as tape variables and must return a one-element
/// output. `fault` installs a sign-flip fixture on the analytic tape.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, fault: Option<OpKind>, f: F) -> Result<Report>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_sign_flip(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut report = Report::default();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[e] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[e];
            report.record(Mismatch { input: i, element: e, analytic: a, numeric, rel_err: rel_err(a, numeric) });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_flipped_rule() {
        let x = Tensor::from_f64(&[3], &[0.3, -0.7, 1.1]).unwrap();
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let e = t.exp(v[0]);
            Ok(t.sum(e))
        };
        assert!(check(&[x.clone()], DEFAULT_STEP, None, f).unwrap().passes(DEFAULT_TOL));
        let bad = check(&[x], DEFAULT_STEP, Some(OpKind::Exp), f).unwrap();
        assert!(!bad.passes(DEFAULT_TOL));
    }
}
