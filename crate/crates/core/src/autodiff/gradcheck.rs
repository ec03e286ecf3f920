//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::{BackwardFault, Tape, Var};

/// Gradients below this magnitude are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Components whose probes moved some relu or abs input across zero;
    /// their central difference does not estimate the derivative at `at`.
    pub kink_crossings: usize,
}

/// Settings for [`GradCheck::run`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    /// Corrupts one backward rule for the analytic pass (negative controls).
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            fault: None,
        }
    }
}

impl GradCheck {
    /// Compares the tape gradient of `f` at `at` against
    /// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every component.
    ///
    /// `f` builds a scalar on the given tape from the input node; it is
    /// called once with a gradient-tracking leaf and `2 * at.len()` times
    /// with constants.
    pub fn run<F>(&self, mut f: F, at: &Tensor) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Tape, Var) -> Result<Var>,
    {
        if !(self.step > 0.0) {
            return Err(Error::InvalidArgument(format!("step {} must be > 0", self.step)));
        }
        let mut tape = match &self.fault {
            Some(fault) => Tape::with_fault(fault.clone()),
            None => Tape::new(),
        }
        .track_kinks();
        let x = tape.leaf(at.clone())?;
        let loss = f(&mut tape, x)?;
        let grads = tape.backward(loss)?;
        let analytic = grads
            .get(x)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; at.len()]);
        let base = tape.kink_pattern().unwrap_or_default().to_vec();

        let mut eval = |t: Tensor| -> Result<(f64, bool)> {
            let mut tape = Tape::new().track_kinks();
            let x = tape.constant(t)?;
            let out = f(&mut tape, x)?;
            Ok((tape.value(out).item()?, tape.kink_pattern() != Some(&base[..])))
        };
        let mut numeric = Vec::with_capacity(at.len());
        let mut kink_crossings = 0;
        for i in 0..at.len() {
            let mut plus = at.clone();
            plus.data_mut()[i] += self.step;
            let mut minus = at.clone();
            minus.data_mut()[i] -= self.step;
            let ((fp, kp), (fm, km)) = (eval(plus)?, eval(minus)?);
            kink_crossings += usize::from(kp || km);
            numeric.push((fp - fm) / (2.0 * self.step));
        }

        let (worst_index, max_rel_error) = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(*a, *n))
            .enumerate()
            .fold((0, 0.0_f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });
        Ok(GradCheckReport {
            passed: max_rel_error <= self.tol,
            max_rel_error,
            worst_index,
            analytic,
            numeric,
            kink_crossings,
        })
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// [`GradCheck::run`] with explicit step and tolerance.
pub fn finite_difference_check<F>(f: F, at: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    GradCheck {
        step,
        tol,
        fault: None,
    }
    .run(f, at)
}
