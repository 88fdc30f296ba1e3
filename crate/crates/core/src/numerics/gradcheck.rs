use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Finite-difference gradient checker.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    /// Runs the analytic pass on a tape with a deliberately broken `tanh` rule.
    #[doc(hidden)]
    pub corrupt_backward: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tol: 1e-4,
            corrupt_backward: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` attaining the maximum.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub passed: bool,
}

impl GradCheck {
    pub fn new(step: f64, tol: f64) -> Self {
        Self {
            step,
            tol,
            ..Self::default()
        }
    }

    /// Compares reverse-mode gradients of `f` against central differences.
    ///
    /// `f` receives one gradient-tracked [`Var`] per tensor in `inputs` and
    /// must return a one-element head.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let analytic = {
            let mut tape = if self.corrupt_backward {
                Tape::with_corrupted_backward()
            } else {
                Tape::new()
            };
            let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
            let head = f(&mut tape, &vars)?;
            if tape.shape(head) != [1] {
                return Err(Error::contract(format!(
                    "gradient check needs a scalar head, got shape {:?}",
                    tape.shape(head)
                )));
            }
            let mut grads = tape.backward(head)?;
            vars.iter()
                .zip(inputs)
                .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect::<Vec<_>>()
        };

        let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
            let head = f(&mut tape, &vars)?;
            Ok(tape.value(head).item())
        };

        let mut probe = inputs.to_vec();
        let mut worst = (0, 0);
        let mut max_err = 0.0f64;
        let mut coordinates = 0;
        for (i, input) in inputs.iter().enumerate() {
            for k in 0..input.len() {
                let orig = input.get(k);
                probe[i].data_mut()[k] = orig + self.step;
                let plus = eval(&probe)?;
                probe[i].data_mut()[k] = orig - self.step;
                let minus = eval(&probe)?;
                probe[i].data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[i].get(k);
                let err = relative_error(a, numeric);
                if err > max_err || err.is_nan() {
                    max_err = if err.is_nan() { f64::INFINITY } else { err };
                    worst = (i, k);
                }
                coordinates += 1;
            }
        }
        Ok(GradCheckReport {
            max_rel_error: max_err,
            worst,
            coordinates,
            passed: max_err < self.tol,
        })
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Generic single-coordinate probe used by tests on other scalar types.
pub fn central_difference<T: Scalar>(f: impl Fn(T) -> T, x: T, step: T) -> T {
    (f(x + step) - f(x - step)) / (step + step)
}
