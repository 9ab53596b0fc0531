//! Reverse-mode gradients compared against central finite differences.

use crate::error::{invalid_input, Result};
use crate::matrix::Matrix;

use super::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub fd_step: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Elements with `|x| <= min_input_abs` are not checked; 0 disables.
    pub min_input_abs: f64,
    /// Relative size of the curvature-corrected one-sided mismatch above
    /// which an element counts as non-smooth.
    pub kink_tol: f64,
    /// Assumed evaluation error of `f` in ulps of its value. Difference
    /// quotients below `noise_ulps·|f|·ε_mach/fd_step` are roundoff, so the
    /// relative-error denominator never drops below that divided by `tol`.
    pub noise_ulps: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-5,
            tol: 1e-3,
            floor: 1e-8,
            min_input_abs: 0.0,
            kink_tol: 1e-3,
            noise_ulps: 16.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExclusionReason {
    /// One-sided difference quotients disagree by more than curvature
    /// explains: a kink lies within two steps of the input (clamp boundary,
    /// zero-magnitude bin).
    NonSmooth,
    SmallInput,
}

impl ExclusionReason {
    pub fn name(self) -> &'static str {
        match self {
            ExclusionReason::NonSmooth => "non-smooth",
            ExclusionReason::SmallInput => "small-input",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub value: f64,
    pub checked: usize,
    pub excluded: Vec<(usize, ExclusionReason)>,
    pub max_rel_error: f64,
    pub worst: Option<ElementCheck>,
    /// Checked elements whose relative error exceeds `tol`.
    pub failures: Vec<ElementCheck>,
    pub tol: f64,
    /// Smallest difference quotient distinguishable from roundoff.
    pub resolution: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

fn eval<F>(f: &F, input: &Matrix<f64>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let out = f(&mut tape, x)?;
    tape.scalar(out)
}

/// Checks every element of `input`.
pub fn grad_check<F>(f: F, input: &Matrix<f64>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..input.len()).collect();
    grad_check_indices(f, input, &all, cfg)
}

/// Checks only the listed flat (row-major) indices of `input`.
pub fn grad_check_indices<F>(
    f: F,
    input: &Matrix<f64>,
    indices: &[usize],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !input.is_finite() {
        return Err(invalid_input!("grad_check input must be finite"));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= input.len()) {
        return Err(invalid_input!("index {i} out of range for {} elements", input.len()));
    }
    let h = cfg.fd_step;
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let out = f(&mut tape, x)?;
    let value = tape.scalar(out)?;
    let grads = tape.backward(out)?.real(x);
    let resolution = cfg.noise_ulps * value.abs() * f64::EPSILON / h;

    let mut report = GradCheckReport {
        value,
        checked: 0,
        excluded: Vec::new(),
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
        tol: cfg.tol,
        resolution,
    };
    let mut probe = input.clone();
    for &i in indices {
        let x0 = input.as_slice()[i];
        if cfg.min_input_abs > 0.0 && x0.abs() <= cfg.min_input_abs {
            report.excluded.push((i, ExclusionReason::SmallInput));
            continue;
        }
        let mut at = |dx: f64| -> Result<f64> {
            probe.as_mut_slice()[i] = x0 + dx;
            let v = eval(&f, &probe);
            probe.as_mut_slice()[i] = x0;
            v
        };
        let plus = at(h)?;
        let minus = at(-h)?;
        let plus2 = at(2.0 * h)?;
        let minus2 = at(-2.0 * h)?;

        // For smooth f the one-sided gap grows linearly with the step, so
        // gap(2h) - 2 gap(h) is third order; a kink leaves an O(1) residue.
        let gap = (plus - value) / h - (value - minus) / h;
        let gap2 = (plus2 - value) / (2.0 * h) - (value - minus2) / (2.0 * h);
        let scale = ((plus - value) / h).abs().max(((value - minus) / h).abs())
            .max(cfg.floor)
            .max(resolution / cfg.kink_tol);
        if (gap2 - 2.0 * gap).abs() > cfg.kink_tol * scale {
            report.excluded.push((i, ExclusionReason::NonSmooth));
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.as_slice()[i];
        let rel_error = (analytic - numeric).abs() / analytic
            .abs()
            .max(numeric.abs())
            .max(cfg.floor)
            .max(resolution / cfg.tol);
        let check = ElementCheck {
            index: i,
            analytic,
            numeric,
            rel_error,
        };
        report.checked += 1;
        if rel_error > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel_error);
            report.worst = Some(check.clone());
        }
        if !(rel_error <= cfg.tol) {
            report.failures.push(check);
        }
    }
    Ok(report)
}
