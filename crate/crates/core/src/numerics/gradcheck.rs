//! Central finite-difference gradient checking in double precision.
//!
//! The checked function reports a branch signature alongside its value (for
//! example the sign pattern of every LeakyReLU input). Coordinates whose
//! `+h`/`-h` evaluations land on a different branch than the base point are
//! retried with smaller steps, and skipped if every step straddles the
//! kink: such a difference quotient does not estimate the derivative.

use crate::error::{Result, TmrError};

/// One evaluation of a scalar function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    /// Hash of every piecewise branch taken during evaluation.
    pub signature: u64,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Self {
            value,
            signature: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }

    /// Combines reports of disjoint coordinate sets.
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst_index = other.worst_index;
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }

    pub fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: None,
            checked: 0,
            skipped_kinks: 0,
        }
    }
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `f` around `point`.
///
/// `coords` restricts the check to a subset of coordinates (all if `None`).
/// A coordinate whose perturbation changes the branch signature is retried
/// with steps `h/10`, `h/100` and `h/1000` before it is skipped.
pub fn grad_check<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    h: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<Probe>,
{
    if analytic.len() != point.len() {
        return Err(TmrError::Config(format!(
            "gradient has {} entries for {} coordinates",
            analytic.len(),
            point.len()
        )));
    }
    let base = f(point)?;
    if !base.value.is_finite() {
        return Err(TmrError::Numeric(format!(
            "loss is not finite at the base point: {}",
            base.value
        )));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport::empty();
    let mut x = point.to_vec();
    for &i in coords {
        let orig = x[i];
        let mut numeric = None;
        let mut step = h;
        for _ in 0..4 {
            x[i] = orig + step;
            let plus = f(&x)?;
            x[i] = orig - step;
            let minus = f(&x)?;
            x[i] = orig;
            if !plus.value.is_finite() || !minus.value.is_finite() {
                return Err(TmrError::Numeric(format!(
                    "loss is not finite when perturbing coordinate {i}"
                )));
            }
            if plus.signature == base.signature && minus.signature == base.signature {
                numeric = Some((plus.value - minus.value) / (2.0 * step));
                break;
            }
            step /= 10.0;
        }
        let Some(numeric) = numeric else {
            report.skipped_kinks += 1;
            continue;
        };
        let abs = (analytic[i] - numeric).abs();
        let rel = relative_error(analytic[i], numeric);
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err || report.worst_index.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

/// Folds a sequence of branch decisions into a signature.
#[derive(Clone, Copy, Debug, Default)]
pub struct SignatureHasher(u64);

impl SignatureHasher {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    #[inline]
    pub fn push(&mut self, bit: bool) {
        self.0 ^= bit as u64 + 1;
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}
