//! Probability bound evaluator and post-run verification of the tracked
//! inequalities.
//!
//! The bound evaluator computes, from user-supplied constants, a lower bound
//! on the probability that the finite-sample divergence estimate sits within
//! `epsilon` of the population value. Two of its constants have no cheap
//! closed form, so they default to 1; the evaluator exists to show the
//! bound's shape, not to certify probabilities.
//!
//! The trace checker re-examines a finished [`RunReport`]: tightness-check
//! violations, embedding-norm-bound violations, and the positive
//! semidefiniteness of the spot-checked minibatch Grams.

use crate::error::{Error, Result};
use crate::trainer::RunReport;
use serde::Serialize;

/// Spot-checked Grams may dip this far below zero, relative to the largest
/// eigenvalue, before counting as indefinite.
pub const PSD_RTOL: f64 = 1e-8;

/// Constants entering the estimation-error probability bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundInputs {
    /// Accuracy level the estimate should reach.
    pub epsilon: f64,
    /// Samples per distribution.
    pub m: u64,
    /// Bound on `|f|` over the input domain.
    pub f_bound: f64,
    /// Radius of the function ball the discriminator is searched over.
    pub radius: f64,
    /// Kernel complexity: the supremum of the kernel.
    pub s_k: f64,
    /// Covering-number constant; defaults to 1.
    pub c_s: f64,
    /// Embedding operator norm; defaults to 1.
    pub l_s_norm: f64,
    /// Input dimension.
    pub input_dim: usize,
    /// Smoothness of the discriminator class; must exceed `input_dim`.
    pub smoothness: f64,
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        let positives = [
            ("epsilon", self.epsilon),
            ("f_bound", self.f_bound),
            ("radius", self.radius),
            ("s_k", self.s_k),
            ("c_s", self.c_s),
            ("l_s_norm", self.l_s_norm),
            ("smoothness", self.smoothness),
        ];
        for (name, v) in positives {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if self.m == 0 {
            return Err(Error::Domain("m must be at least 1".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Domain("input_dim must be at least 1".into()));
        }
        if self.smoothness <= self.input_dim as f64 {
            return Err(Error::Domain(format!(
                "smoothness must exceed the input dimension, got {} <= {}",
                self.smoothness, self.input_dim
            )));
        }
        Ok(())
    }

    /// Inputs assembled from a finished run: `f_bound` from the largest `|f|`
    /// observed, `s_k` from the largest Gram entry, unit radius and norm
    /// constants, smoothness defaulted to twice the input dimension.
    pub fn from_run(report: &RunReport, epsilon: f64) -> Self {
        let s_k = report
            .traces
            .iter()
            .filter_map(|t| t.s_mini_max)
            .fold(f64::NEG_INFINITY, f64::max);
        BoundInputs {
            epsilon,
            m: report.config.m as u64,
            f_bound: report.f_abs_max.max(1e-12),
            radius: 1.0,
            s_k: if s_k.is_finite() && s_k > 0.0 { s_k } else { 1.0 },
            c_s: 1.0,
            l_s_norm: 1.0,
            input_dim: report.input_dim,
            smoothness: 2.0 * report.input_dim as f64,
        }
    }
}

/// Lower bound on the probability that the estimate is within `epsilon` of
/// the true divergence:
///
/// ```text
/// 1 - 2 exp[ (4 R C_s sqrt(S_K ||L_s||) / eps)^(2n/h) - m eps^2 / (4 M^2) ]
/// ```
///
/// The value can be negative (a vacuous bound) and is returned as-is.
pub fn error_probability_bound(inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    let base = 4.0 * inp.radius * inp.c_s * (inp.s_k * inp.l_s_norm).sqrt() / inp.epsilon;
    let exponent = 2.0 * inp.input_dim as f64 / inp.smoothness;
    let complexity_term = base.powf(exponent);
    let concentration_term =
        inp.m as f64 * inp.epsilon * inp.epsilon / (4.0 * inp.f_bound * inp.f_bound);
    Ok(1.0 - 2.0 * (complexity_term - concentration_term).exp())
}

/// Violation counts over a finished run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CheckSummary {
    pub epochs_checked: usize,
    /// Minibatches where `-loss_d` exceeded its batch-level cap.
    pub mebub_violations: usize,
    /// Minibatches where `||mu_p + mu_q||` exceeded `2 sqrt(s_mini)`.
    pub norm_violations: usize,
    pub psd_spots_checked: usize,
    /// Spot-checked Grams with an eigenvalue below `-PSD_RTOL * max_eig`.
    pub psd_failures: usize,
    pub all_passed: bool,
}

/// Re-examines the per-epoch traces and Gram spot checks of a run. Reports
/// violation counts; never mutates and never errors.
pub fn training_trace_checks(report: &RunReport) -> CheckSummary {
    let mut mebub_violations = 0;
    let mut norm_violations = 0;
    for t in &report.traces {
        mebub_violations += t.mebub_violations;
        norm_violations += t.norm_violations;
    }
    let mut psd_failures = 0;
    for s in &report.psd_spots {
        if s.min_eig < -PSD_RTOL * s.max_eig.abs() {
            psd_failures += 1;
        }
    }
    CheckSummary {
        epochs_checked: report.traces.len(),
        mebub_violations,
        norm_violations,
        psd_spots_checked: report.psd_spots.len(),
        psd_failures,
        all_passed: mebub_violations == 0 && norm_violations == 0 && psd_failures == 0,
    }
}
