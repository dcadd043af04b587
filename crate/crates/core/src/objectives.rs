//! Discriminator objectives, their gradients, and batch-level checks.
//!
//! All losses here are pure functions of discriminator values so they can be
//! unit-tested against hand-computed numbers and finite differences without
//! touching the network. Conventions:
//!
//! * `f_x` holds discriminator values on the numerator-distribution batch,
//!   `f_y` on the denominator batch; both must be non-empty.
//! * The adversarial loss is minimized; the two variational baselines are
//!   bounds that are maximized, so the trainer negates them.
//! * Everything is branch-stable in `f64`: `softplus` switches to its
//!   asymptote at `|z| = 30`, where the two branches differ by < 1e-13.

use serde::Serialize;

/// Threshold where `softplus` switches to its linear/exponential asymptote.
pub const SOFTPLUS_BRANCH: f64 = 30.0;

/// Floor applied to the batch kernel-complexity proxy before the fractional
/// power in the penalty; keeps the exponent's infinite slope at zero out of
/// the gradient.
pub const S_MINI_FLOOR: f64 = 1e-12;

/// Slack allowed when checking the minibatch upper bound and the embedding
/// norm bound; absorbs accumulated rounding, nothing more.
pub const BOUND_TOL: f64 = 1e-9;

/// A variational KL bound whose magnitude exceeds this is treated as a
/// diverged run. Double precision keeps `exp` finite far past any meaningful
/// estimate, so non-finiteness alone is too late a tripwire.
pub const DIVERGENCE_GUARD: f64 = 1e6;

/// Numerically stable `ln(1 + exp(z))`.
pub fn softplus(z: f64) -> f64 {
    if z > SOFTPLUS_BRANCH {
        z
    } else if z < -SOFTPLUS_BRANCH {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Numerically stable `ln(sigmoid(z)) = -softplus(-z)`.
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// Logistic sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Adversarial discriminator loss
/// `-(mean log sigmoid(f_x) + mean log sigmoid(-f_y))`.
///
/// Minimizing this drives `f` up on numerator samples and down on denominator
/// samples; at `f = 0` it equals `2 ln 2`.
pub fn logistic_objective(f_x: &[f64], f_y: &[f64]) -> f64 {
    assert!(!f_x.is_empty() && !f_y.is_empty(), "empty batch");
    let px: f64 = f_x.iter().map(|&z| softplus(-z)).sum::<f64>() / f_x.len() as f64;
    let qy: f64 = f_y.iter().map(|&z| softplus(z)).sum::<f64>() / f_y.len() as f64;
    px + qy
}

/// Gradient of [`logistic_objective`] with respect to each `f` value.
pub fn logistic_objective_grad(f_x: &[f64], f_y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let bx = f_x.len() as f64;
    let by = f_y.len() as f64;
    let gx = f_x.iter().map(|&z| -sigmoid(-z) / bx).collect();
    let gy = f_y.iter().map(|&z| sigmoid(z) / by).collect();
    (gx, gy)
}

/// Adversarial loss plus the kernel-complexity penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenalizedLoss {
    pub total: f64,
    pub penalty: f64,
    /// True when `s_mini` was at or below the floor and had to be clamped.
    pub clamped: bool,
}

/// `loss_d + lambda * max(s_mini, floor)^gamma`.
pub fn penalized_objective(loss_d: f64, s_mini: f64, lambda: f64, gamma: f64) -> PenalizedLoss {
    let clamped = s_mini <= S_MINI_FLOOR;
    let s = s_mini.max(S_MINI_FLOOR);
    let penalty = lambda * s.powf(gamma);
    PenalizedLoss {
        total: loss_d + penalty,
        penalty,
        clamped,
    }
}

/// Derivative of the penalty with respect to `s_mini`.
///
/// Below the clamp floor the penalty is constant, so the derivative is zero;
/// above it the chain rule gives `lambda * gamma * s^(gamma - 1)`.
pub fn penalty_grad_smini(s_mini: f64, lambda: f64, gamma: f64) -> f64 {
    if s_mini <= S_MINI_FLOOR {
        0.0
    } else {
        lambda * gamma * s_mini.powf(gamma - 1.0)
    }
}

/// Finite-sample KL readout: the arithmetic mean of `f` over numerator
/// samples.
pub fn kl_readout(f_x: &[f64]) -> f64 {
    assert!(!f_x.is_empty(), "empty batch");
    mean(f_x)
}

/// Alternative accumulator: mean of `log sigmoid(f)` over numerator samples.
///
/// Kept behind a config switch for comparison runs; it is not the default
/// readout because it estimates a different (always negative) functional.
pub fn log_sigmoid_readout(f_x: &[f64]) -> f64 {
    assert!(!f_x.is_empty(), "empty batch");
    f_x.iter().map(|&z| log_sigmoid(z)).sum::<f64>() / f_x.len() as f64
}

/// Value of a variational KL bound together with a divergence flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundValue {
    pub value: f64,
    /// Non-finite or beyond [`DIVERGENCE_GUARD`]; the run should be marked
    /// unstable, never aborted.
    pub diverged: bool,
}

impl BoundValue {
    fn new(value: f64) -> Self {
        BoundValue {
            value,
            diverged: !value.is_finite() || value.abs() > DIVERGENCE_GUARD,
        }
    }
}

/// `ln(sum exp(v))` with max-shift stabilization.
fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        // All -inf (empty handled by callers) or some NaN/inf input.
        return m;
    }
    let s: f64 = vals.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Donsker-Varadhan lower bound `mean(f_x) - ln(mean(exp(f_y)))`.
///
/// The log-mean-exp is max-shifted, so the value stays finite for any finite
/// inputs; divergence is reported through the flag.
pub fn dv_objective(f_x: &[f64], f_y: &[f64]) -> BoundValue {
    assert!(!f_x.is_empty() && !f_y.is_empty(), "empty batch");
    let lme = log_sum_exp(f_y) - (f_y.len() as f64).ln();
    BoundValue::new(mean(f_x) - lme)
}

/// Gradient of [`dv_objective`] with respect to each `f` value.
pub fn dv_objective_grad(f_x: &[f64], f_y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let bx = f_x.len() as f64;
    let gx = vec![1.0 / bx; f_x.len()];
    // d/df_y of -ln(mean exp) is minus the softmax weight of that entry.
    let m = f_y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = f_y.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = weights.iter().sum();
    let gy = weights.iter().map(|w| -w / z).collect();
    (gx, gy)
}

/// f-GAN KL lower bound `mean(f_x) - mean(exp(f_y - 1))`.
pub fn fgan_kl_objective(f_x: &[f64], f_y: &[f64]) -> BoundValue {
    assert!(!f_x.is_empty() && !f_y.is_empty(), "empty batch");
    let ey: f64 = f_y.iter().map(|&v| (v - 1.0).exp()).sum::<f64>() / f_y.len() as f64;
    BoundValue::new(mean(f_x) - ey)
}

/// Gradient of [`fgan_kl_objective`] with respect to each `f` value.
pub fn fgan_kl_objective_grad(f_x: &[f64], f_y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let bx = f_x.len() as f64;
    let by = f_y.len() as f64;
    let gx = vec![1.0 / bx; f_x.len()];
    let gy = f_y.iter().map(|&v| -(v - 1.0).exp() / by).collect();
    (gx, gy)
}

/// Result of the minibatch energy-based upper-bound check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MebubCheck {
    /// Achieved adversarial objective `-loss_d`.
    pub lhs: f64,
    /// `log sigmoid(mean f_x - mean f_y)`, the batch-level cap on `lhs`.
    pub rhs: f64,
    pub satisfied: bool,
}

/// Checks `-loss_d <= log sigmoid(mean f_x - mean f_y) + tol`.
///
/// The bound follows from concavity of `log sigmoid`, so it must hold for the
/// `f` values that produced `loss_d`; a violation indicates an inconsistent
/// loss computation, not a property of the data.
pub fn mebub_check(loss_d: f64, f_x: &[f64], f_y: &[f64]) -> MebubCheck {
    assert!(!f_x.is_empty() && !f_y.is_empty(), "empty batch");
    let lhs = -loss_d;
    let rhs = log_sigmoid(mean(f_x) - mean(f_y));
    MebubCheck {
        lhs,
        rhs,
        satisfied: lhs <= rhs + BOUND_TOL,
    }
}
