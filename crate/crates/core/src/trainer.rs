//! Minibatch training loop: single runs, early stopping, and repetition
//! aggregation for every estimator kind.
//!
//! One run proceeds in epochs of `floor(m / b)` joint minibatches. Each
//! minibatch evaluates the discriminator on the current parameters,
//! accumulates the epoch loss and the epoch KL readout, then applies one
//! Adam step. The run keeps the KL recorded at the epoch with the smallest
//! mean adversarial loss and stops once `flat_n` epochs pass without a
//! strict improvement.
//!
//! Numerical breakdown (non-finite losses or gradients, variational bounds
//! past the divergence guard) halts the run and marks it unstable. The
//! partial report still carries everything observed up to the halt, so
//! repetition sweeps treat instability as data rather than failure.

use crate::data::{gather_rows, minibatch_indices, Scenario};
use crate::error::{Error, Result};
use crate::linalg::{dot, symmetric_eigen_range, Mat};
use crate::nn::{net_grad_slices, Adam, FeatureNet, LinearReadout, NetGrads};
use crate::objectives::{
    dv_objective, dv_objective_grad, fgan_kl_objective, fgan_kl_objective_grad, kl_readout,
    log_sigmoid_readout, logistic_objective, logistic_objective_grad, mebub_check,
    penalized_objective, penalty_grad_smini, BoundValue, MebubCheck, BOUND_TOL,
};
use crate::rkhs::{embedding_stats, EmbeddingStats, MinibatchGram, StochasticHead};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// RNG stream for data: pool draws, per-epoch shuffles, fresh minibatches.
pub const STREAM_DATA: u64 = 1;
/// RNG stream for parameter initialization.
pub const STREAM_INIT: u64 = 2;
/// RNG stream for weight-sample draws during training.
pub const STREAM_TRAIN: u64 = 3;

/// Per-run RNG with one stream per concern, so two runs with the same seed
/// see identical data pools no matter which estimator consumes how many
/// draws elsewhere.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Which discriminator and objective a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Stochastic kernel head with the complexity penalty.
    RkhsPenalized,
    /// Stochastic kernel head, penalty weight forced to zero.
    RkhsUnpenalized,
    /// Deterministic linear readout on the logistic objective.
    PlainNn,
    /// Donsker-Varadhan lower bound on the same network.
    DvBaseline,
    /// Variational KL lower bound `mean f_x - mean exp(f_y - 1)`.
    FganBaseline,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::RkhsPenalized,
        EstimatorKind::RkhsUnpenalized,
        EstimatorKind::PlainNn,
        EstimatorKind::DvBaseline,
        EstimatorKind::FganBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::RkhsPenalized => "rkhs_penalized",
            EstimatorKind::RkhsUnpenalized => "rkhs_unpenalized",
            EstimatorKind::PlainNn => "plain_nn",
            EstimatorKind::DvBaseline => "dv_baseline",
            EstimatorKind::FganBaseline => "fgan_baseline",
        }
    }

    /// Kinds whose readout is the stochastic kernel head.
    pub fn uses_kernel_head(self) -> bool {
        matches!(
            self,
            EstimatorKind::RkhsPenalized | EstimatorKind::RkhsUnpenalized
        )
    }

    /// Kinds trained on the logistic objective (the tightness check applies
    /// only to these).
    pub fn uses_logistic_loss(self) -> bool {
        matches!(
            self,
            EstimatorKind::RkhsPenalized | EstimatorKind::RkhsUnpenalized | EstimatorKind::PlainNn
        )
    }

    /// Only the penalized kernel kind carries a nonzero penalty weight.
    pub fn penalized(self) -> bool {
        matches!(self, EstimatorKind::RkhsPenalized)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator '{s}'")))
    }
}

/// Whether minibatches resample a fixed pool or draw fresh points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Finite,
    Infinite,
}

impl SampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleMode::Finite => "finite",
            SampleMode::Infinite => "infinite",
        }
    }
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finite" => Ok(SampleMode::Finite),
            "infinite" => Ok(SampleMode::Infinite),
            _ => Err(Error::Config(format!("unknown sample mode '{s}'"))),
        }
    }
}

/// Which per-minibatch readout the epoch KL accumulator averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlAccumulator {
    /// Mean of `f` over numerator samples (the default divergence readout).
    MeanF,
    /// Mean of `log sigmoid(f)`; kept for comparison, estimates a different
    /// (always negative) functional.
    MeanLogSigmoid,
}

impl KlAccumulator {
    pub fn as_str(self) -> &'static str {
        match self {
            KlAccumulator::MeanF => "mean_f",
            KlAccumulator::MeanLogSigmoid => "mean_log_sigmoid",
        }
    }

    fn apply(self, f_x: &[f64]) -> f64 {
        match self {
            KlAccumulator::MeanF => kl_readout(f_x),
            KlAccumulator::MeanLogSigmoid => log_sigmoid_readout(f_x),
        }
    }
}

impl fmt::Display for KlAccumulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KlAccumulator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_f" => Ok(KlAccumulator::MeanF),
            "mean_log_sigmoid" => Ok(KlAccumulator::MeanLogSigmoid),
            _ => Err(Error::Config(format!("unknown kl accumulator '{s}'"))),
        }
    }
}

/// Full hyperparameter set for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub estimator: EstimatorKind,
    pub sample_mode: SampleMode,
    pub kl_accumulator: KlAccumulator,
    /// Width of both hidden layers; also the feature dimension.
    pub hidden_dim: usize,
    /// Samples per distribution (per epoch in infinite mode).
    pub m: usize,
    /// Minibatch size per distribution.
    pub b: usize,
    pub lr: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Weight samples per training evaluation.
    pub d: usize,
    /// Weight samples per KL readout evaluation.
    pub d_readout: usize,
    /// Patience: stop once this many epochs pass the best one.
    pub flat_n: usize,
    pub iter_max: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            estimator: EstimatorKind::RkhsPenalized,
            sample_mode: SampleMode::Finite,
            kl_accumulator: KlAccumulator::MeanF,
            hidden_dim: 25,
            m: 5000,
            b: 50,
            lr: 5e-3,
            lambda: 5e-4,
            gamma: 0.05,
            d: 8,
            d_readout: 128,
            flat_n: 100,
            iter_max: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        if self.b == 0 || self.b > self.m {
            return Err(Error::Config(format!(
                "need 1 <= b <= m, got b = {}, m = {}",
                self.b, self.m
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if self.d == 0 || self.d_readout == 0 {
            return Err(Error::Config("d and d_readout must be positive".into()));
        }
        if self.flat_n == 0 {
            return Err(Error::Config("flat_n must be at least 1".into()));
        }
        if self.iter_max == 0 {
            return Err(Error::Config("iter_max must be at least 1".into()));
        }
        Ok(())
    }

    /// Copy with the penalty weight zeroed for every kind that has no
    /// penalty term, so reports and CSV rows never claim a penalty that was
    /// not applied.
    pub fn normalized(&self) -> TrainConfig {
        let mut c = self.clone();
        if !c.estimator.penalized() {
            c.lambda = 0.0;
        }
        c
    }
}

/// Per-epoch scalars recorded during a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochTrace {
    /// 1-indexed epoch number.
    pub epoch: usize,
    /// Mean adversarial loss over the epoch's minibatches (penalty excluded).
    pub loss: f64,
    /// Mean KL readout over the epoch's minibatches.
    pub kl_epoch: f64,
    /// Largest Gram entry seen this epoch (kernel kinds only).
    pub s_mini_max: Option<f64>,
    /// Largest `||mu_p + mu_q||` this epoch (kernel kinds only).
    pub norm_sum_max: Option<f64>,
    /// Largest `||mu_p - mu_q||` this epoch (kernel kinds only).
    pub norm_diff_max: Option<f64>,
    pub mebub_satisfied: bool,
    pub mebub_violations: usize,
    pub norm_violations: usize,
}

/// Eigenvalue range of one spot-checked minibatch Gram.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PsdSpot {
    pub epoch: usize,
    pub min_eig: f64,
    pub max_eig: f64,
}

/// Everything one training run produced.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub input_dim: usize,
    /// KL readout of the best-loss epoch; NaN if no epoch completed.
    pub kl_estimate: f64,
    pub best_loss: f64,
    /// 1-indexed; 0 if no epoch completed.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stable: bool,
    /// Why the run halted early, when it did.
    pub instability: Option<String>,
    /// True when `b` does not divide `m` and each epoch drops a tail.
    pub tail_truncated: bool,
    /// Largest `|f|` observed on any training minibatch.
    pub f_abs_max: f64,
    /// Last observed largest Gram entry (kernel kinds only).
    pub s_mini_final: Option<f64>,
    /// Total tightness-check violations (logistic kinds only).
    pub mebub_violations: Option<usize>,
    /// Total embedding-norm-bound violations (kernel kinds only).
    pub norm_violations: Option<usize>,
    pub traces: Vec<EpochTrace>,
    pub psd_spots: Vec<PsdSpot>,
}

/// Gradients for the feature net plus the stochastic head.
#[derive(Clone, Debug)]
pub struct RkhsGrads {
    pub net: NetGrads,
    pub w_bar: Vec<f64>,
    pub l: Mat,
}

/// One kernel-head minibatch evaluation: scalars for the epoch accumulators,
/// the per-batch checks, and the full gradient set.
#[derive(Clone, Debug)]
pub struct RkhsStep {
    pub loss_d: f64,
    pub penalty: f64,
    /// `loss_d` plus the penalty; the quantity the gradients descend.
    pub total: f64,
    pub f_x: Vec<f64>,
    pub f_y: Vec<f64>,
    pub s_mini: f64,
    pub stats: EmbeddingStats,
    pub mebub: MebubCheck,
    pub gram: MinibatchGram,
    /// Joint feature batch, numerator rows first.
    pub phi: Mat,
    pub grads: RkhsGrads,
}

/// Forward and backward pass of the penalized objective on one joint
/// minibatch, with externally supplied weight noise `eps` (`d x p` standard
/// normals). Exposed so gradient checks can exercise the exact production
/// path while holding the noise fixed.
pub fn rkhs_batch_step(
    net: &FeatureNet,
    head: &StochasticHead,
    x: &Mat,
    y: &Mat,
    eps: &Mat,
    lambda: f64,
    gamma: f64,
) -> Result<RkhsStep> {
    let bx = x.rows();
    let joint = x.vstack(y);
    let (phi, tape) = net.forward(&joint)?;
    let samples = head.samples_from_eps(eps);
    let f = head.readout(&phi, &samples);
    let f_x = f[..bx].to_vec();
    let f_y = f[bx..].to_vec();

    let loss_d = logistic_objective(&f_x, &f_y);
    let gram = head.gram(&phi, bx);
    let s_mini = gram.s_mini();
    let pen = penalized_objective(loss_d, s_mini, lambda, gamma);
    let stats = embedding_stats(&f_x, &f_y, &gram);
    let mebub = mebub_check(loss_d, &f_x, &f_y);

    let (g_x, g_y) = logistic_objective_grad(&f_x, &f_y);
    let df: Vec<f64> = g_x.iter().chain(g_y.iter()).copied().collect();
    let (mut d_phi, mut d_wbar, mut d_l) = head.readout_backward(&phi, &samples, &df);
    let pen_grad = penalty_grad_smini(s_mini, lambda, gamma);
    if pen_grad != 0.0 {
        let (sp, sw, sl) = gram.smini_backward(head, &phi, pen_grad);
        d_phi.add_assign(&sp);
        for (a, b) in d_wbar.iter_mut().zip(sw.iter()) {
            *a += b;
        }
        d_l.add_assign(&sl);
    }
    let net_grads = net.backward(&tape, &d_phi);

    Ok(RkhsStep {
        loss_d,
        penalty: pen.penalty,
        total: pen.total,
        f_x,
        f_y,
        s_mini,
        stats,
        mebub,
        gram,
        phi,
        grads: RkhsGrads {
            net: net_grads,
            w_bar: d_wbar,
            l: d_l,
        },
    })
}

/// Gradients for the feature net plus the deterministic readout.
#[derive(Clone, Debug)]
pub struct PlainGrads {
    pub net: NetGrads,
    pub weight: Vec<f64>,
    pub bias: f64,
}

/// One deterministic-readout minibatch evaluation.
#[derive(Clone, Debug)]
pub struct PlainStep {
    /// Loss the gradients descend: the logistic objective for `plain_nn`,
    /// the negated bound for the variational kinds.
    pub loss: f64,
    /// Bound value for the variational kinds.
    pub bound: Option<BoundValue>,
    pub f_x: Vec<f64>,
    pub f_y: Vec<f64>,
    /// Tightness check, present only under the logistic objective.
    pub mebub: Option<MebubCheck>,
    pub grads: PlainGrads,
}

/// Forward and backward pass for the deterministic-readout kinds. Exposed
/// for the same gradient-check purposes as [`rkhs_batch_step`].
pub fn plain_batch_step(
    net: &FeatureNet,
    readout: &LinearReadout,
    x: &Mat,
    y: &Mat,
    kind: EstimatorKind,
) -> Result<PlainStep> {
    if kind.uses_kernel_head() {
        return Err(Error::Config(format!(
            "plain step does not apply to estimator '{kind}'"
        )));
    }
    let bx = x.rows();
    let joint = x.vstack(y);
    let (phi, tape) = net.forward(&joint)?;
    let f = readout.forward(&phi);
    let f_x = f[..bx].to_vec();
    let f_y = f[bx..].to_vec();

    let (loss, bound, mebub, g_x, g_y) = match kind {
        EstimatorKind::PlainNn => {
            let loss = logistic_objective(&f_x, &f_y);
            let (g_x, g_y) = logistic_objective_grad(&f_x, &f_y);
            (loss, None, Some(mebub_check(loss, &f_x, &f_y)), g_x, g_y)
        }
        EstimatorKind::DvBaseline => {
            let bound = dv_objective(&f_x, &f_y);
            // Maximizing the bound = minimizing its negation.
            let (g_x, g_y) = dv_objective_grad(&f_x, &f_y);
            (-bound.value, Some(bound), None, negate(g_x), negate(g_y))
        }
        EstimatorKind::FganBaseline => {
            let bound = fgan_kl_objective(&f_x, &f_y);
            let (g_x, g_y) = fgan_kl_objective_grad(&f_x, &f_y);
            (-bound.value, Some(bound), None, negate(g_x), negate(g_y))
        }
        _ => unreachable!("kernel kinds rejected above"),
    };

    let df: Vec<f64> = g_x.iter().chain(g_y.iter()).copied().collect();
    let (d_phi, d_w, d_b) = readout.backward(&phi, &df);
    let net_grads = net.backward(&tape, &d_phi);

    Ok(PlainStep {
        loss,
        bound,
        f_x,
        f_y,
        mebub,
        grads: PlainGrads {
            net: net_grads,
            weight: d_w,
            bias: d_b,
        },
    })
}

fn negate(mut v: Vec<f64>) -> Vec<f64> {
    for x in &mut v {
        *x = -*x;
    }
    v
}

fn draw_eps<R: Rng>(d: usize, p: usize, rng: &mut R) -> Mat {
    let mut eps = Mat::zeros(d, p);
    for v in eps.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    eps
}

enum Head {
    Kernel(StochasticHead),
    Linear(LinearReadout),
}

struct Model {
    net: FeatureNet,
    head: Head,
}

impl Model {
    fn param_sizes(&self) -> Vec<usize> {
        let mut sizes = self.net.param_sizes();
        match &self.head {
            Head::Kernel(h) => {
                sizes.push(h.w_bar.len());
                sizes.push(h.l.rows() * h.l.cols());
            }
            Head::Linear(r) => {
                sizes.push(r.weight.len());
                sizes.push(r.bias.len());
            }
        }
        sizes
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut slices = self.net.param_slices_mut();
        match &mut self.head {
            Head::Kernel(h) => {
                slices.push(h.w_bar.as_mut_slice());
                slices.push(h.l.as_mut_slice());
            }
            Head::Linear(r) => {
                slices.push(r.weight.as_mut_slice());
                slices.push(r.bias.as_mut_slice());
            }
        }
        slices
    }
}

/// Best-loss tracking with patience. Strict improvements move the anchor;
/// once the current epoch is more than `flat_n` past it, training stops. If
/// the first epoch stays the best, patience counts from epoch 1.
#[derive(Clone, Debug)]
struct EarlyStop {
    flat_n: usize,
    best_loss: f64,
    best_epoch: usize,
    best_kl: f64,
}

impl EarlyStop {
    fn new(flat_n: usize) -> Self {
        EarlyStop {
            flat_n,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            best_kl: f64::NAN,
        }
    }

    /// Records one epoch; returns false when patience is exhausted.
    fn observe(&mut self, epoch: usize, loss: f64, kl: f64) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.best_kl = kl;
            true
        } else {
            epoch <= self.best_epoch + self.flat_n
        }
    }
}

/// Runs one full training run on a scenario and returns its report. The
/// sample mode in the config decides whether minibatches come from fixed
/// pools or fresh draws.
pub fn train_estimate(config: &TrainConfig, scenario: &Scenario) -> Result<RunReport> {
    config.validate()?;
    run_single(&config.normalized(), scenario)
}

/// [`train_estimate`] restricted to infinite-sample mode.
pub fn infinite_sample_driver(config: &TrainConfig, scenario: &Scenario) -> Result<RunReport> {
    if config.sample_mode != SampleMode::Infinite {
        return Err(Error::Config(
            "infinite_sample_driver requires sample_mode = infinite".into(),
        ));
    }
    train_estimate(config, scenario)
}

enum StepOut {
    Kernel(Box<RkhsStep>),
    Plain(PlainStep),
}

fn run_single(config: &TrainConfig, scenario: &Scenario) -> Result<RunReport> {
    let input_dim = scenario.p.dim();
    let mut data_rng = stream_rng(config.seed, STREAM_DATA);
    let mut init_rng = stream_rng(config.seed, STREAM_INIT);
    let mut train_rng = stream_rng(config.seed, STREAM_TRAIN);

    let net = FeatureNet::init(input_dim, config.hidden_dim, config.hidden_dim, &mut init_rng)?;
    let head = if config.estimator.uses_kernel_head() {
        Head::Kernel(StochasticHead::new_identity(net.feature_dim()))
    } else {
        Head::Linear(LinearReadout::init(net.feature_dim(), &mut init_rng))
    };
    let mut model = Model { net, head };
    let mut adam = Adam::new(config.lr, &model.param_sizes());

    let pools = match config.sample_mode {
        SampleMode::Finite => Some(scenario.sample_pools(config.m, &mut data_rng)),
        SampleMode::Infinite => None,
    };
    let n_batch = config.m / config.b;
    let tail_truncated = !config.m.is_multiple_of(config.b);

    let mut traces: Vec<EpochTrace> = Vec::new();
    let mut psd_spots: Vec<PsdSpot> = Vec::new();
    let mut stop = EarlyStop::new(config.flat_n);
    let mut stable = true;
    let mut instability: Option<String> = None;
    let mut f_abs_max = 0.0f64;
    let mut mebub_total = 0usize;
    let mut norm_total = 0usize;
    let mut s_mini_last: Option<f64> = None;

    'training: for epoch in 1..=config.iter_max {
        let batches: Vec<(Mat, Mat)> = match &pools {
            Some((xs, ys)) => {
                let idx_x = minibatch_indices(config.m, config.b, &mut data_rng)?;
                let idx_y = minibatch_indices(config.m, config.b, &mut data_rng)?;
                idx_x
                    .iter()
                    .zip(idx_y.iter())
                    .map(|(ix, iy)| (gather_rows(&xs.points, ix), gather_rows(&ys.points, iy)))
                    .collect()
            }
            None => (0..n_batch)
                .map(|_| {
                    (
                        scenario.p.sample(config.b, &mut data_rng),
                        scenario.q.sample(config.b, &mut data_rng),
                    )
                })
                .collect(),
        };

        let mut loss_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut s_mini_max: Option<f64> = None;
        let mut norm_sum_max: Option<f64> = None;
        let mut norm_diff_max: Option<f64> = None;
        let mut mebub_viol = 0usize;
        let mut norm_viol = 0usize;

        for (ib, (xb, yb)) in batches.iter().enumerate() {
            let out = match &model.head {
                Head::Kernel(head) => {
                    let eps = draw_eps(config.d, model.net.feature_dim(), &mut train_rng);
                    StepOut::Kernel(Box::new(rkhs_batch_step(
                        &model.net,
                        head,
                        xb,
                        yb,
                        &eps,
                        config.lambda,
                        config.gamma,
                    )?))
                }
                Head::Linear(readout) => StepOut::Plain(plain_batch_step(
                    &model.net,
                    readout,
                    xb,
                    yb,
                    config.estimator,
                )?),
            };

            // Stability gates come before any accounting so a diverging
            // minibatch contributes nothing to traces or running maxima.
            // The discriminator values get their own check because softplus
            // saturates to exactly 0 on an infinite argument, which can keep
            // the loss finite while `f` is not.
            let finite_f = |f_x: &[f64], f_y: &[f64]| {
                f_x.iter().chain(f_y.iter()).all(|v| v.is_finite())
            };
            let halt = match &out {
                StepOut::Kernel(step) if !step.total.is_finite() => Some(format!(
                    "non-finite loss at epoch {epoch}, minibatch {}",
                    ib + 1
                )),
                StepOut::Kernel(step) if !finite_f(&step.f_x, &step.f_y) => Some(format!(
                    "non-finite discriminator output at epoch {epoch}, minibatch {}",
                    ib + 1
                )),
                StepOut::Plain(step) => {
                    if let Some(b) = step.bound.filter(|b| b.diverged) {
                        Some(format!(
                            "bound diverged (value {:e}) at epoch {epoch}, minibatch {}",
                            b.value,
                            ib + 1
                        ))
                    } else if !step.loss.is_finite() {
                        Some(format!(
                            "non-finite loss at epoch {epoch}, minibatch {}",
                            ib + 1
                        ))
                    } else if !finite_f(&step.f_x, &step.f_y) {
                        Some(format!(
                            "non-finite discriminator output at epoch {epoch}, minibatch {}",
                            ib + 1
                        ))
                    } else {
                        None
                    }
                }
                _ => None,
            };
            if let Some(reason) = halt {
                stable = false;
                instability = Some(reason);
                break 'training;
            }

            match &out {
                StepOut::Kernel(step) => {
                    let head = match &model.head {
                        Head::Kernel(h) => h,
                        Head::Linear(_) => unreachable!(),
                    };
                    // KL readout with its own, larger draw count, on the
                    // same pre-update parameters the loss was measured on.
                    let eval = head.sample_weights_averaged(config.d_readout, &mut train_rng);
                    let f_eval: Vec<f64> = (0..xb.rows())
                        .map(|i| dot(step.phi.row(i), &eval.w_mean))
                        .collect();
                    loss_sum += step.loss_d;
                    kl_sum += config.kl_accumulator.apply(&f_eval);
                    for &v in step.f_x.iter().chain(step.f_y.iter()) {
                        f_abs_max = f_abs_max.max(v.abs());
                    }
                    if !step.mebub.satisfied {
                        mebub_viol += 1;
                    }
                    s_mini_last = Some(step.s_mini);
                    s_mini_max = Some(s_mini_max.map_or(step.s_mini, |m| m.max(step.s_mini)));
                    norm_sum_max =
                        Some(norm_sum_max.map_or(step.stats.norm_sum, |m| m.max(step.stats.norm_sum)));
                    norm_diff_max = Some(
                        norm_diff_max.map_or(step.stats.norm_diff, |m| m.max(step.stats.norm_diff)),
                    );
                    if step.stats.norm_sum > 2.0 * step.s_mini.max(0.0).sqrt() + BOUND_TOL {
                        norm_viol += 1;
                    }
                    if ib == 0 && (epoch <= 100 || epoch % 20 == 0) {
                        let (min_eig, max_eig) = symmetric_eigen_range(step.gram.entries());
                        psd_spots.push(PsdSpot {
                            epoch,
                            min_eig,
                            max_eig,
                        });
                    }
                }
                StepOut::Plain(step) => {
                    let kl_batch = match step.bound {
                        Some(b) => b.value,
                        None => config.kl_accumulator.apply(&step.f_x),
                    };
                    loss_sum += step.loss;
                    kl_sum += kl_batch;
                    for &v in step.f_x.iter().chain(step.f_y.iter()) {
                        f_abs_max = f_abs_max.max(v.abs());
                    }
                    if let Some(m) = step.mebub {
                        if !m.satisfied {
                            mebub_viol += 1;
                        }
                    }
                }
            }

            let stepped = match &out {
                StepOut::Kernel(step) => {
                    let mut grads = net_grad_slices(&step.grads.net);
                    grads.push(&step.grads.w_bar);
                    grads.push(step.grads.l.as_slice());
                    let mut params = model.param_slices_mut();
                    adam.step(&mut params, &grads)
                }
                StepOut::Plain(step) => {
                    let d_bias = [step.grads.bias];
                    let mut grads = net_grad_slices(&step.grads.net);
                    grads.push(&step.grads.weight);
                    grads.push(&d_bias);
                    let mut params = model.param_slices_mut();
                    adam.step(&mut params, &grads)
                }
            };
            if stepped.is_err() {
                stable = false;
                instability = Some(format!(
                    "non-finite gradient at epoch {epoch}, minibatch {}",
                    ib + 1
                ));
                break 'training;
            }
        }

        let n = n_batch as f64;
        let epoch_loss = loss_sum / n;
        let epoch_kl = kl_sum / n;
        mebub_total += mebub_viol;
        norm_total += norm_viol;
        traces.push(EpochTrace {
            epoch,
            loss: epoch_loss,
            kl_epoch: epoch_kl,
            s_mini_max,
            norm_sum_max,
            norm_diff_max,
            mebub_satisfied: mebub_viol == 0,
            mebub_violations: mebub_viol,
            norm_violations: norm_viol,
        });
        if !stop.observe(epoch, epoch_loss, epoch_kl) {
            break;
        }
    }

    Ok(RunReport {
        config: config.clone(),
        input_dim,
        kl_estimate: stop.best_kl,
        best_loss: stop.best_loss,
        best_epoch: stop.best_epoch,
        epochs_run: traces.len(),
        stable,
        instability,
        tail_truncated,
        f_abs_max,
        s_mini_final: s_mini_last,
        mebub_violations: config.estimator.uses_logistic_loss().then_some(mebub_total),
        norm_violations: config.estimator.uses_kernel_head().then_some(norm_total),
        traces,
        psd_spots,
    })
}

/// Mean and unbiased standard deviation. Empty input yields neither; a
/// single value yields std 0 by convention.
pub fn mean_std(vals: &[f64]) -> (Option<f64>, Option<f64>) {
    match vals.len() {
        0 => (None, None),
        1 => (Some(vals[0]), Some(0.0)),
        n => {
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            (Some(mean), Some(var.sqrt()))
        }
    }
}

/// Statistics over repeated runs of one configuration.
#[derive(Clone, Debug, Serialize)]
pub struct AggregateReport {
    /// Template config; per-run seeds are `base_seed + i`.
    pub config: TrainConfig,
    pub base_seed: u64,
    pub n_reps: usize,
    /// Estimates from stable runs, in seed order.
    pub estimates: Vec<f64>,
    /// Mean over stable runs; absent when every run was unstable.
    pub mean: Option<f64>,
    /// Unbiased std over stable runs; 0 when only one run was stable.
    pub std: Option<f64>,
    pub n_unstable: usize,
    pub reports: Vec<RunReport>,
}

impl AggregateReport {
    /// Aggregates already-computed run reports (in seed order) for the
    /// configuration that produced them.
    pub fn from_reports(config: &TrainConfig, base_seed: u64, reports: Vec<RunReport>) -> Self {
        let estimates: Vec<f64> = reports
            .iter()
            .filter(|r| r.stable)
            .map(|r| r.kl_estimate)
            .collect();
        let (mean, std) = mean_std(&estimates);
        let n_unstable = reports.len() - estimates.len();
        let mut config = config.normalized();
        config.seed = base_seed;
        AggregateReport {
            config,
            base_seed,
            n_reps: reports.len(),
            estimates,
            mean,
            std,
            n_unstable,
            reports,
        }
    }
}

/// Runs `n_reps` seeds of one configuration and aggregates the stable
/// estimates. Unstable runs are recorded, never fatal.
pub fn run_repetitions(
    config: &TrainConfig,
    n_reps: usize,
    base_seed: u64,
    scenario: &Scenario,
) -> Result<AggregateReport> {
    if n_reps == 0 {
        return Err(Error::Config("need at least one repetition".into()));
    }
    let mut reports = Vec::with_capacity(n_reps);
    for i in 0..n_reps {
        let mut c = config.clone();
        c.seed = base_seed + i as u64;
        reports.push(train_estimate(&c, scenario)?);
    }
    Ok(AggregateReport::from_reports(config, base_seed, reports))
}
