//! Feature network, gradients, and the Adam optimizer.
//!
//! The discriminators share one trunk: two fully connected layers, each
//! followed by a LeakyReLU, mapping an input point to a feature vector. The
//! backward pass is written by hand (no autodiff); every test in this module
//! and the workspace gradient-check suite exists to keep it honest against
//! central finite differences.
//!
//! Layout conventions follow the batch-major style: activations are
//! `(batch x dim)` matrices, layer weights are `(out x in)`.

use crate::linalg::{axpy, dot, Mat};
use crate::{Error, Result};
use rand::Rng;

/// Negative-side slope of the LeakyReLU activation.
pub const LEAKY_SLOPE: f64 = 0.01;

fn leaky(z: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

fn leaky_grad(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// One fully connected layer; `weight` is `(out x in)`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    /// Weights drawn uniformly from `[-1/sqrt(in), 1/sqrt(in)]`, biases zero.
    pub fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let limit = 1.0 / (in_dim as f64).sqrt();
        let mut weight = Mat::zeros(out_dim, in_dim);
        for v in weight.as_mut_slice() {
            *v = rng.gen_range(-limit..=limit);
        }
        DenseLayer {
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Two-layer LeakyReLU feature map `x -> phi(x)`.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub layers: Vec<DenseLayer>,
    input_dim: usize,
    feature_dim: usize,
}

/// Intermediate activations recorded by [`FeatureNet::forward`] for the
/// backward pass.
pub struct Tape {
    /// Input to each layer (post-activation of the previous one).
    layer_inputs: Vec<Mat>,
    /// Pre-activation output of each layer.
    pre_acts: Vec<Mat>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.layer_inputs[0].rows()
    }
}

/// Parameter-shaped gradients produced by [`FeatureNet::backward`].
#[derive(Clone, Debug)]
pub struct NetGrads {
    pub d_weights: Vec<Mat>,
    pub d_biases: Vec<Vec<f64>>,
}

impl NetGrads {
    pub fn zeros_like(net: &FeatureNet) -> Self {
        NetGrads {
            d_weights: net
                .layers
                .iter()
                .map(|l| Mat::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            d_biases: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.d_weights.iter_mut().zip(other.d_weights.iter()) {
            a.add_assign(b);
        }
        for (a, b) in self.d_biases.iter_mut().zip(other.d_biases.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }
}

impl FeatureNet {
    /// Fresh net with layer shapes `(hidden x input)` and
    /// `(feature x hidden)`.
    pub fn init<R: Rng>(
        input_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || feature_dim == 0 {
            return Err(Error::Config("feature net dims must be positive".into()));
        }
        Ok(FeatureNet {
            layers: vec![
                DenseLayer::init(hidden_dim, input_dim, rng),
                DenseLayer::init(feature_dim, hidden_dim, rng),
            ],
            input_dim,
            feature_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Maps a `(batch x input)` matrix to `(batch x feature)` activations,
    /// recording the tape needed by [`FeatureNet::backward`].
    pub fn forward(&self, x: &Mat) -> Result<(Mat, Tape)> {
        if x.cols() != self.input_dim {
            return Err(Error::Input(format!(
                "expected input dim {}, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(Error::Input("non-finite input point".into()));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = h.matmul_nt(&layer.weight);
            for i in 0..z.rows() {
                let row = z.row_mut(i);
                for (v, b) in row.iter_mut().zip(layer.bias.iter()) {
                    *v += *b;
                }
            }
            layer_inputs.push(h);
            let mut act = z.clone();
            for v in act.as_mut_slice() {
                *v = leaky(*v);
            }
            pre_acts.push(z);
            h = act;
        }
        Ok((
            h,
            Tape {
                layer_inputs,
                pre_acts,
            },
        ))
    }

    /// Backpropagates `d_features` (same shape as the forward output) through
    /// the tape, returning parameter gradients summed over the batch.
    pub fn backward(&self, tape: &Tape, d_features: &Mat) -> NetGrads {
        assert_eq!(
            tape.layer_inputs.len(),
            self.layers.len(),
            "tape does not match this net"
        );
        let last = self.layers.len() - 1;
        assert_eq!(
            d_features.rows(),
            tape.pre_acts[last].rows(),
            "seed gradient batch size does not match tape"
        );
        assert_eq!(
            d_features.cols(),
            self.feature_dim,
            "seed gradient width does not match feature dim"
        );

        let mut d_weights = vec![Mat::zeros(0, 0); self.layers.len()];
        let mut d_biases = vec![Vec::new(); self.layers.len()];
        let mut d_h = d_features.clone();
        for idx in (0..self.layers.len()).rev() {
            let z = &tape.pre_acts[idx];
            let mut d_z = d_h;
            for (g, &pre) in d_z.as_mut_slice().iter_mut().zip(z.as_slice().iter()) {
                *g *= leaky_grad(pre);
            }
            d_weights[idx] = d_z.matmul_tn(&tape.layer_inputs[idx]);
            let mut db = vec![0.0; self.layers[idx].out_dim()];
            for i in 0..d_z.rows() {
                for (b, &g) in db.iter_mut().zip(d_z.row(i).iter()) {
                    *b += g;
                }
            }
            d_biases[idx] = db;
            d_h = d_z.matmul_nn(&self.layers[idx].weight);
        }
        NetGrads {
            d_weights,
            d_biases,
        }
    }

    /// Mutable flat views of every parameter tensor, in a fixed order
    /// (weight then bias, layer by layer). The optimizer and the
    /// finite-difference harness both rely on this ordering.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    /// Sizes of the tensors returned by [`FeatureNet::param_slices_mut`].
    pub fn param_sizes(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.out_dim() * l.in_dim());
            out.push(l.out_dim());
        }
        out
    }
}

/// Gradient views matching [`FeatureNet::param_slices_mut`] order.
pub fn net_grad_slices(grads: &NetGrads) -> Vec<&[f64]> {
    let mut out = Vec::with_capacity(grads.d_weights.len() * 2);
    for (w, b) in grads.d_weights.iter().zip(grads.d_biases.iter()) {
        out.push(w.as_slice());
        out.push(b.as_slice());
    }
    out
}

/// Deterministic scalar readout `f(x) = w . phi(x) + c` used by the plain-NN
/// and variational baselines.
///
/// The bias lives in a one-element vector so the optimizer can treat every
/// parameter tensor as a flat slice.
#[derive(Clone, Debug)]
pub struct LinearReadout {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearReadout {
    pub fn init<R: Rng>(feature_dim: usize, rng: &mut R) -> Self {
        let limit = 1.0 / (feature_dim as f64).sqrt();
        LinearReadout {
            weight: (0..feature_dim).map(|_| rng.gen_range(-limit..=limit)).collect(),
            bias: vec![0.0],
        }
    }

    pub fn forward(&self, phi: &Mat) -> Vec<f64> {
        assert_eq!(phi.cols(), self.weight.len(), "feature width mismatch");
        (0..phi.rows())
            .map(|i| dot(phi.row(i), &self.weight) + self.bias[0])
            .collect()
    }

    /// Backward pass; returns (d_phi, d_weight, d_bias) for upstream `df`.
    pub fn backward(&self, phi: &Mat, df: &[f64]) -> (Mat, Vec<f64>, f64) {
        assert_eq!(df.len(), phi.rows(), "upstream gradient length mismatch");
        let mut d_phi = Mat::zeros(phi.rows(), phi.cols());
        let mut d_w = vec![0.0; self.weight.len()];
        let mut d_b = 0.0;
        for (i, &dfi) in df.iter().enumerate() {
            axpy(dfi, &self.weight, d_phi.row_mut(i));
            axpy(dfi, phi.row(i), &mut d_w);
            d_b += dfi;
        }
        (d_phi, d_w, d_b)
    }
}

/// Returned by [`Adam::step`] when a gradient contains a non-finite value;
/// the parameters are left untouched and the trainer marks the run unstable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NonFiniteGrad;

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Standard defaults: `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(lr: f64, slot_sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: slot_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: slot_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// Applies one update in place. `params` and `grads` must match the slot
    /// sizes given at construction, in the same order. If any gradient entry
    /// is non-finite no parameter moves.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
    ) -> std::result::Result<(), NonFiniteGrad> {
        assert_eq!(params.len(), self.m.len(), "slot count mismatch");
        assert_eq!(grads.len(), self.m.len(), "slot count mismatch");
        for (slot, g) in grads.iter().enumerate() {
            assert_eq!(g.len(), self.m[slot].len(), "slot size mismatch");
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NonFiniteGrad);
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a}");
    }

    #[test]
    fn init_shapes_match_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = FeatureNet::init(2, 25, 25, &mut rng).unwrap();
        assert_eq!((net.layers[0].out_dim(), net.layers[0].in_dim()), (25, 2));
        assert_eq!((net.layers[1].out_dim(), net.layers[1].in_dim()), (25, 25));
        assert!(net.layers.iter().all(|l| l.weight.is_finite()));
        assert!(net.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = FeatureNet::init(3, 8, 5, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = FeatureNet::init(3, 8, 5, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let c = FeatureNet::init(3, 8, 5, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
        assert_eq!(a.layers[0].weight, b.layers[0].weight);
        assert_ne!(a.layers[0].weight, c.layers[0].weight);
    }

    #[test]
    fn init_scale_respects_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = FeatureNet::init(16, 16, 16, &mut rng).unwrap();
        let limit = 1.0 / 4.0;
        for l in &net.layers {
            for &w in l.weight.as_slice() {
                assert!(w.abs() <= limit);
            }
        }
    }

    #[test]
    fn zero_input_maps_to_zero_features() {
        // Biases start at zero and leaky(0) = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = FeatureNet::init(2, 1, 1, &mut rng).unwrap();
        let (phi, _) = net.forward(&Mat::zeros(3, 2)).unwrap();
        assert!(phi.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_applies_leaky_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = FeatureNet::init(2, 2, 2, &mut rng).unwrap();
        // First layer = identity, second layer = identity, biases zero: the
        // net computes leaky(leaky(x)) entrywise, so a negative input picks
        // up the slope twice.
        for l in &mut net.layers {
            for v in l.weight.as_mut_slice() {
                *v = 0.0;
            }
            l.weight.set(0, 0, 1.0);
            l.weight.set(1, 1, 1.0);
        }
        let x = Mat::from_rows(&[vec![2.0, -1.0]]);
        let (phi, _) = net.forward(&x).unwrap();
        assert_eq!(phi.row(0), &[2.0, -LEAKY_SLOPE * LEAKY_SLOPE]);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = FeatureNet::init(2, 4, 4, &mut rng).unwrap();
        assert!(net.forward(&Mat::zeros(1, 3)).is_err());
        let bad = Mat::from_rows(&[vec![1.0, f64::NAN]]);
        assert!(net.forward(&bad).is_err());
    }

    #[test]
    fn forward_batch_shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = FeatureNet::init(2, 10, 7, &mut rng).unwrap();
        let mut x = Mat::zeros(50, 2);
        for (i, v) in x.as_mut_slice().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let (phi, _) = net.forward(&x).unwrap();
        assert_eq!((phi.rows(), phi.cols()), (50, 7));
        assert!(phi.is_finite());
    }

    #[test]
    fn backward_zero_seed_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = FeatureNet::init(2, 4, 3, &mut rng).unwrap();
        let x = Mat::from_rows(&[vec![0.5, -0.3], vec![1.0, 2.0]]);
        let (_, tape) = net.forward(&x).unwrap();
        let grads = net.backward(&tape, &Mat::zeros(2, 3));
        for w in &grads.d_weights {
            assert!(w.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_single_identity_layer_sums_inputs() {
        // One-layer net with identity weight on positive inputs: with seed
        // gradient all ones, dW = sum over batch of outer(1, x).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = FeatureNet::init(2, 2, 2, &mut rng).unwrap();
        net.layers.truncate(1);
        for v in net.layers[0].weight.as_mut_slice() {
            *v = 0.0;
        }
        net.layers[0].weight.set(0, 0, 1.0);
        net.layers[0].weight.set(1, 1, 1.0);
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let (_, tape) = net.forward(&x).unwrap();
        let seed = Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let grads = net.backward(&tape, &seed);
        assert_eq!(grads.d_weights[0].as_slice(), &[4.0, 6.0, 4.0, 6.0]);
        assert_eq!(grads.d_biases[0], vec![2.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "seed gradient batch size")]
    fn backward_rejects_mismatched_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = FeatureNet::init(2, 4, 3, &mut rng).unwrap();
        let (_, tape) = net.forward(&Mat::zeros(2, 2)).unwrap();
        let _ = net.backward(&tape, &Mat::zeros(5, 3));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut net = FeatureNet::init(2, 5, 4, &mut rng).unwrap();
        let x = {
            let mut m = Mat::zeros(3, 2);
            for v in m.as_mut_slice() {
                *v = rng.gen_range(-1.5..1.5);
            }
            m
        };
        // Random fixed linear functional of the features as the scalar loss.
        let mut seed = Mat::zeros(3, 4);
        for v in seed.as_mut_slice() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let loss = |net: &FeatureNet| -> f64 {
            let (phi, _) = net.forward(&x).unwrap();
            phi.as_slice()
                .iter()
                .zip(seed.as_slice().iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, tape) = net.forward(&x).unwrap();
        let grads = net.backward(&tape, &seed);
        let analytic: Vec<f64> = net_grad_slices(&grads)
            .iter()
            .flat_map(|s| s.iter().cloned())
            .collect();

        let h = 1e-5;
        let mut numeric = Vec::new();
        let n_slots = net.param_sizes().len();
        for slot in 0..n_slots {
            for i in 0..net.param_sizes()[slot] {
                let orig = net.param_slices_mut()[slot][i];
                net.param_slices_mut()[slot][i] = orig + h;
                let up = loss(&net);
                net.param_slices_mut()[slot][i] = orig - h;
                let dn = loss(&net);
                net.param_slices_mut()[slot][i] = orig;
                numeric.push((up - dn) / (2.0 * h));
            }
        }
        assert_eq!(analytic.len(), numeric.len());
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let scale = a.abs().max(n.abs()).max(1e-6);
            assert!(
                (a - n).abs() / scale < 1e-4,
                "analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn linear_readout_forward_and_backward() {
        let head = LinearReadout {
            weight: vec![2.0, -1.0],
            bias: vec![0.5],
        };
        let phi = Mat::from_rows(&[vec![1.0, 1.0], vec![0.0, 3.0]]);
        assert_eq!(head.forward(&phi), vec![1.5, -2.5]);
        let (d_phi, d_w, d_b) = head.backward(&phi, &[1.0, -2.0]);
        assert_eq!(d_phi.row(0), &[2.0, -1.0]);
        assert_eq!(d_phi.row(1), &[-4.0, 2.0]);
        assert_eq!(d_w, vec![1.0, -5.0]);
        assert_eq!(d_b, -1.0);
    }

    #[test]
    fn adam_first_step_is_bias_corrected_lr() {
        // param 0, grad 1: m_hat = 1, v_hat = 1, so the step is
        // lr / (1 + eps) regardless of the raw moment scales.
        let mut opt = Adam::new(5e-3, &[1]);
        let mut p = vec![0.0];
        let g = vec![1.0];
        let expected = -5e-3 / (1.0 + 1e-8);
        opt.step(&mut [p.as_mut_slice()], &[g.as_slice()]).unwrap();
        assert_close(p[0], expected, 1e-15);
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut opt = Adam::new(5e-3, &[2]);
        let mut p = vec![1.25, -0.5];
        let g = vec![0.0, 0.0];
        opt.step(&mut [p.as_mut_slice()], &[g.as_slice()]).unwrap();
        assert_eq!(p, vec![1.25, -0.5]);
    }

    #[test]
    fn adam_rejects_non_finite_grads_without_moving() {
        let mut opt = Adam::new(5e-3, &[2]);
        let mut p = vec![1.0, 2.0];
        let g = vec![f64::NAN, 0.0];
        let err = opt.step(&mut [p.as_mut_slice()], &[g.as_slice()]);
        assert_eq!(err, Err(NonFiniteGrad));
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut opt = Adam::new(1e-2, &[3]);
            let mut p = vec![0.1, -0.2, 0.3];
            for k in 0..25 {
                let g: Vec<f64> = p.iter().map(|v| v * 2.0 + k as f64 * 0.01).collect();
                opt.step(&mut [p.as_mut_slice()], &[g.as_slice()]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut opt = Adam::new(5e-2, &[1]);
        let mut p = vec![3.0];
        for _ in 0..400 {
            let g = vec![2.0 * p[0]];
            opt.step(&mut [p.as_mut_slice()], &[g.as_slice()]).unwrap();
        }
        assert!(p[0].abs() < 0.05, "got {}", p[0]);
    }
}
