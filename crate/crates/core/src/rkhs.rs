//! Stochastic final layer, induced kernel, and minibatch Gram machinery.
//!
//! The discriminator's last layer is a Gaussian-distributed weight vector
//! `w ~ N(w_bar, L L^T)` over the feature map `phi`. Evaluating the
//! discriminator draws `d` weights by the reparameterization `w_j = w_bar +
//! L eps_j` and averages the readouts, which collapses to a single dot
//! product with the averaged weight. The same parameters induce the kernel
//!
//! ```text
//! K(x, t) = (phi(x) . w_bar)(phi(t) . w_bar) + (L^T phi(x)) . (L^T phi(t))
//! ```
//!
//! computed in factored form so Gram matrices are symmetric positive
//! semidefinite by construction. The largest Gram entry over a joint
//! minibatch (`s_mini`) is the batch proxy for the kernel's sup, and the
//! penalty gradient flows through exactly that entry.
//!
//! `L` is lower triangular; the strict upper triangle stays zero through
//! initialization and masked gradients altogether.

use crate::linalg::{axpy, dot, Mat};
use rand::Rng;
use rand_distr::StandardNormal;

/// Gaussian final layer `w ~ N(w_bar, L L^T)` over a `p`-dimensional feature
/// map.
#[derive(Clone, Debug)]
pub struct StochasticHead {
    pub w_bar: Vec<f64>,
    /// Lower-triangular covariance factor, `(p x p)`.
    pub l: Mat,
}

/// A batch of reparameterized weight draws plus the averages the readout and
/// its gradient need.
#[derive(Clone, Debug)]
pub struct WeightSamples {
    /// `(d x p)`, row `j` is `w_j = w_bar + L eps_j`. Present only when the
    /// draws were materialized; the readout and its gradient need just the
    /// averages below.
    pub vectors: Option<Mat>,
    /// Mean of the raw `eps` draws.
    pub eps_mean: Vec<f64>,
    /// `w_bar + L eps_mean`, the effective readout weight.
    pub w_mean: Vec<f64>,
}

impl StochasticHead {
    /// Start-of-training head: `w_bar = 0`, `L = I` (unit covariance).
    pub fn new_identity(p: usize) -> Self {
        assert!(p > 0, "feature dim must be positive");
        let mut l = Mat::zeros(p, p);
        for i in 0..p {
            l.set(i, i, 1.0);
        }
        StochasticHead {
            w_bar: vec![0.0; p],
            l,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_bar.len()
    }

    /// Builds weight samples from externally supplied standard-normal draws
    /// (`eps` is `(d x p)`). Split out from [`StochasticHead::sample_weights`]
    /// so finite-difference checks can hold the noise fixed while parameters
    /// move.
    pub fn samples_from_eps(&self, eps: &Mat) -> WeightSamples {
        let p = self.dim();
        assert_eq!(eps.cols(), p, "eps width must match head dim");
        assert!(eps.rows() > 0, "need at least one weight sample");
        let d = eps.rows();
        let mut vectors = Mat::zeros(d, p);
        let mut eps_mean = vec![0.0; p];
        for j in 0..d {
            let le = self.l.matvec(eps.row(j));
            let row = vectors.row_mut(j);
            for i in 0..p {
                row[i] = self.w_bar[i] + le[i];
            }
            axpy(1.0 / d as f64, eps.row(j), &mut eps_mean);
        }
        let le = self.l.matvec(&eps_mean);
        let w_mean = (0..p).map(|i| self.w_bar[i] + le[i]).collect();
        WeightSamples {
            vectors: Some(vectors),
            eps_mean,
            w_mean,
        }
    }

    /// Draws `d` weights `w_j = w_bar + L eps_j` with fresh standard-normal
    /// `eps_j`, materializing every vector.
    pub fn sample_weights<R: Rng>(&self, d: usize, rng: &mut R) -> WeightSamples {
        assert!(d > 0, "need at least one weight sample");
        let p = self.dim();
        let mut eps = Mat::zeros(d, p);
        for v in eps.as_mut_slice() {
            *v = rng.sample(StandardNormal);
        }
        self.samples_from_eps(&eps)
    }

    /// Draws `d` weights but keeps only the averages. The readout is linear
    /// in the weight, so this is the whole of what evaluation and training
    /// need; it consumes the same `d * p` normal draws as
    /// [`StochasticHead::sample_weights`] and produces bit-identical means.
    pub fn sample_weights_averaged<R: Rng>(&self, d: usize, rng: &mut R) -> WeightSamples {
        assert!(d > 0, "need at least one weight sample");
        let p = self.dim();
        let mut eps_mean = vec![0.0; p];
        let mut row = vec![0.0; p];
        for _ in 0..d {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            axpy(1.0 / d as f64, &row, &mut eps_mean);
        }
        let le = self.l.matvec(&eps_mean);
        let w_mean = (0..p).map(|i| self.w_bar[i] + le[i]).collect();
        WeightSamples {
            vectors: None,
            eps_mean,
            w_mean,
        }
    }

    /// Discriminator values on a feature batch: the average over the `d`
    /// sampled readouts, evaluated as `phi . w_mean`.
    pub fn readout(&self, phi: &Mat, samples: &WeightSamples) -> Vec<f64> {
        assert_eq!(phi.cols(), self.dim(), "feature width mismatch");
        phi.matvec(&samples.w_mean)
    }

    /// Backward pass of [`StochasticHead::readout`] for upstream gradient
    /// `df` (one entry per batch row). Returns `(d_phi, d_w_bar, d_l)`; the
    /// `L` gradient is already masked to the lower triangle.
    pub fn readout_backward(
        &self,
        phi: &Mat,
        samples: &WeightSamples,
        df: &[f64],
    ) -> (Mat, Vec<f64>, Mat) {
        let p = self.dim();
        assert_eq!(df.len(), phi.rows(), "upstream gradient length mismatch");
        let mut d_phi = Mat::zeros(phi.rows(), p);
        let mut d_wbar = vec![0.0; p];
        for (i, &dfi) in df.iter().enumerate() {
            axpy(dfi, &samples.w_mean, d_phi.row_mut(i));
            axpy(dfi, phi.row(i), &mut d_wbar);
        }
        // f_i = phi_i . (w_bar + L eps_mean), so dL = (sum_i df_i phi_i) eps_mean^T.
        let mut d_l = Mat::zeros(p, p);
        for (a, &dwa) in d_wbar.iter().enumerate() {
            for b in 0..=a {
                d_l.set(a, b, dwa * samples.eps_mean[b]);
            }
        }
        (d_phi, d_wbar, d_l)
    }

    /// Kernel value `(phi_x . w_bar)(phi_t . w_bar) + (L^T phi_x).(L^T phi_t)`.
    ///
    /// Algebraically equal to `phi_x^T (w_bar w_bar^T + L L^T) phi_t` but
    /// costs O(p^2) and is symmetric in its arguments exactly.
    pub fn kernel_value(&self, phi_x: &[f64], phi_t: &[f64]) -> f64 {
        let p = self.dim();
        assert_eq!(phi_x.len(), p, "feature width mismatch");
        assert_eq!(phi_t.len(), p, "feature width mismatch");
        let ax = dot(phi_x, &self.w_bar);
        let at = dot(phi_t, &self.w_bar);
        let bx = self.l.tr_matvec(phi_x);
        let bt = self.l.tr_matvec(phi_t);
        ax * at + dot(&bx, &bt)
    }

    /// Gram matrix of the kernel over a joint feature batch. `split` is the
    /// number of leading rows that came from the numerator distribution.
    pub fn gram(&self, phi: &Mat, split: usize) -> MinibatchGram {
        assert_eq!(phi.cols(), self.dim(), "feature width mismatch");
        assert!(split <= phi.rows(), "split beyond batch");
        let a = phi.matvec(&self.w_bar);
        let b = phi.matmul_nn(&self.l);
        let n = phi.rows();
        let mut entries = Mat::zeros(n, n);
        for i in 0..n {
            let bi = b.row(i);
            let row = entries.row_mut(i);
            for j in 0..n {
                row[j] = a[i] * a[j] + dot(bi, b.row(j));
            }
        }
        // Row-major scan with strict > keeps the lowest (row, col) on ties.
        let (mut arg, mut best) = ((0, 0), entries.get(0, 0));
        for i in 0..n {
            for j in 0..n {
                let v = entries.get(i, j);
                if v > best {
                    best = v;
                    arg = (i, j);
                }
            }
        }
        MinibatchGram {
            entries,
            split,
            argmax: arg,
            a,
            b,
        }
    }
}

/// Kernel Gram matrix over one joint minibatch, with the factored pieces
/// retained for the penalty gradient.
#[derive(Clone, Debug)]
pub struct MinibatchGram {
    entries: Mat,
    split: usize,
    argmax: (usize, usize),
    /// `phi w_bar` per row.
    a: Vec<f64>,
    /// `phi L` per row (`row i` holds `L^T phi_i`).
    b: Mat,
}

impl MinibatchGram {
    pub fn entries(&self) -> &Mat {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn split(&self) -> usize {
        self.split
    }

    /// Largest entry; nonnegative because the diagonal is.
    pub fn s_mini(&self) -> f64 {
        let (r, c) = self.argmax;
        self.entries.get(r, c)
    }

    /// Index of the largest entry (lowest `(row, col)` on ties).
    pub fn argmax(&self) -> (usize, usize) {
        self.argmax
    }

    /// Gradient of `s_mini` with respect to the joint features, `w_bar`, and
    /// `L`, scaled by `upstream`. Only the argmax entry carries gradient; all
    /// other entries are flat directions of the max.
    pub fn smini_backward(&self, head: &StochasticHead, phi: &Mat, upstream: f64) -> (Mat, Vec<f64>, Mat) {
        let p = head.dim();
        let (r, c) = self.argmax;
        let mut d_phi = Mat::zeros(phi.rows(), p);
        let mut d_wbar = vec![0.0; p];
        let mut d_l = Mat::zeros(p, p);

        // K(r, c) = (phi_r . w_bar)(phi_c . w_bar) + (L^T phi_r).(L^T phi_c)
        // d/d phi_r = a_c w_bar + L (L^T phi_c), symmetrically for phi_c.
        let m_phi = |other: usize| -> Vec<f64> {
            let mut v = head.l.matvec(self.b.row(other));
            axpy(self.a[other], &head.w_bar, &mut v);
            v
        };
        axpy(upstream, &m_phi(c), d_phi.row_mut(r));
        axpy(upstream, &m_phi(r), d_phi.row_mut(c));

        axpy(upstream * self.a[c], phi.row(r), &mut d_wbar);
        axpy(upstream * self.a[r], phi.row(c), &mut d_wbar);

        for i in 0..p {
            for j in 0..=i {
                let g = phi.get(r, i) * self.b.get(c, j) + phi.get(c, i) * self.b.get(r, j);
                d_l.add_at(i, j, upstream * g);
            }
        }
        (d_phi, d_wbar, d_l)
    }

    /// Sums of the numerator/numerator, numerator/denominator, and
    /// denominator/denominator blocks.
    pub fn block_sums(&self) -> (f64, f64, f64) {
        let n = self.size();
        let s = self.split;
        let (mut pp, mut pq, mut qq) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let v = self.entries.get(i, j);
                match (i < s, j < s) {
                    (true, true) => pp += v,
                    (false, false) => qq += v,
                    (true, false) => pq += v,
                    // Symmetric block, counted once via the (p, q) side.
                    (false, true) => {}
                }
            }
        }
        // entries is symmetric so the (q, p) block sum equals the (p, q) one.
        (pp, pq, qq)
    }
}

/// Batch-level embedding statistics for one minibatch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingStats {
    /// `<mu_p, f>` approximated by the mean of `f` on the numerator batch.
    pub inner_p: f64,
    /// `<mu_q, f>` approximated by the mean of `f` on the denominator batch.
    pub inner_q: f64,
    /// `|| mu_p - mu_q ||` from Gram block sums.
    pub norm_diff: f64,
    /// `|| mu_p + mu_q ||` from Gram block sums; bounded by `2 sqrt(s_mini)`.
    pub norm_sum: f64,
}

/// Computes embedding inner products from the `f` values and embedding norms
/// from the Gram blocks of the same minibatch.
pub fn embedding_stats(f_x: &[f64], f_y: &[f64], gram: &MinibatchGram) -> EmbeddingStats {
    assert_eq!(f_x.len(), gram.split(), "numerator batch size mismatch");
    assert_eq!(
        f_y.len(),
        gram.size() - gram.split(),
        "denominator batch size mismatch"
    );
    let bx = f_x.len() as f64;
    let by = f_y.len() as f64;
    let (pp, pq, qq) = gram.block_sums();
    let sum_sq = pp / (bx * bx) + 2.0 * pq / (bx * by) + qq / (by * by);
    let diff_sq = pp / (bx * bx) - 2.0 * pq / (bx * by) + qq / (by * by);
    EmbeddingStats {
        inner_p: f_x.iter().sum::<f64>() / bx,
        inner_q: f_y.iter().sum::<f64>() / by,
        // Tiny negative values are roundoff from the block sums.
        norm_diff: diff_sq.max(0.0).sqrt(),
        norm_sum: sum_sq.max(0.0).sqrt(),
    }
}
