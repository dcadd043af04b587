//! Gaussian scenarios, sampling, and minibatch scheduling.
//!
//! Benchmarks run on pairs of multivariate Gaussians because the KL
//! divergence between them is available in closed form, giving every
//! estimate a ground truth. A scenario with a target KL of `t` places the
//! numerator at the origin and shifts the denominator by `sqrt(2 t)` along
//! the first axis, both with identity covariance.

use crate::linalg::Mat;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

/// Relative pivot tolerance of the covariance factorization; diagonal pivots
/// within this of zero are treated as exactly semidefinite directions.
const CHOL_PIVOT_TOL: f64 = 1e-12;

/// A multivariate Gaussian with a precomputed lower-triangular sampling
/// factor (`cov = factor factor^T`).
#[derive(Clone, Debug)]
pub struct GaussianSpec {
    mean: Vec<f64>,
    cov: Mat,
    factor: Mat,
}

/// Which side of the divergence a sample pool came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Numerator distribution `p`.
    P,
    /// Denominator distribution `q`.
    Q,
}

/// A pool of points drawn from one distribution.
#[derive(Clone, Debug)]
pub struct SampleSet {
    /// `(count x dim)` points, one per row.
    pub points: Mat,
    pub provenance: Provenance,
}

/// Lower-triangular factorization of a symmetric PSD matrix. Semidefinite
/// directions (pivots within tolerance of zero) get zero columns, so exactly
/// singular covariances factor exactly; genuinely negative pivots are domain
/// errors.
fn psd_cholesky(cov: &Mat) -> Result<Mat> {
    let n = cov.rows();
    let scale = (0..n).map(|i| cov.get(i, i).abs()).fold(1.0f64, f64::max);
    let tol = CHOL_PIVOT_TOL * scale;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = cov.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d < -tol {
            return Err(Error::Domain(format!(
                "covariance is not positive semidefinite (pivot {d:.3e} at {j})"
            )));
        }
        if d <= tol {
            // Semidefinite direction: the whole column must vanish.
            for i in j..n {
                let mut off = cov.get(i, j);
                for k in 0..j {
                    off -= l.get(i, k) * l.get(j, k);
                }
                if off.abs() > tol.sqrt() * scale.max(1.0) {
                    return Err(Error::Domain(
                        "covariance is not positive semidefinite (rank defect)".into(),
                    ));
                }
            }
            continue;
        }
        let piv = d.sqrt();
        l.set(j, j, piv);
        for i in (j + 1)..n {
            let mut off = cov.get(i, j);
            for k in 0..j {
                off -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, off / piv);
        }
    }
    Ok(l)
}

impl GaussianSpec {
    /// Validates symmetry and positive semidefiniteness, then stores the
    /// sampling factor.
    pub fn new(mean: Vec<f64>, cov_rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::Input("mean must be non-empty".into()));
        }
        if cov_rows.len() != n || cov_rows.iter().any(|r| r.len() != n) {
            return Err(Error::Input(format!(
                "covariance must be {n} x {n} to match the mean"
            )));
        }
        if mean.iter().any(|v| !v.is_finite())
            || cov_rows.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::Input("non-finite distribution parameters".into()));
        }
        let cov = Mat::from_rows(&cov_rows);
        for i in 0..n {
            for j in 0..i {
                if (cov.get(i, j) - cov.get(j, i)).abs() > 1e-12 * cov.get(i, i).abs().max(1.0) {
                    return Err(Error::Input("covariance must be symmetric".into()));
                }
            }
        }
        let factor = psd_cholesky(&cov)?;
        Ok(GaussianSpec { mean, cov, factor })
    }

    /// Isotropic Gaussian `N(mean, I)`.
    pub fn isotropic(mean: Vec<f64>) -> Self {
        let n = mean.len();
        let mut cov = vec![vec![0.0; n]; n];
        for (i, row) in cov.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        GaussianSpec::new(mean, cov).expect("identity covariance is always valid")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Mat {
        &self.cov
    }

    /// Lower-triangular factor used for sampling.
    pub fn factor(&self) -> &Mat {
        &self.factor
    }

    /// Draws `count` points as rows of a matrix: `x = mean + factor z`,
    /// `z ~ N(0, I)`.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Mat {
        let n = self.dim();
        let mut out = Mat::zeros(count, n);
        let mut z = vec![0.0; n];
        for i in 0..count {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let fz = self.factor.matvec(&z);
            let row = out.row_mut(i);
            for j in 0..n {
                row[j] = self.mean[j] + fz[j];
            }
        }
        out
    }

    /// Draws a tagged pool.
    pub fn sample_set<R: Rng>(&self, count: usize, rng: &mut R, provenance: Provenance) -> SampleSet {
        SampleSet {
            points: self.sample(count, rng),
            provenance,
        }
    }
}

/// Closed-form KL divergence between Gaussians,
/// `0.5 [tr(Sq^-1 Sp) + (mq - mp)^T Sq^-1 (mq - mp) - n + ln(det Sq / det Sp)]`.
///
/// Errors if dimensions differ or either covariance is singular (the
/// divergence is infinite or undefined there).
pub fn analytic_gaussian_kl(p: &GaussianSpec, q: &GaussianSpec) -> Result<f64> {
    let n = p.dim();
    if q.dim() != n {
        return Err(Error::Input(format!(
            "dimension mismatch: p is {n}, q is {}",
            q.dim()
        )));
    }
    let to_na = |m: &Mat| nalgebra::DMatrix::from_fn(n, n, |i, j| m.get(i, j));
    let sp = to_na(p.cov());
    let sq = to_na(q.cov());
    let det_p = sp.determinant();
    let det_q = sq.determinant();
    if det_p <= 0.0 || det_q <= 0.0 {
        return Err(Error::Domain(
            "KL between Gaussians needs nonsingular covariances".into(),
        ));
    }
    let sq_inv = sq
        .try_inverse()
        .ok_or_else(|| Error::Domain("denominator covariance is not invertible".into()))?;
    let trace = (&sq_inv * &sp).trace();
    let diff = nalgebra::DVector::from_fn(n, |i, _| q.mean()[i] - p.mean()[i]);
    let quad = (diff.transpose() * &sq_inv * &diff)[(0, 0)];
    Ok(0.5 * (trace + quad - n as f64 + (det_q / det_p).ln()))
}

/// A benchmark scenario: the two distributions plus their exact divergence.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub p: GaussianSpec,
    pub q: GaussianSpec,
    pub true_kl: f64,
}

impl Scenario {
    pub fn new(p: GaussianSpec, q: GaussianSpec) -> Result<Self> {
        let true_kl = analytic_gaussian_kl(&p, &q)?;
        Ok(Scenario { p, q, true_kl })
    }

    /// Draws the finite-sample pools for one run (`m` points per side).
    pub fn sample_pools<R: Rng>(&self, m: usize, rng: &mut R) -> (SampleSet, SampleSet) {
        let xs = self.p.sample_set(m, rng, Provenance::P);
        let ys = self.q.sample_set(m, rng, Provenance::Q);
        (xs, ys)
    }

    /// Parses `{"p": {"mean": [...], "cov": [[...]]}, "q": {...}}`.
    pub fn from_json_str(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct SpecJson {
            mean: Vec<f64>,
            cov: Vec<Vec<f64>>,
        }
        #[derive(Deserialize)]
        struct ScenarioJson {
            p: SpecJson,
            q: SpecJson,
        }
        let parsed: ScenarioJson = serde_json::from_str(s)?;
        let p = GaussianSpec::new(parsed.p.mean, parsed.p.cov)?;
        let q = GaussianSpec::new(parsed.q.mean, parsed.q.cov)?;
        Scenario::new(p, q)
    }
}

/// Standard two-dimensional scenario hitting `target_kl` exactly: unit
/// covariances, denominator mean shifted by `sqrt(2 target_kl)` along the
/// first axis.
pub fn make_scenario(target_kl: f64) -> Result<Scenario> {
    if !target_kl.is_finite() || target_kl < 0.0 {
        return Err(Error::Domain(format!(
            "target KL must be finite and nonnegative, got {target_kl}"
        )));
    }
    let delta = (2.0 * target_kl).sqrt();
    let p = GaussianSpec::isotropic(vec![0.0, 0.0]);
    let q = GaussianSpec::isotropic(vec![delta, 0.0]);
    Scenario::new(p, q)
}

/// Shuffled minibatch index chunks for one epoch: `floor(m / b)` disjoint
/// batches; a non-dividing tail is dropped for that epoch.
pub fn minibatch_indices<R: Rng>(m: usize, b: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if b == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if b > m {
        return Err(Error::Config(format!(
            "batch size {b} exceeds pool size {m}"
        )));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(rng);
    Ok(idx.chunks_exact(b).map(|c| c.to_vec()).collect())
}

/// Gathers the given pool rows into a dense batch.
pub fn gather_rows(pool: &Mat, idx: &[usize]) -> Mat {
    let mut out = Mat::zeros(idx.len(), pool.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(pool.row(i));
    }
    out
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
    fn identical_gaussians_have_zero_kl() {
        let p = GaussianSpec::isotropic(vec![0.0, 0.0]);
        let q = GaussianSpec::isotropic(vec![0.0, 0.0]);
        assert_close(analytic_gaussian_kl(&p, &q).unwrap(), 0.0, 1e-12);
    }

    #[test]
    fn unit_variance_mean_shift_hand_value() {
        // 1-D, means 0 and 2, unit variances: KL = 2.
        let p = GaussianSpec::new(vec![0.0], vec![vec![1.0]]).unwrap();
        let q = GaussianSpec::new(vec![2.0], vec![vec![1.0]]).unwrap();
        assert_close(analytic_gaussian_kl(&p, &q).unwrap(), 2.0, 1e-12);
    }

    #[test]
    fn anisotropic_hand_value() {
        // 2-D: p = N(0, diag(2, 1)), q = N((1, 0), I).
        // KL = 0.5 [3 + 1 - 2 + ln(1/2)] = 1 - ln(2)/2.
        let p = GaussianSpec::new(vec![0.0, 0.0], vec![vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let q = GaussianSpec::isotropic(vec![1.0, 0.0]);
        let expected = 1.0 - 0.5 * std::f64::consts::LN_2;
        assert_close(analytic_gaussian_kl(&p, &q).unwrap(), expected, 1e-12);
    }

    #[test]
    fn kl_rejects_dimension_mismatch_and_singularity() {
        let p1 = GaussianSpec::new(vec![0.0], vec![vec![1.0]]).unwrap();
        let p2 = GaussianSpec::isotropic(vec![0.0, 0.0]);
        assert!(analytic_gaussian_kl(&p1, &p2).is_err());

        let singular = GaussianSpec::new(vec![0.0], vec![vec![0.0]]).unwrap();
        assert!(analytic_gaussian_kl(&singular, &p1).is_err());
        assert!(analytic_gaussian_kl(&p1, &singular).is_err());
    }

    #[test]
    fn spec_validation_rejects_bad_covariances() {
        assert!(GaussianSpec::new(vec![0.0, 0.0], vec![vec![1.0, 0.0]]).is_err());
        assert!(
            GaussianSpec::new(vec![0.0, 0.0], vec![vec![1.0, 0.5], vec![0.2, 1.0]]).is_err()
        );
        // Indefinite matrix: eigenvalues 3 and -1.
        assert!(
            GaussianSpec::new(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]]).is_err()
        );
        assert!(GaussianSpec::new(vec![f64::NAN], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn cholesky_factor_reproduces_covariance() {
        let cov = vec![vec![4.0, 2.0, 0.6], vec![2.0, 5.0, 1.0], vec![0.6, 1.0, 3.0]];
        let spec = GaussianSpec::new(vec![0.0; 3], cov.clone()).unwrap();
        let f = spec.factor();
        for (i, cov_row) in cov.iter().enumerate() {
            for (j, &cov_ij) in cov_row.iter().enumerate() {
                let mut v = 0.0;
                for k in 0..3 {
                    v += f.get(i, k) * f.get(j, k);
                }
                assert_close(v, cov_ij, 1e-12);
            }
        }
        // Strict upper triangle is zero.
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert_eq!(f.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn zero_covariance_samples_equal_mean_exactly() {
        let spec = GaussianSpec::new(vec![1.5, -2.0], vec![vec![0.0; 2]; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = spec.sample(10, &mut rng);
        for i in 0..10 {
            assert_eq!(pts.row(i), &[1.5, -2.0]);
        }
    }

    #[test]
    fn rank_deficient_covariance_is_accepted() {
        // cov = vv^T with v = (1, 1): PSD with rank 1.
        let spec =
            GaussianSpec::new(vec![0.0, 0.0], vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = spec.sample(100, &mut rng);
        for i in 0..100 {
            // Samples live on the x = y line.
            assert_close(pts.get(i, 0), pts.get(i, 1), 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let spec = GaussianSpec::isotropic(vec![0.0, 0.0]);
        let a = spec.sample(5, &mut ChaCha8Rng::seed_from_u64(10));
        let b = spec.sample(5, &mut ChaCha8Rng::seed_from_u64(10));
        let c = spec.sample(5, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sample_mean_concentrates_on_spec_mean() {
        let spec = GaussianSpec::new(
            vec![2.0, -1.0],
            vec![vec![1.5, 0.4], vec![0.4, 0.9]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = 100_000;
        let pts = spec.sample(m, &mut rng);
        for j in 0..2 {
            let mean: f64 = (0..m).map(|i| pts.get(i, j)).sum::<f64>() / m as f64;
            // 4-sigma band: sigma/sqrt(m) with sigma^2 <= 1.5.
            assert_close(mean, spec.mean()[j], 4.0 * (1.5f64).sqrt() / (m as f64).sqrt());
        }
    }

    #[test]
    fn make_scenario_inverts_the_shift_formula() {
        for &target in &[0.0, 1.3, 13.8, 61.1] {
            let sc = make_scenario(target).unwrap();
            assert_close(sc.true_kl, target, 1e-10);
            let expected_shift = (2.0 * target).sqrt();
            assert_close(sc.q.mean()[0], expected_shift, 1e-12);
            assert_eq!(sc.q.mean()[1], 0.0);
        }
        // Spot the hand value: target 1.3 puts the shift at sqrt(2.6).
        let sc = make_scenario(1.3).unwrap();
        assert_close(sc.q.mean()[0], 1.6124515496597098, 1e-12);
    }

    #[test]
    fn make_scenario_rejects_bad_targets() {
        assert!(make_scenario(-0.5).is_err());
        assert!(make_scenario(f64::NAN).is_err());
        assert!(make_scenario(f64::INFINITY).is_err());
    }

    #[test]
    fn scenario_json_round_trip() {
        let json = r#"{
            "p": {"mean": [0.0, 0.0], "cov": [[1.0, 0.0], [0.0, 1.0]]},
            "q": {"mean": [2.0, 0.0], "cov": [[1.0, 0.0], [0.0, 1.0]]}
        }"#;
        let sc = Scenario::from_json_str(json).unwrap();
        assert_close(sc.true_kl, 2.0, 1e-12);
        assert!(Scenario::from_json_str("{\"p\": 3}").is_err());
    }

    #[test]
    fn minibatch_indices_partition_the_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = minibatch_indices(100, 50, &mut rng).unwrap();
        assert_eq!(batches.len(), 2);
        let mut seen: Vec<usize> = batches.iter().flatten().cloned().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn minibatch_counts_match_pool_over_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(minibatch_indices(5000, 50, &mut rng).unwrap().len(), 100);
        // Non-dividing batch size truncates the tail.
        assert_eq!(minibatch_indices(103, 50, &mut rng).unwrap().len(), 2);
    }

    #[test]
    fn minibatch_indices_reject_bad_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(minibatch_indices(10, 0, &mut rng).is_err());
        assert!(minibatch_indices(10, 11, &mut rng).is_err());
    }

    #[test]
    fn gather_rows_copies_the_right_points() {
        let pool = Mat::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]]);
        let batch = gather_rows(&pool, &[2, 0]);
        assert_eq!(batch.row(0), &[4.0, 5.0]);
        assert_eq!(batch.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn monte_carlo_oracle_matches_analytic_kl() {
        // Independent route to the same number: estimate E_p[ln p - ln q]
        // from one million samples and compare within 1%.
        struct Density {
            mean: Vec<f64>,
            inv: nalgebra::DMatrix<f64>,
            log_norm: f64,
        }
        let prep = |spec: &GaussianSpec| -> Density {
            let n = spec.dim();
            let cov = nalgebra::DMatrix::from_fn(n, n, |i, j| spec.cov().get(i, j));
            let det = cov.determinant();
            Density {
                mean: spec.mean().to_vec(),
                inv: cov.try_inverse().unwrap(),
                log_norm: -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln()),
            }
        };
        let log_density = |d: &Density, x: &[f64]| -> f64 {
            let n = d.mean.len();
            let diff = nalgebra::DVector::from_fn(n, |i, _| x[i] - d.mean[i]);
            let quad = (diff.transpose() * &d.inv * &diff)[(0, 0)];
            d.log_norm - 0.5 * quad
        };
        for &target in &[1.3, 13.8, 61.1] {
            let sc = make_scenario(target).unwrap();
            let dp = prep(&sc.p);
            let dq = prep(&sc.q);
            let mut rng = ChaCha8Rng::seed_from_u64(12345);
            let m = 1_000_000;
            let pts = sc.p.sample(m, &mut rng);
            let mut acc = 0.0;
            for i in 0..m {
                let x = pts.row(i);
                acc += log_density(&dp, x) - log_density(&dq, x);
            }
            let mc = acc / m as f64;
            let rel = (mc - sc.true_kl).abs() / sc.true_kl;
            assert!(
                rel < 0.01,
                "target {target}: MC {mc} vs analytic {} (rel {rel})",
                sc.true_kl
            );
        }
    }
}
