//! Channel estimation from the training preamble: the classical
//! least-squares (ML) point estimate, and the full Gaussian posterior over
//! the taps under a zero-mean Gaussian prior, which the Bayesian equalizer
//! integrates over instead of trusting a single estimate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::channel::ChannelTaps;

/// Relative eigenvalue threshold below which the normal matrix counts as
/// rank-deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("regressor entries must be ±1")]
    InvalidRegressor,
    #[error("{observations} observations do not match {columns} regressor columns")]
    ShapeMismatch { observations: usize, columns: usize },
    #[error(
        "training set does not excite all {0} taps (rank-deficient normal matrix); \
         lengthen or re-randomize the preamble"
    )]
    InsufficientExcitation(usize),
    #[error("covariance is not symmetric positive semi-definite (min eigenvalue {0:e})")]
    IllConditionedCovariance(f64),
    #[error("covariance must be square and match the mean length")]
    InvalidCovarianceShape,
}

/// Known ±1 training symbols arranged as regressors, with the matching
/// noisy channel outputs: column `i` is `[b_i, b_{i-1}, ..., b_{i-L+1}]`.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    regressors: DMatrix<f64>,
    observations: DVector<f64>,
}

impl TrainingSet {
    /// Wraps an explicit L×n regressor matrix (entries ±1) and n observations.
    pub fn new(
        regressors: DMatrix<f64>,
        observations: DVector<f64>,
    ) -> Result<Self, EstimatorError> {
        if regressors.ncols() != observations.len() {
            return Err(EstimatorError::ShapeMismatch {
                observations: observations.len(),
                columns: regressors.ncols(),
            });
        }
        if regressors.iter().any(|s| s.abs() != 1.0) {
            return Err(EstimatorError::InvalidRegressor);
        }
        Ok(Self {
            regressors,
            observations,
        })
    }

    /// Builds the shifted-window regressors for a received preamble; symbols
    /// before the preamble are the +1 guard that opens every frame.
    pub fn from_preamble(
        preamble_symbols: &[f64],
        received_preamble: &[f64],
        channel_len: usize,
    ) -> Result<Self, EstimatorError> {
        assert!(channel_len >= 1, "channel must have at least one tap");
        let n = preamble_symbols.len();
        if received_preamble.len() != n {
            return Err(EstimatorError::ShapeMismatch {
                observations: received_preamble.len(),
                columns: n,
            });
        }
        let regressors = DMatrix::from_fn(channel_len, n, |k, i| {
            if i >= k {
                preamble_symbols[i - k]
            } else {
                1.0 // guard symbol
            }
        });
        Self::new(regressors, DVector::from_column_slice(received_preamble))
    }

    pub fn channel_len(&self) -> usize {
        self.regressors.nrows()
    }

    pub fn num_observations(&self) -> usize {
        self.regressors.ncols()
    }

    pub fn regressors(&self) -> &DMatrix<f64> {
        &self.regressors
    }

    pub fn observations(&self) -> &DVector<f64> {
        &self.observations
    }
}

/// Least-squares channel estimate `(B Bᵀ)⁻¹ B x`.
///
/// This maximizes the Gaussian likelihood for *any* noise variance, so
/// `_sigma2` does not influence the result; the parameter is kept so both
/// estimators share a calling shape.
pub fn ml_estimate(train: &TrainingSet, _sigma2: f64) -> Result<ChannelTaps, EstimatorError> {
    let l = train.channel_len();
    if train.num_observations() < l {
        return Err(EstimatorError::InsufficientExcitation(l));
    }
    let b = train.regressors();
    let normal = b * b.transpose();

    // Rank check on the symmetric PSD normal matrix before solving.
    let eigenvalues = SymmetricEigen::new(normal.clone()).eigenvalues;
    let max_e = eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min_e = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_e > max_e * RANK_TOL) {
        return Err(EstimatorError::InsufficientExcitation(l));
    }

    let rhs = b * train.observations();
    let solution = normal
        .cholesky()
        .ok_or(EstimatorError::InsufficientExcitation(l))?
        .solve(&rhs);
    Ok(ChannelTaps::new(solution.iter().copied().collect()).expect("finite LS solution"))
}

/// Gaussian posterior over the channel taps.
#[derive(Debug, Clone)]
pub struct ChannelPosterior {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl ChannelPosterior {
    /// Wraps an explicit mean and symmetric covariance (used by tests and
    /// by callers injecting degenerate posteriors).
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, EstimatorError> {
        let l = mean.len();
        if covariance.nrows() != l || covariance.ncols() != l {
            return Err(EstimatorError::InvalidCovarianceShape);
        }
        let scale = covariance.iter().fold(1.0f64, |m, c| m.max(c.abs()));
        for r in 0..l {
            for c in 0..r {
                if (covariance[(r, c)] - covariance[(c, r)]).abs() > 1e-9 * scale {
                    return Err(EstimatorError::IllConditionedCovariance(f64::NAN));
                }
            }
        }
        Ok(Self { mean, covariance })
    }

    pub fn channel_len(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Symmetric square-root factor F with F Fᵀ = covariance, via the
    /// eigendecomposition of the symmetrized matrix. Eigenvalues inside
    /// roundoff of zero are clamped to zero, so a degenerate (zero)
    /// covariance factors cleanly; genuinely negative ones are an error.
    fn sqrt_factor(&self) -> Result<DMatrix<f64>, EstimatorError> {
        let sym = (&self.covariance + self.covariance.transpose()) * 0.5;
        let eigen = SymmetricEigen::new(sym);
        let max_abs = eigen.eigenvalues.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        let min_e = eigen
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_e < -1e-9 * max_abs.max(f64::MIN_POSITIVE) {
            return Err(EstimatorError::IllConditionedCovariance(min_e));
        }
        let scaled = DMatrix::from_fn(self.channel_len(), self.channel_len(), |r, c| {
            eigen.eigenvectors[(r, c)] * eigen.eigenvalues[c].max(0.0).sqrt()
        });
        Ok(scaled)
    }
}

/// Posterior over the taps given the training set, for the model
/// `x = Bᵀh + w`, `w ~ N(0, σ²I)`, prior `h ~ N(0, prior_var · I)`:
///
/// covariance = (I/prior_var + B Bᵀ/σ²)⁻¹, mean = covariance · B x / σ².
///
/// An empty training set returns the prior itself. Always well-posed — the
/// prior term keeps the precision matrix positive definite.
pub fn posterior(train: &TrainingSet, sigma2: f64, prior_var: f64) -> ChannelPosterior {
    assert!(
        sigma2.is_finite() && sigma2 > 0.0,
        "noise variance must be positive, got {sigma2}"
    );
    assert!(
        prior_var.is_finite() && prior_var > 0.0,
        "prior variance must be positive, got {prior_var}"
    );
    let l = train.channel_len();
    let b = train.regressors();
    let precision = DMatrix::identity(l, l) / prior_var + b * b.transpose() / sigma2;
    let chol = precision
        .cholesky()
        .expect("posterior precision is positive definite by construction");
    let covariance = chol.inverse();
    let mean = chol.solve(&(b * train.observations() / sigma2));
    ChannelPosterior { mean, covariance }
}

/// Draws `count` i.i.d. tap vectors `mean + F z`, `z ~ N(0, I)`, where F is
/// the symmetric square root of the covariance.
pub fn sample_posterior(
    post: &ChannelPosterior,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ChannelTaps>, EstimatorError> {
    let factor = post.sqrt_factor()?;
    let l = post.channel_len();
    let samples = (0..count)
        .map(|_| {
            let z = DVector::from_fn(l, |_, _| rng.sample::<f64, _>(StandardNormal));
            let h = post.mean() + &factor * z;
            ChannelTaps::new(h.iter().copied().collect()).expect("finite sample")
        })
        .collect();
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{transmit, ChannelTaps, NoiseModel, BENCHMARK_TAPS_L3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn preamble(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect()
    }

    /// Noiseless observations for a preamble (guard-padded) under `taps`.
    fn noiseless_obs(preamble: &[f64], taps: &ChannelTaps) -> Vec<f64> {
        let l = taps.len();
        let mut seq = vec![1.0; l - 1];
        seq.extend_from_slice(preamble);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        transmit(&seq, taps, &NoiseModel::new(1e-300).unwrap(), &mut rng)
    }

    #[test]
    fn training_set_shapes_and_validation() {
        let p = preamble(10, 1);
        let obs = vec![0.0; 10];
        let train = TrainingSet::from_preamble(&p, &obs, 3).unwrap();
        assert_eq!(train.channel_len(), 3);
        assert_eq!(train.num_observations(), 10);
        // First column is [b_1, guard, guard].
        assert_eq!(train.regressors()[(0, 0)], p[0]);
        assert_eq!(train.regressors()[(1, 0)], 1.0);
        assert_eq!(train.regressors()[(2, 0)], 1.0);
        // A later column is the reversed window [b_i, b_{i-1}, b_{i-2}].
        assert_eq!(train.regressors()[(0, 5)], p[5]);
        assert_eq!(train.regressors()[(1, 5)], p[4]);
        assert_eq!(train.regressors()[(2, 5)], p[3]);

        assert_eq!(
            TrainingSet::from_preamble(&p, &obs[..9], 3).unwrap_err(),
            EstimatorError::ShapeMismatch {
                observations: 9,
                columns: 10
            }
        );
        let bad = DMatrix::from_element(2, 3, 0.5);
        assert_eq!(
            TrainingSet::new(bad, DVector::zeros(3)).unwrap_err(),
            EstimatorError::InvalidRegressor
        );
    }

    #[test]
    fn ml_recovers_channel_from_noiseless_training() {
        let taps = ChannelTaps::new(vec![1.0, 0.1]).unwrap();
        let p = preamble(8, 2);
        let obs = noiseless_obs(&p, &taps);
        let train = TrainingSet::from_preamble(&p, &obs, 2).unwrap();
        let est = ml_estimate(&train, 0.5).unwrap();
        for (e, t) in est.as_slice().iter().zip(taps.as_slice()) {
            assert!((e - t).abs() < 1e-10, "estimate {e} vs true {t}");
        }
    }

    #[test]
    fn ml_single_tap_closed_form() {
        // L = 1: least squares reduces to mean(b_i * x_i).
        let regressors = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let obs = DVector::from_column_slice(&[0.9, -1.1]);
        let train = TrainingSet::new(regressors, obs).unwrap();
        let est = ml_estimate(&train, 1.0).unwrap();
        assert!((est.as_slice()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ml_is_independent_of_noise_variance() {
        let taps = ChannelTaps::new(BENCHMARK_TAPS_L3.to_vec()).unwrap();
        let p = preamble(12, 3);
        let obs = noiseless_obs(&p, &taps);
        let train = TrainingSet::from_preamble(&p, &obs, 3).unwrap();
        let a = ml_estimate(&train, 0.01).unwrap();
        let b = ml_estimate(&train, 10.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ml_rejects_insufficient_excitation() {
        // Fewer observations than taps.
        let p = preamble(2, 4);
        let train = TrainingSet::from_preamble(&p, &[0.1, 0.2], 3).unwrap();
        assert_eq!(
            ml_estimate(&train, 1.0).unwrap_err(),
            EstimatorError::InsufficientExcitation(3)
        );

        // Enough observations but a constant preamble: rank-1 regressors.
        let p = vec![1.0; 6];
        let train = TrainingSet::from_preamble(&p, &[1.1; 6], 2).unwrap();
        assert_eq!(
            ml_estimate(&train, 1.0).unwrap_err(),
            EstimatorError::InsufficientExcitation(2)
        );
    }

    #[test]
    fn posterior_with_no_data_is_the_prior() {
        let train =
            TrainingSet::new(DMatrix::from_fn(3, 0, |_, _| 1.0), DVector::zeros(0)).unwrap();
        let post = posterior(&train, 1.0, 1.0);
        assert!(post.mean().iter().all(|m| m.abs() < 1e-15));
        let eye = DMatrix::<f64>::identity(3, 3);
        assert!((post.covariance() - eye).abs().max() < 1e-12);
    }

    #[test]
    fn posterior_scalar_closed_form() {
        // L=1, one observation b=+1, x=1, σ²=1, prior 1:
        // precision = 2, cov = 1/2, mean = 1/2.
        let train = TrainingSet::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let post = posterior(&train, 1.0, 1.0);
        assert!((post.covariance()[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((post.mean()[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn posterior_converges_to_ml_for_flat_prior() {
        let taps = ChannelTaps::new(BENCHMARK_TAPS_L3.to_vec()).unwrap();
        let p = preamble(10, 5);
        let mut obs = noiseless_obs(&p, &taps);
        for (i, o) in obs.iter_mut().enumerate() {
            *o += 0.01 * ((i as f64).sin()); // mild deterministic perturbation
        }
        let train = TrainingSet::from_preamble(&p, &obs, 3).unwrap();
        let ml = ml_estimate(&train, 0.5).unwrap();
        let post = posterior(&train, 0.5, 1e9);
        for (m, t) in post.mean().iter().zip(ml.as_slice()) {
            assert!((m - t).abs() < 1e-6, "posterior mean {m} vs ML {t}");
        }
    }

    #[test]
    fn posterior_mean_is_shrunk_ml_estimate() {
        // Identity: mean = (I + σ² (B Bᵀ)⁻¹ / prior_var)⁻¹ ĥ_ML.
        let taps = ChannelTaps::new(BENCHMARK_TAPS_L3.to_vec()).unwrap();
        let p = preamble(9, 6);
        let obs = noiseless_obs(&p, &taps);
        let train = TrainingSet::from_preamble(&p, &obs, 3).unwrap();
        let sigma2 = 0.7;
        let prior_var = 1.3;

        let ml = DVector::from_column_slice(ml_estimate(&train, sigma2).unwrap().as_slice());
        let b = train.regressors();
        let normal_inv = (b * b.transpose()).try_inverse().unwrap();
        let eye = DMatrix::<f64>::identity(3, 3);
        let expected = (eye + normal_inv * (sigma2 / prior_var))
            .try_inverse()
            .unwrap()
            * ml;

        let post = posterior(&train, sigma2, prior_var);
        assert!((post.mean() - expected).abs().max() < 1e-10);
    }

    #[test]
    fn posterior_norm_shrinks_for_orthogonal_rows() {
        // Orthogonal regressor rows make the shrinkage componentwise.
        let regressors = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 1.0, -1.0]);
        let obs = DVector::from_column_slice(&[1.2, 0.4, 0.9, 0.2]);
        let train = TrainingSet::new(regressors, obs).unwrap();
        let ml = ml_estimate(&train, 0.5).unwrap();
        let post = posterior(&train, 0.5, 1.0);
        let ml_norm: f64 = ml.as_slice().iter().map(|h| h * h).sum();
        let post_norm: f64 = post.mean().iter().map(|h| h * h).sum();
        assert!(post_norm <= ml_norm + 1e-12);
    }

    #[test]
    fn posterior_variance_shrinks_with_more_training() {
        let taps = ChannelTaps::new(BENCHMARK_TAPS_L3.to_vec()).unwrap();
        let p = preamble(12, 7);
        let obs = noiseless_obs(&p, &taps);
        let mut prev_trace = f64::INFINITY;
        for n in 0..=12 {
            let train = TrainingSet::from_preamble(&p[..n], &obs[..n], 3).unwrap();
            let trace = posterior(&train, 0.5, 1.0).covariance().trace();
            assert!(
                trace <= prev_trace + 1e-12,
                "trace grew from {prev_trace} to {trace} at n={n}"
            );
            prev_trace = trace;
        }
    }

    #[test]
    fn samples_match_posterior_moments() {
        let taps = ChannelTaps::new(vec![1.0, 0.1]).unwrap();
        let p = preamble(6, 8);
        let obs = noiseless_obs(&p, &taps);
        let train = TrainingSet::from_preamble(&p, &obs, 2).unwrap();
        let post = posterior(&train, 1.0, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples = sample_posterior(&post, 100_000, &mut rng).unwrap();
        let l = post.channel_len();
        let mut mean = vec![0.0; l];
        for s in &samples {
            for (m, v) in mean.iter_mut().zip(s.as_slice()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= samples.len() as f64;
        }
        let mut cov = DMatrix::zeros(l, l);
        for s in &samples {
            for r in 0..l {
                for c in 0..l {
                    cov[(r, c)] += (s.as_slice()[r] - mean[r]) * (s.as_slice()[c] - mean[c]);
                }
            }
        }
        cov /= samples.len() as f64;

        for k in 0..l {
            let std_of_mean = (post.covariance()[(k, k)] / samples.len() as f64).sqrt();
            assert!(
                (mean[k] - post.mean()[k]).abs() < 5.0 * std_of_mean,
                "sample mean off in component {k}"
            );
        }
        let err = (&cov - post.covariance()).abs().max();
        let scale = post.covariance().abs().max();
        assert!(err / scale < 0.05, "sample covariance off by {err}");
    }

    #[test]
    fn zero_covariance_samples_collapse_to_mean() {
        let mean = DVector::from_column_slice(&[0.3, -0.8]);
        let post = ChannelPosterior::new(mean.clone(), DMatrix::zeros(2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for s in sample_posterior(&post, 7, &mut rng).unwrap() {
            assert_eq!(s.as_slice(), &[0.3, -0.8], "sample must equal the mean exactly");
        }
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let mean = DVector::zeros(2);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let post = ChannelPosterior::new(mean, cov).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(matches!(
            sample_posterior(&post, 1, &mut rng).unwrap_err(),
            EstimatorError::IllConditionedCovariance(_)
        ));
    }

    #[test]
    fn sampling_is_deterministic_for_fixed_seed() {
        let taps = ChannelTaps::new(vec![1.0, 0.1]).unwrap();
        let p = preamble(6, 12);
        let obs = noiseless_obs(&p, &taps);
        let train = TrainingSet::from_preamble(&p, &obs, 2).unwrap();
        let post = posterior(&train, 1.0, 1.0);
        let a = sample_posterior(&post, 5, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let b = sample_posterior(&post, 5, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        assert_eq!(a, b);
    }
}
