//! The two soft-output receivers under comparison.
//!
//! `ml_bcjr_equalize` runs BCJR at the least-squares channel estimate as if
//! it were exact. `bayes_equalize` instead draws M tap vectors from the
//! channel posterior, runs BCJR once per draw, and averages the resulting
//! probabilities — a Monte-Carlo approximation of the symbol posterior with
//! the channel integrated out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bcjr::{bcjr_app, build_trellis, AppVector};
use crate::estimator::{
    ml_estimate, sample_posterior, ChannelPosterior, EstimatorError, TrainingSet,
};

/// Monte-Carlo sample count used by the experiments when none is configured.
pub const DEFAULT_MC_SAMPLES: usize = 50;

/// Knobs for the Bayesian equalizer: Monte-Carlo sample count and RNG seed.
#[derive(Debug, Clone, Copy)]
pub struct BayesEqConfig {
    /// Number of posterior draws M (≥ 1) averaged per frame.
    pub num_samples: usize,
    /// Seed for the posterior sampler; fixed seed + fixed M give
    /// bit-identical output.
    pub seed: u64,
}

impl Default for BayesEqConfig {
    fn default() -> Self {
        Self {
            num_samples: DEFAULT_MC_SAMPLES,
            seed: 0,
        }
    }
}

/// Bayesian symbol posteriors: `p(b | x) ≈ (1/M) Σ_j p(b | x, h_j)` with
/// `h_j` drawn once from the channel posterior and reused for all bits.
///
/// The average is taken in the probability domain, in draw order.
pub fn bayes_equalize(
    posterior: &ChannelPosterior,
    received: &[f64],
    sigma2: f64,
    initial_symbols: &[f64],
    cfg: &BayesEqConfig,
) -> Result<AppVector, EstimatorError> {
    assert!(cfg.num_samples >= 1, "need at least one posterior sample");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = sample_posterior(posterior, cfg.num_samples, &mut rng)?;

    let mut acc = vec![0.0f64; received.len()];
    for taps in &samples {
        let trellis = build_trellis(taps, initial_symbols);
        let app = bcjr_app(&trellis, received, sigma2);
        for (a, p) in acc.iter_mut().zip(app.probs()) {
            *a += p;
        }
    }
    let m = cfg.num_samples as f64;
    for a in acc.iter_mut() {
        *a /= m;
    }
    Ok(AppVector::new(acc))
}

/// Classical receiver: least-squares channel estimate, then BCJR treating
/// the estimate as the true channel.
pub fn ml_bcjr_equalize(
    train: &TrainingSet,
    received: &[f64],
    sigma2: f64,
    initial_symbols: &[f64],
) -> Result<AppVector, EstimatorError> {
    let taps = ml_estimate(train, sigma2)?;
    let trellis = build_trellis(&taps, initial_symbols);
    Ok(bcjr_app(&trellis, received, sigma2))
}
