//! Slow-but-trusted reference implementations used to validate the fast
//! paths: exhaustive sequence enumeration for the symbol posteriors, grid
//! integration for the channel posterior, numerical quadrature for the
//! single-tap marginalized posterior, and exhaustive maximum-likelihood
//! decoding for toy LDPC codes. Each oracle takes an independent arithmetic
//! route from the implementation it checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bayes_eq::{bayes_equalize, BayesEqConfig};
use crate::bcjr::{bcjr_app, build_trellis, AppVector};
use crate::channel::{sample_rayleigh_channel, transmit, ChannelTaps, NoiseModel};
use crate::estimator::{posterior, ChannelPosterior, TrainingSet};
use crate::ldpc::{build_code, decode_bp, LdpcCode};

/// Largest payload the brute-force sequence enumeration accepts.
pub const MAX_BRUTE_FORCE_BITS: usize = 14;

/// Largest message the exhaustive ML decoder accepts.
pub const MAX_EXHAUSTIVE_MESSAGE_BITS: usize = 16;

/// Grid integration handles at most this many taps.
pub const MAX_GRID_DIMS: usize = 2;

/// Allowed deviation of the gridded prior mass from 1 before the grid is
/// declared too coarse for trustworthy moments.
pub const GRID_MASS_TOL: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("brute force supports payloads up to {max} bits, got {got}")]
    PayloadTooLarge { got: usize, max: usize },
    #[error("grid integration supports up to {max} taps, got {got}")]
    GridDimTooLarge { got: usize, max: usize },
    #[error("exhaustive decode supports messages up to {max} bits, got {got}")]
    MessageTooLarge { got: usize, max: usize },
    #[error("grid too coarse: prior mass off by {0:e} (limit {1:e})")]
    GridTooCoarse(f64, f64),
}

/// Exact symbol posteriors by enumerating all 2^N payload sequences and
/// summing their likelihoods directly — no trellis, no recursion.
pub fn brute_force_app(
    taps: &ChannelTaps,
    received: &[f64],
    sigma2: f64,
    initial_symbols: &[f64],
) -> Result<AppVector, OracleError> {
    let n = received.len();
    if n > MAX_BRUTE_FORCE_BITS {
        return Err(OracleError::PayloadTooLarge {
            got: n,
            max: MAX_BRUTE_FORCE_BITS,
        });
    }
    let l = taps.len();
    assert_eq!(initial_symbols.len(), l - 1, "need L-1 initial symbols");
    assert!(sigma2 > 0.0 && sigma2.is_finite());
    if n == 0 {
        return Ok(AppVector::new(Vec::new()));
    }

    let h = taps.as_slice();
    let mut seq = vec![0.0; l - 1 + n];
    seq[..l - 1].copy_from_slice(initial_symbols);

    // Log-likelihood of every payload hypothesis, by direct convolution.
    let mut log_lik = Vec::with_capacity(1 << n);
    for m in 0..(1usize << n) {
        for (j, s) in seq[l - 1..].iter_mut().enumerate() {
            *s = if (m >> j) & 1 == 0 { 1.0 } else { -1.0 };
        }
        let mut ll = 0.0;
        for (i, x) in received.iter().enumerate() {
            let mut mean = 0.0;
            for (k, hk) in h.iter().enumerate() {
                mean += hk * seq[l - 1 + i - k];
            }
            ll -= (x - mean) * (x - mean) / (2.0 * sigma2);
        }
        log_lik.push(ll);
    }

    let max_ll = log_lik.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_lik.iter().map(|ll| (ll - max_ll).exp()).collect();
    let total: f64 = weights.iter().sum();

    let probs = (0..n)
        .map(|i| {
            let plus: f64 = weights
                .iter()
                .enumerate()
                .filter(|(m, _)| (m >> i) & 1 == 0)
                .map(|(_, w)| w)
                .sum();
            plus / total
        })
        .collect();
    Ok(AppVector::new(probs))
}

/// Midpoint-grid shape for [`grid_posterior`].
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    /// Cells per dimension.
    pub points_per_dim: usize,
    /// Half-width of the grid in prior standard deviations.
    pub half_width_std: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points_per_dim: 400,
            half_width_std: 6.0,
        }
    }
}

/// Posterior moments computed by grid integration.
#[derive(Debug, Clone)]
pub struct GridMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// |gridded prior mass − 1|, a proxy for discretization error.
    pub prior_mass_error: f64,
}

/// Channel-posterior moments by Riemann (midpoint) integration of
/// prior × likelihood over a grid — an arithmetic route with no matrix
/// inversions to compare the closed form against. Limited to L ≤ 2.
pub fn grid_posterior(
    train: &TrainingSet,
    sigma2: f64,
    prior_var: f64,
    grid: &GridSpec,
) -> Result<GridMoments, OracleError> {
    let l = train.channel_len();
    if l > MAX_GRID_DIMS {
        return Err(OracleError::GridDimTooLarge {
            got: l,
            max: MAX_GRID_DIMS,
        });
    }
    assert!(sigma2 > 0.0 && prior_var > 0.0);
    let g = grid.points_per_dim;
    assert!(g >= 2, "grid needs at least two cells per dimension");

    let half_width = grid.half_width_std * prior_var.sqrt();
    let delta = 2.0 * half_width / g as f64;
    let axis: Vec<f64> = (0..g)
        .map(|i| -half_width + (i as f64 + 0.5) * delta)
        .collect();
    let cell_volume = delta.powi(l as i32);
    let prior_norm = (2.0 * std::f64::consts::PI * prior_var).powf(-(l as f64) / 2.0);

    let b = train.regressors();
    let x = train.observations();
    let n_obs = train.num_observations();

    // One flat pass over the grid (1 or 2 dims, little-endian index order).
    let num_cells = g.pow(l as u32);
    let coords = |cell: usize| -> [f64; 2] {
        let mut c = [0.0; 2];
        let mut rest = cell;
        for d in 0..l {
            c[d] = axis[rest % g];
            rest /= g;
        }
        c
    };

    let mut log_weight = Vec::with_capacity(num_cells);
    let mut prior_mass = 0.0;
    for cell in 0..num_cells {
        let hc = coords(cell);
        let norm2: f64 = hc[..l].iter().map(|v| v * v).sum();
        let log_prior = -norm2 / (2.0 * prior_var) + prior_norm.ln();
        prior_mass += log_prior.exp() * cell_volume;
        let mut log_lik = 0.0;
        for i in 0..n_obs {
            let mut mean = 0.0;
            for (d, h) in hc[..l].iter().enumerate() {
                mean += b[(d, i)] * h;
            }
            log_lik -= (x[i] - mean) * (x[i] - mean) / (2.0 * sigma2);
        }
        log_weight.push(log_prior + log_lik);
    }

    let prior_mass_error = (prior_mass - 1.0).abs();
    if prior_mass_error > GRID_MASS_TOL {
        return Err(OracleError::GridTooCoarse(prior_mass_error, GRID_MASS_TOL));
    }

    let max_lw = log_weight.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weight.iter().map(|lw| (lw - max_lw).exp()).collect();
    let total: f64 = weights.iter().sum();

    let mut mean = DVector::zeros(l);
    for (cell, w) in weights.iter().enumerate() {
        let hc = coords(cell);
        for d in 0..l {
            mean[d] += w * hc[d];
        }
    }
    mean /= total;

    let mut covariance = DMatrix::zeros(l, l);
    for (cell, w) in weights.iter().enumerate() {
        let hc = coords(cell);
        for r in 0..l {
            for c in 0..l {
                covariance[(r, c)] += w * (hc[r] - mean[r]) * (hc[c] - mean[c]);
            }
        }
    }
    covariance /= total;

    Ok(GridMoments {
        mean,
        covariance,
        prior_mass_error,
    })
}

/// Single-tap marginalized symbol posterior
/// `p(b=+1 | x) = ∫ p(b=+1 | x, h) N(h; mean, var) dh`
/// by Simpson quadrature over mean ± 8·std, normalized by the quadrature of
/// the Gaussian alone so truncation cancels.
pub fn quadrature_app_1tap(x: f64, sigma2: f64, mean: f64, var: f64) -> f64 {
    assert!(sigma2 > 0.0 && var >= 0.0);
    let logistic = |h: f64| {
        let z = 2.0 * h * x / sigma2;
        if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        }
    };
    if var == 0.0 {
        return logistic(mean);
    }
    let std = var.sqrt();
    let lo = mean - 8.0 * std;
    let hi = mean + 8.0 * std;
    let segments = 4000; // even count for Simpson's rule
    let dh = (hi - lo) / segments as f64;
    let gauss = |h: f64| (-(h - mean) * (h - mean) / (2.0 * var)).exp();

    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..=segments {
        let h = lo + j as f64 * dh;
        let w = if j == 0 || j == segments {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let g = gauss(h);
        num += w * g * logistic(h);
        den += w * g;
    }
    num / den
}

/// Exhaustive maximum-likelihood decoding: encode all 2^K messages and pick
/// the codeword maximizing the LLR-weighted agreement `Σ (1-2c_i)·llr_i`.
/// Ties (e.g. all-zero LLRs) go to the lexicographically smallest codeword.
pub fn exhaustive_ml_decode(code: &LdpcCode, llrs: &[f64]) -> Result<Vec<u8>, OracleError> {
    let k = code.message_len();
    if k > MAX_EXHAUSTIVE_MESSAGE_BITS {
        return Err(OracleError::MessageTooLarge {
            got: k,
            max: MAX_EXHAUSTIVE_MESSAGE_BITS,
        });
    }
    assert_eq!(llrs.len(), code.block_len());

    let mut best: Option<(f64, Vec<u8>)> = None;
    let mut message = vec![0u8; k];
    for m in 0..(1usize << k) {
        for (j, bit) in message.iter_mut().enumerate() {
            *bit = ((m >> j) & 1) as u8;
        }
        let codeword = code.encode(&message).expect("message length matches");
        let score: f64 = codeword
            .iter()
            .zip(llrs)
            .map(|(&c, &llr)| (1.0 - 2.0 * f64::from(c)) * llr)
            .sum();
        let better = match &best {
            None => true,
            Some((s, c)) => score > *s || (score == *s && codeword < *c),
        };
        if better {
            best = Some((score, codeword));
        }
    }
    Ok(best.expect("at least one codeword").1)
}

/// Outcome of one oracle cross-validation case.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub case: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleReport {
    fn new(case: &str, max_deviation: f64, tolerance: f64) -> Self {
        Self {
            case: case.to_string(),
            max_deviation,
            tolerance,
            passed: max_deviation <= tolerance,
        }
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: max deviation {:.3e} (tolerance {:.3e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.case,
            self.max_deviation,
            self.tolerance
        )
    }
}

fn random_symbols(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// BCJR vs brute-force enumeration on random instances with L ∈ {1,2,3}
/// and payloads of 4–12 bits. Tolerance 1e-9 on every probability.
pub fn check_bcjr_vs_brute_force(seed: u64, instances: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_dev = 0.0f64;
    for t in 0..instances {
        let l = 1 + t % 3;
        let n = 4 + t % 9;
        let taps = sample_rayleigh_channel(l, &mut rng).unwrap();
        let sigma2 = 10f64.powf(rng.random_range(-1.3..0.3));
        let prefix = random_symbols(l - 1, &mut rng);
        let payload = random_symbols(n, &mut rng);
        let mut seq = prefix.clone();
        seq.extend_from_slice(&payload);
        let noise = NoiseModel::new(sigma2).unwrap();
        let received = transmit(&seq, &taps, &noise, &mut rng);

        let fast = bcjr_app(&build_trellis(&taps, &prefix), &received, sigma2);
        let slow = brute_force_app(&taps, &received, sigma2, &prefix).unwrap();
        for (a, b) in fast.probs().iter().zip(slow.probs()) {
            max_dev = max_dev.max((a - b).abs());
        }
    }
    OracleReport::new("bcjr_vs_brute_force", max_dev, 1e-9)
}

/// Closed-form Gaussian posterior vs grid integration on random training
/// sets with L ∈ {1,2}. Tolerance 1e-3 on every moment entry.
pub fn check_posterior_vs_grid(seed: u64, instances: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_dev = 0.0f64;
    for t in 0..instances {
        let l = 1 + t % 2;
        let n = 2 + t % 7;
        let taps = sample_rayleigh_channel(l, &mut rng).unwrap();
        let sigma2 = rng.random_range(0.1..2.0);
        let preamble = random_symbols(n, &mut rng);
        let mut seq = vec![1.0; l - 1];
        seq.extend_from_slice(&preamble);
        let noise = NoiseModel::new(sigma2).unwrap();
        let received = transmit(&seq, &taps, &noise, &mut rng);
        let train = TrainingSet::from_preamble(&preamble, &received, l).unwrap();

        let closed = posterior(&train, sigma2, 1.0);
        let grid = grid_posterior(&train, sigma2, 1.0, &GridSpec::default()).unwrap();
        max_dev = max_dev.max((closed.mean() - &grid.mean).abs().max());
        max_dev = max_dev.max((closed.covariance() - &grid.covariance).abs().max());
    }
    OracleReport::new("posterior_vs_grid", max_dev, 1e-3)
}

/// Belief propagation vs exhaustive ML on a toy code at moderate noise:
/// among instances where BP reports convergence, at least 95% must decode
/// to exactly the ML codeword. Deviation = disagreement rate.
pub fn check_bp_vs_exhaustive_ml(seed: u64, instances: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let code = build_code(16, seed).expect("toy code construction");
    let sigma2 = 0.4f64;
    let mut converged = 0usize;
    let mut agree = 0usize;
    for _ in 0..instances {
        let message: Vec<u8> = (0..code.message_len())
            .map(|_| rng.random::<bool>() as u8)
            .collect();
        let codeword = code.encode(&message).unwrap();
        let llrs: Vec<f64> = codeword
            .iter()
            .map(|&c| {
                let symbol = 1.0 - 2.0 * f64::from(c);
                let x = symbol + sigma2.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
                2.0 * x / sigma2
            })
            .collect();
        let bp = decode_bp(&code, &llrs, 100);
        if bp.converged {
            converged += 1;
            if bp.decoded_bits == exhaustive_ml_decode(&code, &llrs).unwrap() {
                agree += 1;
            }
        }
    }
    // No convergences at all would make the rate meaningless — count it
    // as full disagreement rather than a vacuous pass.
    let disagreement = if converged == 0 {
        1.0
    } else {
        1.0 - agree as f64 / converged as f64
    };
    OracleReport::new("bp_vs_exhaustive_ml", disagreement, 0.05)
}

/// Monte-Carlo marginalized single-tap posterior at M = 10⁴ vs numerical
/// quadrature. Tolerance 0.005 on the probability.
pub fn check_bayes_mc_vs_quadrature(seed: u64, instances: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_dev = 0.0f64;
    for _ in 0..instances {
        // Parameter ranges mirror a posterior fitted from a short preamble
        // at moderate SNR — the regime the marginalized receiver targets.
        let sign = |rng: &mut ChaCha8Rng| if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mean = rng.random_range(0.4..1.5) * sign(&mut rng);
        let var = rng.random_range(0.05..0.3);
        let sigma2 = rng.random_range(0.4..1.5);
        let x = rng.random_range(0.3..1.8) * sign(&mut rng);
        let post = ChannelPosterior::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, var),
        )
        .unwrap();
        let cfg = BayesEqConfig {
            num_samples: 10_000,
            seed: rng.random(),
        };
        let mc = bayes_equalize(&post, &[x], sigma2, &[], &cfg).unwrap().probs()[0];
        let quad = quadrature_app_1tap(x, sigma2, mean, var);
        max_dev = max_dev.max((mc - quad).abs());
    }
    OracleReport::new("bayes_mc_vs_quadrature", max_dev, 0.005)
}

/// Runs every oracle cross-validation at its standard instance count.
pub fn run_oracle_check(seed: u64) -> Vec<OracleReport> {
    vec![
        check_bcjr_vs_brute_force(seed, 100),
        check_posterior_vs_grid(seed.wrapping_add(1), 20),
        check_bp_vs_exhaustive_ml(seed.wrapping_add(2), 50),
        check_bayes_mc_vs_quadrature(seed.wrapping_add(3), 10),
    ]
}
