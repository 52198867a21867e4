//! BPSK modulation and transmission over a real-valued ISI channel with
//! additive white Gaussian noise: `x_i = sum_k h_k * b_{i-k+1} + w_i`.
//!
//! A transmitted frame is `guard ++ preamble ++ payload` sent in one
//! contiguous pass, so intersymbol interference crosses the
//! preamble/payload boundary exactly as it would on air.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;
use thiserror::Error;

/// Benchmark 3-tap channel used by the length-3 experiments (unit norm).
pub const BENCHMARK_TAPS_L3: [f64; 3] = [0.3482, 0.8704, 0.3482];

/// Benchmark 6-tap channel used by the length-6 experiments (unit norm).
pub const BENCHMARK_TAPS_L6: [f64; 6] = [0.1600, 0.5450, -0.6720, 0.2560, 0.0950, -0.3890];

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("channel must have at least one tap")]
    EmptyTaps,
    #[error("channel taps must be finite, got {0}")]
    NonFiniteTap(f64),
    #[error("noise variance must be positive and finite, got {0}")]
    InvalidNoiseVariance(f64),
}

/// Impulse response `h = [h_1, ..., h_L]` of the ISI channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelTaps(Vec<f64>);

impl ChannelTaps {
    /// Validates that at least one tap is present and all taps are finite.
    pub fn new(taps: Vec<f64>) -> Result<Self, ChannelError> {
        if taps.is_empty() {
            return Err(ChannelError::EmptyTaps);
        }
        if let Some(&bad) = taps.iter().find(|t| !t.is_finite()) {
            return Err(ChannelError::NonFiniteTap(bad));
        }
        Ok(Self(taps))
    }

    /// Channel memory length L (number of taps).
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one tap
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// AWGN with variance `sigma2`; SNR is defined as `1 / sigma2` for the
/// unit-energy BPSK symbols used here.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NoiseModel {
    sigma2: f64,
}

impl NoiseModel {
    pub fn new(sigma2: f64) -> Result<Self, ChannelError> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(ChannelError::InvalidNoiseVariance(sigma2));
        }
        Ok(Self { sigma2 })
    }

    /// Noise variance for a given SNR in dB: `sigma2 = 10^(-snr_db / 10)`.
    pub fn from_snr_db(snr_db: f64) -> Result<Self, ChannelError> {
        Self::new(10f64.powf(-snr_db / 10.0))
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let normal = Normal::new(0.0, self.sigma2.sqrt()).expect("finite std dev");
        normal.sample(rng)
    }
}

/// Maps code bits to BPSK symbols: 0 ↦ +1.0, 1 ↦ −1.0.
///
/// Panics if a value outside {0, 1} is passed.
pub fn modulate(bits: &[u8]) -> Vec<f64> {
    bits.iter()
        .map(|&b| {
            assert!(b <= 1, "code bits must be 0 or 1, got {b}");
            1.0 - 2.0 * f64::from(b)
        })
        .collect()
}

/// Pushes a symbol sequence through the ISI channel and adds noise.
///
/// The input must start with the L−1 symbols preceding the stretch of
/// interest (guard or earlier data), so every output has a fully defined
/// regressor; the output therefore has `symbols.len() - (L - 1)` entries,
/// `out[j] = sum_k h_k * symbols[j + L - 1 - (k-1)] + w`.
pub fn transmit(
    symbols: &[f64],
    taps: &ChannelTaps,
    noise: &NoiseModel,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let l = taps.len();
    assert!(
        symbols.len() + 1 >= l,
        "need at least L-1 = {} symbols, got {}",
        l - 1,
        symbols.len()
    );
    let h = taps.as_slice();
    (l - 1..symbols.len())
        .map(|i| {
            let window = &symbols[i + 1 - l..=i];
            let isi: f64 = h
                .iter()
                .zip(window.iter().rev())
                .map(|(hk, s)| hk * s)
                .sum();
            isi + noise.sample(rng)
        })
        .collect()
}

/// Draws an L-tap Rayleigh-fading channel: taps i.i.d. `N(0, 1/L)`.
pub fn sample_rayleigh_channel(
    len: usize,
    rng: &mut impl Rng,
) -> Result<ChannelTaps, ChannelError> {
    if len == 0 {
        return Err(ChannelError::EmptyTaps);
    }
    let std = (1.0 / len as f64).sqrt();
    let taps = (0..len)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ChannelTaps::new(taps)
}

/// One transmitted frame: known guard, random training preamble, coded
/// payload, and the noisy observations of preamble and payload.
#[derive(Debug, Clone)]
pub struct Frame {
    /// L−1 fixed +1 symbols that open the frame.
    pub guard_symbols: Vec<f64>,
    /// Training symbols (±1), known at the receiver.
    pub preamble_symbols: Vec<f64>,
    /// BPSK symbols of the coded payload (±1).
    pub coded_symbols: Vec<f64>,
    /// Channel outputs aligned with the preamble.
    pub received_preamble: Vec<f64>,
    /// Channel outputs aligned with the payload.
    pub received_payload: Vec<f64>,
}

impl Frame {
    /// The L−1 known symbols immediately preceding the payload (preamble
    /// tail, falling back to guard symbols when the preamble is shorter).
    pub fn payload_prefix_symbols(&self) -> Vec<f64> {
        let l_minus_1 = self.guard_symbols.len();
        let mut history: Vec<f64> = self
            .guard_symbols
            .iter()
            .chain(self.preamble_symbols.iter())
            .copied()
            .collect();
        history.split_off(history.len() - l_minus_1)
    }
}

/// Assembles and transmits one frame: draws `training_len` uniform ±1
/// preamble symbols, prepends L−1 guard symbols (+1), appends the modulated
/// codeword, and runs a single contiguous [`transmit`] pass.
pub fn build_frame(
    codeword: &[u8],
    training_len: usize,
    taps: &ChannelTaps,
    noise: &NoiseModel,
    rng: &mut impl Rng,
) -> Frame {
    let l = taps.len();
    let guard_symbols = vec![1.0; l - 1];
    let preamble_symbols: Vec<f64> = (0..training_len)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let coded_symbols = modulate(codeword);

    let mut sequence = guard_symbols.clone();
    sequence.extend_from_slice(&preamble_symbols);
    sequence.extend_from_slice(&coded_symbols);

    let received = transmit(&sequence, taps, noise, rng);
    debug_assert_eq!(received.len(), training_len + codeword.len());
    let (received_preamble, received_payload) = received.split_at(training_len);

    Frame {
        guard_symbols,
        preamble_symbols,
        coded_symbols,
        received_preamble: received_preamble.to_vec(),
        received_payload: received_payload.to_vec(),
    }
}
