//! Link-level simulation of BPSK over frequency-selective (ISI) channels,
//! comparing two soft-output receivers feeding an LDPC decoder:
//!
//! * **ML-BCJR**: least-squares channel estimation from a short training
//!   preamble, followed by exact a-posteriori symbol probabilities (BCJR)
//!   computed as if the estimate were the true channel.
//! * **Bayesian**: the Gaussian posterior over the channel taps is retained
//!   and the symbol posteriors are averaged over it by Monte Carlo, so the
//!   equalizer's soft outputs account for channel uncertainty.
//!
//! The crate also ships the measurement harness (BER/FER sweeps, calibration
//! scatter data) and slow-but-trusted reference implementations
//! ([`oracles`]) used to validate the fast paths.
//!
//! Bit/symbol conventions used throughout:
//!
//! * code bits are `u8` values in {0, 1}; BPSK maps bit 0 ↦ +1.0, bit 1 ↦ −1.0;
//! * a-posteriori probabilities ([`bcjr::AppVector`]) store p(symbol = +1);
//! * log-likelihood ratios are `log(p(bit=0) / p(bit=1))`, i.e. positive when
//!   the bit is more likely 0, clamped to ±40.

pub mod bayes_eq;
pub mod bcjr;
pub mod channel;
pub mod estimator;
pub mod harness;
pub mod ldpc;
pub mod oracles;

pub use bcjr::AppVector;
pub use channel::{ChannelTaps, Frame, NoiseModel};
pub use estimator::{ChannelPosterior, TrainingSet};
pub use harness::{ExperimentConfig, ExperimentResult, Receiver};
pub use ldpc::LdpcCode;
