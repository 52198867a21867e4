//! End-to-end experiment runner: BER vs. SNR sweeps comparing the
//! ML-estimate receiver, the Bayesian marginalizing receiver, and a
//! perfect-CSI reference, before and after LDPC decoding — plus per-bit
//! calibration scatter data (estimated APP vs. true-channel APP).
//!
//! Reproducibility contract: every frame derives its own RNG from
//! `(master_seed, snr_index, frame_index, domain)`, and early stopping picks
//! the exact frame a sequential runner would have stopped at, so results are
//! byte-identical for a given master seed regardless of worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bayes_eq::{bayes_equalize, ml_bcjr_equalize, BayesEqConfig, DEFAULT_MC_SAMPLES};
use crate::bcjr::{bcjr_app, build_trellis};
use crate::channel::{build_frame, ChannelError, ChannelTaps, NoiseModel};
use crate::estimator::{ml_estimate, posterior, ChannelPosterior, EstimatorError, TrainingSet};
use crate::ldpc::{app_to_llr, build_code, decode_bp, LdpcCode, LdpcError, DEFAULT_BP_MAX_ITER};

/// Variance of the zero-mean Gaussian channel prior used by the Bayesian
/// receiver (taps are modeled as `N(0, prior_var · I)`).
pub const PRIOR_VAR: f64 = 1.0;

/// Payload bits per uncoded calibration frame.
pub const CAL_PAYLOAD_LEN: usize = 250;

/// Frames evaluated per parallel wave while scanning for the stop point.
const FRAME_BATCH: usize = 64;

/// Domain tags keeping experiment and calibration RNG streams disjoint.
const EXPERIMENT_DOMAIN: u64 = 1;
const CALIBRATION_DOMAIN: u64 = 2;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Ldpc(#[from] LdpcError),
    #[error("BAYEQ_THREADS must be a positive integer, got {0:?}")]
    Threads(String),
    #[error(transparent)]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
    #[error("target BER {0:e} not bracketed by positive points of the curve")]
    CurveNotBracketed(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which soft-output receiver an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Receiver {
    /// Least-squares channel estimate treated as exact, then BCJR.
    MlBcjr,
    /// Monte-Carlo average of BCJR over channel-posterior draws.
    Bayesian,
    /// BCJR at the true channel taps (genie reference).
    PerfectCsi,
}

impl Receiver {
    pub fn as_str(&self) -> &'static str {
        match self {
            Receiver::MlBcjr => "ml_bcjr",
            Receiver::Bayesian => "bayesian",
            Receiver::PerfectCsi => "perfect_csi",
        }
    }
}

impl std::fmt::Display for Receiver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Receiver {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ml_bcjr" => Ok(Receiver::MlBcjr),
            "bayesian" => Ok(Receiver::Bayesian),
            "perfect_csi" => Ok(Receiver::PerfectCsi),
            other => Err(HarnessError::Config(format!(
                "unknown receiver {other:?} (expected ml_bcjr, bayesian, or perfect_csi)"
            ))),
        }
    }
}

/// Full description of one BER-vs-SNR experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    /// True channel taps, fixed for every frame of the experiment.
    pub channel_taps: ChannelTaps,
    /// Training (preamble) symbols per frame.
    pub training_len: usize,
    /// Codeword length N of the LDPC code.
    pub block_len: usize,
    /// Random message bits per frame; the remaining K − message_len
    /// systematic bits are fixed zeros.
    pub message_len: usize,
    /// SNR sweep points in dB (SNR = 1/σ²).
    pub snr_db_list: Vec<f64>,
    pub receiver: Receiver,
    /// Posterior draws M per frame for the Bayesian receiver.
    pub mc_samples: usize,
    /// Hard cap on frames per SNR point.
    pub max_frames: usize,
    /// Early stop once this many frames have post-decoder errors.
    pub min_frame_errors: usize,
    pub master_seed: u64,
    /// Belief-propagation iteration budget.
    pub bp_max_iter: usize,
    /// Load the code from this alist file instead of constructing one.
    pub code_alist: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses the flat `key = value` config format. `#` starts a comment;
    /// unknown or duplicate keys are errors.
    ///
    /// Required: `channel_taps`, `training_len`, `snr_db_list`, `receiver`,
    /// `master_seed`. Defaults: `block_len` 1000, `message_len` 500,
    /// `mc_samples` 50, `max_frames` 10000, `min_frame_errors` 100,
    /// `bp_max_iter` 100, `code_alist` unset.
    pub fn from_key_values(text: &str) -> Result<Self, HarnessError> {
        let mut kv = KvMap::parse(text)?;
        let cfg = Self {
            channel_taps: kv.require_taps("channel_taps")?,
            training_len: kv.require_parsed("training_len")?,
            block_len: kv.optional_parsed("block_len")?.unwrap_or(1000),
            message_len: kv.optional_parsed("message_len")?.unwrap_or(500),
            snr_db_list: kv.require_f64_list("snr_db_list")?,
            receiver: kv.require("receiver")?.parse()?,
            mc_samples: kv.optional_parsed("mc_samples")?.unwrap_or(DEFAULT_MC_SAMPLES),
            max_frames: kv.optional_parsed("max_frames")?.unwrap_or(10_000),
            min_frame_errors: kv.optional_parsed("min_frame_errors")?.unwrap_or(100),
            master_seed: kv.require_parsed("master_seed")?,
            bp_max_iter: kv.optional_parsed("bp_max_iter")?.unwrap_or(DEFAULT_BP_MAX_ITER),
            code_alist: kv.take("code_alist").map(PathBuf::from),
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        Self::from_key_values(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.training_len == 0 {
            return bad("training_len must be positive".into());
        }
        if self.message_len == 0 {
            return bad("message_len must be positive".into());
        }
        if self.snr_db_list.is_empty() {
            return bad("snr_db_list must not be empty".into());
        }
        if self.mc_samples == 0 || self.max_frames == 0 || self.min_frame_errors == 0 {
            return bad("mc_samples, max_frames, min_frame_errors must be positive".into());
        }
        if self.bp_max_iter == 0 {
            return bad("bp_max_iter must be positive".into());
        }
        Ok(())
    }
}

/// Description of one calibration run (uncoded frames, one SNR).
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationConfig {
    pub channel_taps: ChannelTaps,
    pub training_len: usize,
    pub snr_db: f64,
    pub receiver: Receiver,
    /// Minimum number of (true, estimated) APP pairs to collect.
    pub num_bits: usize,
    pub mc_samples: usize,
    pub master_seed: u64,
}

impl CalibrationConfig {
    /// Same flat format as [`ExperimentConfig::from_key_values`].
    ///
    /// Required: `channel_taps`, `training_len`, `snr_db`, `receiver`,
    /// `master_seed`. Defaults: `num_bits` 10000, `mc_samples` 50.
    pub fn from_key_values(text: &str) -> Result<Self, HarnessError> {
        let mut kv = KvMap::parse(text)?;
        let cfg = Self {
            channel_taps: kv.require_taps("channel_taps")?,
            training_len: kv.require_parsed("training_len")?,
            snr_db: kv.require_parsed("snr_db")?,
            receiver: kv.require("receiver")?.parse()?,
            num_bits: kv.optional_parsed("num_bits")?.unwrap_or(10_000),
            mc_samples: kv.optional_parsed("mc_samples")?.unwrap_or(DEFAULT_MC_SAMPLES),
            master_seed: kv.require_parsed("master_seed")?,
        };
        kv.finish()?;
        if cfg.training_len == 0 || cfg.num_bits == 0 || cfg.mc_samples == 0 {
            return Err(HarnessError::Config(
                "training_len, num_bits, mc_samples must be positive".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        Self::from_key_values(&std::fs::read_to_string(path)?)
    }
}

/// Flat `key = value` map with strict unknown/duplicate-key handling.
struct KvMap(BTreeMap<String, String>);

impl KvMap {
    fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::Config(format!(
                    "line {}: expected `key = value`, got {:?}",
                    idx + 1,
                    line
                )));
            };
            let key = key.trim().to_string();
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(HarnessError::Config(format!("duplicate key {key:?}")));
            }
        }
        Ok(Self(map))
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn require(&mut self, key: &str) -> Result<String, HarnessError> {
        self.take(key)
            .ok_or_else(|| HarnessError::Config(format!("missing required key {key:?}")))
    }

    fn require_parsed<T: FromStr>(&mut self, key: &str) -> Result<T, HarnessError> {
        let value = self.require(key)?;
        value
            .parse()
            .map_err(|_| HarnessError::Config(format!("key {key:?}: cannot parse {value:?}")))
    }

    fn optional_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, HarnessError> {
        match self.take(key) {
            None => Ok(None),
            Some(value) => value.parse().map(Some).map_err(|_| {
                HarnessError::Config(format!("key {key:?}: cannot parse {value:?}"))
            }),
        }
    }

    fn f64_list(value: &str, key: &str) -> Result<Vec<f64>, HarnessError> {
        value
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>().map_err(|_| {
                    HarnessError::Config(format!("key {key:?}: bad number {t:?}"))
                })
            })
            .collect()
    }

    fn require_f64_list(&mut self, key: &str) -> Result<Vec<f64>, HarnessError> {
        let value = self.require(key)?;
        Self::f64_list(&value, key)
    }

    fn require_taps(&mut self, key: &str) -> Result<ChannelTaps, HarnessError> {
        Ok(ChannelTaps::new(self.require_f64_list(key)?)?)
    }

    fn finish(self) -> Result<(), HarnessError> {
        match self.0.into_keys().next() {
            None => Ok(()),
            Some(key) => Err(HarnessError::Config(format!("unknown key {key:?}"))),
        }
    }
}

/// Aggregated counts for one SNR point.
#[derive(Debug, Clone, Serialize)]
pub struct SnrPointResult {
    pub snr_db: f64,
    /// Hard-decision BER on coded bits straight out of the equalizer.
    pub ber_pre: f64,
    /// BER on message bits after belief propagation.
    pub ber_post: f64,
    /// Fraction of counted frames with at least one message-bit error.
    pub fer: f64,
    /// Frames whose bits were counted (excludes skipped frames).
    pub frames: usize,
    pub errors_pre: usize,
    pub errors_post: usize,
    /// Frames abandoned because the least-squares estimate was not
    /// computable (rank-deficient training); never counted in BER.
    pub skipped_frames: usize,
    /// Coded bits counted (frames × N).
    pub bits_pre: usize,
    /// Message bits counted (frames × K).
    pub bits_post: usize,
    pub wall_time_s: f64,
}

/// Everything a sweep produced, serializable as the `result.json` echo.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// Seed the LDPC construction ran under (the master seed).
    pub code_seed: u64,
    /// Actual message length K = N − rank(H) of the code used.
    pub code_message_len: usize,
    pub points: Vec<SnrPointResult>,
    pub total_wall_time_s: f64,
}

/// Per-bit calibration scatter: estimated APP against the APP a receiver
/// with the true channel would have produced.
#[derive(Debug, Clone)]
pub struct CalibrationRecord {
    /// (app_true, app_estimated) per payload bit.
    pub pairs: Vec<(f64, f64)>,
    pub skipped_frames: usize,
}

impl CalibrationRecord {
    /// Fraction of bits where the estimate is more extreme than the truth
    /// (farther from 1/2) — overconfidence.
    pub fn overconfident_fraction(&self) -> f64 {
        self.fraction(|(t, e)| (e - 0.5).abs() > (t - 0.5).abs())
    }

    /// Fraction of bits where the estimate is strictly less extreme than
    /// the truth — underconfidence. Bits exactly as extreme as the truth
    /// count toward neither fraction.
    pub fn underconfident_fraction(&self) -> f64 {
        self.fraction(|(t, e)| (e - 0.5).abs() < (t - 0.5).abs())
    }

    fn fraction(&self, pred: impl Fn(&(f64, f64)) -> bool) -> f64 {
        assert!(!self.pairs.is_empty(), "empty calibration record");
        self.pairs.iter().filter(|p| pred(p)).count() as f64 / self.pairs.len() as f64
    }
}

/// The runner's receiver dispatch. `DegenerateBayes` is a test-only variant
/// that forces the posterior to a point mass at the least-squares estimate,
/// which must reproduce the ML receiver exactly.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ReceiverImpl {
    Standard(Receiver),
    #[allow(dead_code)] // constructed only by tests
    DegenerateBayes,
}

/// Per-frame RNG: an injective packing of the coordinates into the ChaCha
/// seed, so streams never collide and never depend on platform hashing.
fn frame_rng(master_seed: u64, snr_index: usize, frame_index: usize, domain: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&(snr_index as u64).to_le_bytes());
    seed[16..24].copy_from_slice(&(frame_index as u64).to_le_bytes());
    seed[24..32].copy_from_slice(&domain.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

enum FrameOutcome {
    Counted {
        errors_pre: usize,
        errors_post: usize,
        frame_error: bool,
    },
    Skipped,
}

/// Runs the sweep described by `cfg`. Worker count comes from the
/// `BAYEQ_THREADS` environment variable when set (must be ≥ 1), otherwise
/// from the machine; the numbers produced are identical either way.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    run_experiment_impl(cfg, ReceiverImpl::Standard(cfg.receiver), env_threads()?)
}

fn env_threads() -> Result<Option<usize>, HarnessError> {
    match std::env::var("BAYEQ_THREADS") {
        Err(_) => Ok(None),
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(t) if t >= 1 => Ok(Some(t)),
            _ => Err(HarnessError::Threads(raw)),
        },
    }
}

pub(crate) fn run_experiment_impl(
    cfg: &ExperimentConfig,
    receiver: ReceiverImpl,
    threads: Option<usize>,
) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    let code = match &cfg.code_alist {
        Some(path) => LdpcCode::read_alist_file(path)?,
        None => build_code(cfg.block_len, cfg.master_seed)?,
    };
    if code.block_len() != cfg.block_len {
        return Err(HarnessError::Config(format!(
            "code block length {} does not match configured block_len {}",
            code.block_len(),
            cfg.block_len
        )));
    }
    if cfg.message_len > code.message_len() {
        return Err(HarnessError::Config(format!(
            "message_len {} exceeds code dimension K = {}",
            cfg.message_len,
            code.message_len()
        )));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()?;

    let start = Instant::now();
    let mut points = Vec::with_capacity(cfg.snr_db_list.len());
    for (snr_index, &snr_db) in cfg.snr_db_list.iter().enumerate() {
        points.push(run_snr_point(cfg, receiver, &code, snr_index, snr_db, &pool)?);
    }
    Ok(ExperimentResult {
        config: cfg.clone(),
        code_seed: cfg.master_seed,
        code_message_len: code.message_len(),
        points,
        total_wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn run_snr_point(
    cfg: &ExperimentConfig,
    receiver: ReceiverImpl,
    code: &LdpcCode,
    snr_index: usize,
    snr_db: f64,
    pool: &rayon::ThreadPool,
) -> Result<SnrPointResult, HarnessError> {
    let start = Instant::now();
    let noise = NoiseModel::from_snr_db(snr_db)?;

    // Frames are evaluated in parallel waves, then the stop point is
    // resolved sequentially over the ordered outcomes: the first frame at
    // which cumulative frame errors reach the threshold ends the point,
    // exactly as a one-frame-at-a-time runner would. Frames evaluated past
    // that index are discarded, so worker count cannot change the result.
    let mut outcomes: Vec<FrameOutcome> = Vec::new();
    let mut next = 0usize;
    let mut stop_at: Option<usize> = None;
    while next < cfg.max_frames && stop_at.is_none() {
        let hi = (next + FRAME_BATCH).min(cfg.max_frames);
        let mut wave: Vec<FrameOutcome> = pool.install(|| {
            (next..hi)
                .into_par_iter()
                .map(|frame_index| run_frame(cfg, receiver, code, snr_index, frame_index, &noise))
                .collect::<Result<Vec<_>, HarnessError>>()
        })?;
        outcomes.append(&mut wave);
        next = hi;

        let mut cumulative = 0usize;
        for (i, outcome) in outcomes.iter().enumerate() {
            if matches!(outcome, FrameOutcome::Counted { frame_error: true, .. }) {
                cumulative += 1;
                if cumulative >= cfg.min_frame_errors {
                    stop_at = Some(i + 1);
                    break;
                }
            }
        }
    }
    if let Some(cut) = stop_at {
        outcomes.truncate(cut);
    }

    let mut point = SnrPointResult {
        snr_db,
        ber_pre: 0.0,
        ber_post: 0.0,
        fer: 0.0,
        frames: 0,
        errors_pre: 0,
        errors_post: 0,
        skipped_frames: 0,
        bits_pre: 0,
        bits_post: 0,
        wall_time_s: 0.0,
    };
    let mut frame_errors = 0usize;
    for outcome in &outcomes {
        match outcome {
            FrameOutcome::Skipped => point.skipped_frames += 1,
            FrameOutcome::Counted {
                errors_pre,
                errors_post,
                frame_error,
            } => {
                point.frames += 1;
                point.errors_pre += errors_pre;
                point.errors_post += errors_post;
                point.bits_pre += code.block_len();
                point.bits_post += code.message_len();
                frame_errors += usize::from(*frame_error);
            }
        }
    }
    point.ber_pre = point.errors_pre as f64 / point.bits_pre as f64;
    point.ber_post = point.errors_post as f64 / point.bits_post as f64;
    point.fer = frame_errors as f64 / point.frames as f64;
    point.wall_time_s = start.elapsed().as_secs_f64();
    Ok(point)
}

fn run_frame(
    cfg: &ExperimentConfig,
    receiver: ReceiverImpl,
    code: &LdpcCode,
    snr_index: usize,
    frame_index: usize,
    noise: &NoiseModel,
) -> Result<FrameOutcome, HarnessError> {
    let mut rng = frame_rng(cfg.master_seed, snr_index, frame_index, EXPERIMENT_DOMAIN);
    let sigma2 = noise.sigma2();
    let l = cfg.channel_taps.len();

    let mut message = vec![0u8; code.message_len()];
    for bit in message.iter_mut().take(cfg.message_len) {
        *bit = rng.random::<bool>() as u8;
    }
    let codeword = code.encode(&message)?;
    let frame = build_frame(&codeword, cfg.training_len, &cfg.channel_taps, noise, &mut rng);
    // Drawn whether or not this receiver needs it, so every receiver sees
    // the same message/preamble/noise stream for a given frame.
    let bayes_seed = rng.next_u64();

    let prefix = frame.payload_prefix_symbols();
    let train = || {
        TrainingSet::from_preamble(&frame.preamble_symbols, &frame.received_preamble, l)
            .expect("frame preamble and observations are consistent by construction")
    };
    let bayes_cfg = BayesEqConfig {
        num_samples: cfg.mc_samples,
        seed: bayes_seed,
    };

    let app = match receiver {
        ReceiverImpl::Standard(Receiver::PerfectCsi) => {
            let trellis = build_trellis(&cfg.channel_taps, &prefix);
            bcjr_app(&trellis, &frame.received_payload, sigma2)
        }
        ReceiverImpl::Standard(Receiver::MlBcjr) => {
            match ml_bcjr_equalize(&train(), &frame.received_payload, sigma2, &prefix) {
                Ok(app) => app,
                Err(EstimatorError::InsufficientExcitation(_)) => {
                    return Ok(FrameOutcome::Skipped)
                }
                Err(e) => return Err(e.into()),
            }
        }
        ReceiverImpl::Standard(Receiver::Bayesian) => {
            let post = posterior(&train(), sigma2, PRIOR_VAR);
            bayes_equalize(&post, &frame.received_payload, sigma2, &prefix, &bayes_cfg)?
        }
        ReceiverImpl::DegenerateBayes => {
            let mean = match ml_estimate(&train(), sigma2) {
                Ok(taps) => nalgebra::DVector::from_row_slice(taps.as_slice()),
                Err(EstimatorError::InsufficientExcitation(_)) => {
                    return Ok(FrameOutcome::Skipped)
                }
                Err(e) => return Err(e.into()),
            };
            let point_mass = ChannelPosterior::new(mean, nalgebra::DMatrix::zeros(l, l))?;
            bayes_equalize(&point_mass, &frame.received_payload, sigma2, &prefix, &bayes_cfg)?
        }
    };

    let hard = app.hard_bits();
    let errors_pre = hard.iter().zip(&codeword).filter(|(a, b)| a != b).count();

    let llrs = app_to_llr(&app);
    let decoded = decode_bp(code, &llrs, cfg.bp_max_iter);
    let decoded_message = code.extract_message(&decoded.decoded_bits);
    let errors_post = decoded_message
        .iter()
        .zip(&message)
        .filter(|(a, b)| a != b)
        .count();

    Ok(FrameOutcome::Counted {
        errors_pre,
        errors_post,
        frame_error: errors_post > 0,
    })
}

/// Collects calibration scatter pairs until at least `cfg.num_bits` bits
/// are recorded: each uncoded frame contributes, per payload bit, the APP
/// under the true channel and the APP under the configured receiver.
pub fn run_calibration(cfg: &CalibrationConfig) -> Result<CalibrationRecord, HarnessError> {
    run_calibration_impl(cfg, env_threads()?)
}

fn run_calibration_impl(
    cfg: &CalibrationConfig,
    threads: Option<usize>,
) -> Result<CalibrationRecord, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()?;
    let noise = NoiseModel::from_snr_db(cfg.snr_db)?;

    let mut pairs = Vec::with_capacity(cfg.num_bits + CAL_PAYLOAD_LEN);
    let mut skipped_frames = 0usize;
    let mut next = 0usize;
    while pairs.len() < cfg.num_bits {
        let hi = next + 16;
        let waves: Vec<Option<Vec<(f64, f64)>>> = pool.install(|| {
            (next..hi)
                .into_par_iter()
                .map(|frame_index| calibration_frame(cfg, frame_index, &noise))
                .collect::<Result<Vec<_>, HarnessError>>()
        })?;
        next = hi;
        for wave in waves {
            match wave {
                None => skipped_frames += 1,
                Some(mut frame_pairs) => {
                    if pairs.len() < cfg.num_bits {
                        pairs.append(&mut frame_pairs);
                    }
                }
            }
        }
    }
    Ok(CalibrationRecord {
        pairs,
        skipped_frames,
    })
}

/// One uncoded calibration frame; `None` if the ML estimate was skipped
/// for insufficient excitation.
fn calibration_frame(
    cfg: &CalibrationConfig,
    frame_index: usize,
    noise: &NoiseModel,
) -> Result<Option<Vec<(f64, f64)>>, HarnessError> {
    let mut rng = frame_rng(cfg.master_seed, 0, frame_index, CALIBRATION_DOMAIN);
    let sigma2 = noise.sigma2();
    let l = cfg.channel_taps.len();

    let payload: Vec<u8> = (0..CAL_PAYLOAD_LEN)
        .map(|_| rng.random::<bool>() as u8)
        .collect();
    let frame = build_frame(&payload, cfg.training_len, &cfg.channel_taps, noise, &mut rng);
    let bayes_seed = rng.next_u64();

    let prefix = frame.payload_prefix_symbols();
    let app_true = bcjr_app(
        &build_trellis(&cfg.channel_taps, &prefix),
        &frame.received_payload,
        sigma2,
    );

    let app_est = match cfg.receiver {
        Receiver::PerfectCsi => app_true.clone(),
        Receiver::MlBcjr => {
            let train =
                TrainingSet::from_preamble(&frame.preamble_symbols, &frame.received_preamble, l)
                    .expect("frame preamble and observations are consistent by construction");
            match ml_bcjr_equalize(&train, &frame.received_payload, sigma2, &prefix) {
                Ok(app) => app,
                Err(EstimatorError::InsufficientExcitation(_)) => return Ok(None),
                Err(e) => return Err(e.into()),
            }
        }
        Receiver::Bayesian => {
            let train =
                TrainingSet::from_preamble(&frame.preamble_symbols, &frame.received_preamble, l)
                    .expect("frame preamble and observations are consistent by construction");
            let post = posterior(&train, sigma2, PRIOR_VAR);
            bayes_equalize(
                &post,
                &frame.received_payload,
                sigma2,
                &prefix,
                &BayesEqConfig {
                    num_samples: cfg.mc_samples,
                    seed: bayes_seed,
                },
            )?
        }
    };

    Ok(Some(
        app_true
            .probs()
            .iter()
            .copied()
            .zip(app_est.probs().iter().copied())
            .collect(),
    ))
}

/// SNR (dB) at which a post-decoder BER curve crosses `target`, by
/// log-linear interpolation between the first bracketing pair of points.
/// Points with zero BER cannot be interpolated through and are skipped.
pub fn snr_at_ber(points: &[SnrPointResult], target: f64) -> Result<f64, HarnessError> {
    assert!(target > 0.0, "target BER must be positive");
    for p in points {
        if p.ber_post == target {
            return Ok(p.snr_db);
        }
    }
    for w in points.windows(2) {
        let (b0, b1) = (w[0].ber_post, w[1].ber_post);
        if b0 <= 0.0 || b1 <= 0.0 {
            continue;
        }
        if (b0 - target) * (b1 - target) < 0.0 {
            let (lb0, lb1, lt) = (b0.ln(), b1.ln(), target.ln());
            return Ok(w[0].snr_db + (w[1].snr_db - w[0].snr_db) * (lt - lb0) / (lb1 - lb0));
        }
    }
    Err(HarnessError::CurveNotBracketed(target))
}

/// Horizontal dB gap between two post-decoder BER curves at `target`:
/// positive when `a` needs more SNR than `b` to reach it.
pub fn ber_gap_at(
    target: f64,
    a: &ExperimentResult,
    b: &ExperimentResult,
) -> Result<f64, HarnessError> {
    Ok(snr_at_ber(&a.points, target)? - snr_at_ber(&b.points, target)?)
}

/// Writes the sweep as plain CSV:
/// `snr_db,receiver,ber_pre,ber_post,fer,frames,errors_pre,errors_post`.
pub fn write_result_csv(result: &ExperimentResult, path: &Path) -> Result<(), HarnessError> {
    let mut out = String::from("snr_db,receiver,ber_pre,ber_post,fer,frames,errors_pre,errors_post\n");
    for p in &result.points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.snr_db,
            result.config.receiver,
            p.ber_pre,
            p.ber_post,
            p.fer,
            p.frames,
            p.errors_pre,
            p.errors_post
        ));
    }
    Ok(std::fs::write(path, out)?)
}

/// Writes the full result (config echo, seeds, per-point detail including
/// wall time) as pretty JSON.
pub fn write_result_json(result: &ExperimentResult, path: &Path) -> Result<(), HarnessError> {
    Ok(std::fs::write(path, serde_json::to_string_pretty(result)?)?)
}

/// Writes calibration pairs as `app_true,app_est` CSV.
pub fn write_calibration_csv(record: &CalibrationRecord, path: &Path) -> Result<(), HarnessError> {
    let mut out = String::from("app_true,app_est\n");
    for (t, e) in &record.pairs {
        out.push_str(&format!("{t},{e}\n"));
    }
    Ok(std::fs::write(path, out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config(receiver: Receiver) -> ExperimentConfig {
        ExperimentConfig {
            channel_taps: ChannelTaps::new(vec![0.9, -0.4]).unwrap(),
            training_len: 8,
            block_len: 24,
            message_len: 8,
            snr_db_list: vec![4.0],
            receiver,
            mc_samples: 1,
            max_frames: 40,
            min_frame_errors: 5,
            master_seed: 11,
            bp_max_iter: 30,
            code_alist: None,
        }
    }

    fn counts(r: &ExperimentResult) -> Vec<(f64, f64, f64, usize, usize, usize, usize)> {
        r.points
            .iter()
            .map(|p| {
                (
                    p.ber_pre,
                    p.ber_post,
                    p.fer,
                    p.frames,
                    p.errors_pre,
                    p.errors_post,
                    p.skipped_frames,
                )
            })
            .collect()
    }

    #[test]
    fn parses_full_config_with_comments_and_defaults() {
        let text = "\
# sweep description
channel_taps = 0.3482, 0.8704, 0.3482
training_len = 10
snr_db_list = 0, 2, 4   # dB
receiver = bayesian
master_seed = 42
";
        let cfg = ExperimentConfig::from_key_values(text).unwrap();
        assert_eq!(cfg.channel_taps.len(), 3);
        assert_eq!(cfg.training_len, 10);
        assert_eq!(cfg.snr_db_list, vec![0.0, 2.0, 4.0]);
        assert_eq!(cfg.receiver, Receiver::Bayesian);
        assert_eq!(cfg.master_seed, 42);
        assert_eq!(cfg.block_len, 1000);
        assert_eq!(cfg.message_len, 500);
        assert_eq!(cfg.mc_samples, DEFAULT_MC_SAMPLES);
        assert_eq!(cfg.max_frames, 10_000);
        assert_eq!(cfg.min_frame_errors, 100);
        assert_eq!(cfg.bp_max_iter, DEFAULT_BP_MAX_ITER);
        assert!(cfg.code_alist.is_none());
    }

    #[test]
    fn config_rejects_unknown_duplicate_and_missing_keys() {
        let base = "channel_taps = 1\ntraining_len = 5\nsnr_db_list = 0\nreceiver = ml_bcjr\nmaster_seed = 1\n";
        assert!(ExperimentConfig::from_key_values(base).is_ok());

        let unknown = format!("{base}mystery = 3\n");
        let err = ExperimentConfig::from_key_values(&unknown).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");

        let duplicate = format!("{base}master_seed = 2\n");
        let err = ExperimentConfig::from_key_values(&duplicate).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        let missing = "channel_taps = 1\n";
        let err = ExperimentConfig::from_key_values(missing).unwrap_err();
        assert!(err.to_string().contains("missing required"), "{err}");

        let bad_value = format!("{base}mc_samples = many\n");
        let err = ExperimentConfig::from_key_values(&bad_value).unwrap_err();
        assert!(err.to_string().contains("cannot parse"), "{err}");
    }

    #[test]
    fn receiver_names_round_trip() {
        for r in [Receiver::MlBcjr, Receiver::Bayesian, Receiver::PerfectCsi] {
            assert_eq!(r.as_str().parse::<Receiver>().unwrap(), r);
        }
        assert!("viterbi".parse::<Receiver>().is_err());
    }

    #[test]
    fn calibration_config_parses() {
        let text = "channel_taps = 1, 0.1\ntraining_len = 6\nsnr_db = 0\nreceiver = ml_bcjr\nmaster_seed = 7\n";
        let cfg = CalibrationConfig::from_key_values(text).unwrap();
        assert_eq!(cfg.num_bits, 10_000);
        assert_eq!(cfg.mc_samples, DEFAULT_MC_SAMPLES);
        assert_eq!(cfg.snr_db, 0.0);
    }

    #[test]
    fn results_are_identical_across_worker_counts() {
        // Early stopping is active in this config (high noise, low error
        // budget), which is exactly where naive parallel stopping diverges.
        let mut cfg = toy_config(Receiver::MlBcjr);
        cfg.snr_db_list = vec![-3.0, 4.0];
        let impl_ = ReceiverImpl::Standard(Receiver::MlBcjr);
        let one = run_experiment_impl(&cfg, impl_, Some(1)).unwrap();
        let three = run_experiment_impl(&cfg, impl_, Some(3)).unwrap();
        assert_eq!(counts(&one), counts(&three));
        assert!(one.points[0].frames < cfg.max_frames, "early stop never triggered");
    }

    #[test]
    fn repeated_runs_are_identical() {
        let cfg = toy_config(Receiver::Bayesian);
        let impl_ = ReceiverImpl::Standard(Receiver::Bayesian);
        let a = run_experiment_impl(&cfg, impl_, Some(2)).unwrap();
        let b = run_experiment_impl(&cfg, impl_, Some(2)).unwrap();
        assert_eq!(counts(&a), counts(&b));
    }

    #[test]
    fn degenerate_bayes_reproduces_ml_receiver() {
        // A point-mass posterior at the least-squares estimate must walk the
        // exact path of the ML receiver: same frames, same counts. With
        // M ∈ {1, 2, 4} the probability average is exact in floating point.
        for mc_samples in [1usize, 2, 4, 5] {
            let mut cfg = toy_config(Receiver::MlBcjr);
            cfg.mc_samples = mc_samples;
            let ml =
                run_experiment_impl(&cfg, ReceiverImpl::Standard(Receiver::MlBcjr), Some(2))
                    .unwrap();
            let degenerate =
                run_experiment_impl(&cfg, ReceiverImpl::DegenerateBayes, Some(2)).unwrap();
            assert_eq!(counts(&ml), counts(&degenerate), "M = {mc_samples}");
        }
    }

    #[test]
    fn perfect_csi_without_noise_is_error_free() {
        let mut cfg = toy_config(Receiver::PerfectCsi);
        cfg.snr_db_list = vec![300.0]; // σ² = 1e-30
        cfg.max_frames = 5;
        cfg.min_frame_errors = 1;
        let r = run_experiment(&cfg).unwrap();
        let p = &r.points[0];
        assert_eq!(p.errors_pre, 0);
        assert_eq!(p.errors_post, 0);
        assert_eq!(p.fer, 0.0);
        assert_eq!(p.frames, 5);
    }

    #[test]
    fn skipped_frames_are_recorded_and_excluded() {
        // Training length 1 with L = 2 cannot excite both taps: every frame
        // is rank-deficient for the ML receiver.
        let mut cfg = toy_config(Receiver::MlBcjr);
        cfg.training_len = 1;
        cfg.max_frames = 4;
        let r = run_experiment(&cfg).unwrap();
        let p = &r.points[0];
        assert_eq!(p.skipped_frames, 4);
        assert_eq!(p.frames, 0);
        assert!(p.ber_pre.is_nan());
    }

    #[test]
    fn calibration_perfect_csi_sits_on_the_diagonal() {
        let cfg = CalibrationConfig {
            channel_taps: ChannelTaps::new(vec![1.0, 0.1]).unwrap(),
            training_len: 6,
            snr_db: 0.0,
            receiver: Receiver::PerfectCsi,
            num_bits: 600,
            mc_samples: 1,
            master_seed: 3,
        };
        let record = run_calibration_impl(&cfg, Some(2)).unwrap();
        assert!(record.pairs.len() >= 600);
        assert!(record.pairs.iter().all(|(t, e)| t == e));
        assert_eq!(record.overconfident_fraction(), 0.0);
        assert_eq!(record.underconfident_fraction(), 0.0);
    }

    #[test]
    fn calibration_is_reproducible_across_worker_counts() {
        let cfg = CalibrationConfig {
            channel_taps: ChannelTaps::new(vec![1.0, 0.1]).unwrap(),
            training_len: 6,
            snr_db: 0.0,
            receiver: Receiver::MlBcjr,
            num_bits: 500,
            mc_samples: 1,
            master_seed: 3,
        };
        let a = run_calibration_impl(&cfg, Some(1)).unwrap();
        let b = run_calibration_impl(&cfg, Some(3)).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.skipped_frames, b.skipped_frames);
    }

    fn synthetic_result(points: &[(f64, f64)]) -> ExperimentResult {
        ExperimentResult {
            config: toy_config(Receiver::MlBcjr),
            code_seed: 0,
            code_message_len: 8,
            points: points
                .iter()
                .map(|&(snr_db, ber_post)| SnrPointResult {
                    snr_db,
                    ber_pre: 0.0,
                    ber_post,
                    fer: 0.0,
                    frames: 1,
                    errors_pre: 0,
                    errors_post: 0,
                    skipped_frames: 0,
                    bits_pre: 1,
                    bits_post: 1,
                    wall_time_s: 0.0,
                })
                .collect(),
            total_wall_time_s: 0.0,
        }
    }

    #[test]
    fn curve_interpolation_and_gaps() {
        let a = synthetic_result(&[(0.0, 1e-1), (2.0, 1e-2), (4.0, 1e-3), (6.0, 1e-4)]);
        // Same curve shifted right by exactly 1 dB.
        let b = synthetic_result(&[(1.0, 1e-1), (3.0, 1e-2), (5.0, 1e-3), (7.0, 1e-4)]);

        assert_eq!(snr_at_ber(&a.points, 1e-3).unwrap(), 4.0);
        let mid = snr_at_ber(&a.points, 10f64.powf(-2.5)).unwrap();
        assert!((mid - 3.0).abs() < 1e-12);

        assert_eq!(ber_gap_at(1e-3, &a, &a).unwrap(), 0.0);
        assert!((ber_gap_at(10f64.powf(-2.5), &b, &a).unwrap() - 1.0).abs() < 1e-12);

        assert!(matches!(
            snr_at_ber(&a.points, 1e-6),
            Err(HarnessError::CurveNotBracketed(_))
        ));
        // Zero-BER points cannot be interpolated through.
        let c = synthetic_result(&[(0.0, 1e-2), (2.0, 0.0)]);
        assert!(snr_at_ber(&c.points, 1e-3).is_err());
    }

    #[test]
    fn csv_and_json_outputs_are_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config(Receiver::MlBcjr);
        cfg.max_frames = 6;
        cfg.snr_db_list = vec![2.0, 6.0];
        let result = run_experiment(&cfg).unwrap();

        let csv_path = dir.path().join("result.csv");
        write_result_csv(&result, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "snr_db,receiver,ber_pre,ber_post,fer,frames,errors_pre,errors_post"
        );
        assert_eq!(lines.len(), 3);
        for line in &lines[1..] {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 8);
            assert_eq!(fields[1], "ml_bcjr");
            fields[2].parse::<f64>().unwrap();
        }

        let json_path = dir.path().join("result.json");
        write_result_json(&result, &json_path).unwrap();
        let parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(parsed["config"]["receiver"], "ml_bcjr");
        assert_eq!(parsed["points"].as_array().unwrap().len(), 2);
        assert!(parsed["points"][0]["wall_time_s"].as_f64().unwrap() >= 0.0);

        let cal = CalibrationRecord {
            pairs: vec![(0.25, 0.75), (1.0, 0.5)],
            skipped_frames: 0,
        };
        let cal_path = dir.path().join("calibration.csv");
        write_calibration_csv(&cal, &cal_path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&cal_path).unwrap(),
            "app_true,app_est\n0.25,0.75\n1,0.5\n"
        );
    }

    #[test]
    fn frame_rng_streams_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for master in 0..3u64 {
            for snr in 0..3usize {
                for frame in 0..3usize {
                    for domain in [EXPERIMENT_DOMAIN, CALIBRATION_DOMAIN] {
                        let mut rng = frame_rng(master, snr, frame, domain);
                        assert!(seen.insert(rng.next_u64()), "colliding streams");
                    }
                }
            }
        }
    }

    #[test]
    fn overconfidence_fractions_partition_correctly() {
        let record = CalibrationRecord {
            // Truth 0.75 (extremity 0.25, exact in binary): estimates more
            // extreme, less extreme, and exactly as extreme (mirrored).
            pairs: vec![(0.75, 0.95), (0.75, 0.6), (0.75, 0.25)],
            skipped_frames: 0,
        };
        assert!((record.overconfident_fraction() - 1.0 / 3.0).abs() < 1e-12);
        assert!((record.underconfident_fraction() - 1.0 / 3.0).abs() < 1e-12);
    }
}
