//! Exact per-symbol a-posteriori probabilities on the ISI trellis
//! (forward-backward / BCJR), computed in the log domain with per-step
//! renormalization so extreme noise variances and amplitudes stay finite.
//!
//! The trellis state is the last L−1 symbols; the initial state is known
//! (the training preamble precedes the payload) and the terminal
//! distribution is uniform — frames carry no tail bits.

use crate::channel::ChannelTaps;

/// LLR magnitude cap applied wherever probabilities become log ratios.
pub const LLR_CLAMP: f64 = 40.0;

/// Per-symbol posterior probabilities `p(b_i = +1 | x, h)`, in payload order.
#[derive(Debug, Clone, PartialEq)]
pub struct AppVector(Vec<f64>);

impl AppVector {
    /// Wraps probabilities, checking every entry lies in [0, 1].
    pub fn new(probs: Vec<f64>) -> Self {
        assert!(
            probs.iter().all(|p| (0.0..=1.0).contains(p)),
            "APP entries must be probabilities in [0, 1]"
        );
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// LLRs `log(p(bit=0)/p(bit=1)) = log(p/(1-p))`, clamped to ±40;
    /// positive means the bit is more likely 0 (symbol +1).
    pub fn llrs(&self) -> Vec<f64> {
        self.0.iter().map(|&p| llr_from_prob(p)).collect()
    }

    /// Hard symbol decisions, ties broken toward +1.
    pub fn hard_symbols(&self) -> Vec<f64> {
        self.0
            .iter()
            .map(|&p| if p >= 0.5 { 1.0 } else { -1.0 })
            .collect()
    }

    /// Hard bit decisions under the mapping +1 ↦ 0, ties toward bit 0.
    pub fn hard_bits(&self) -> Vec<u8> {
        self.0.iter().map(|&p| u8::from(p < 0.5)).collect()
    }
}

pub(crate) fn llr_from_prob(p: f64) -> f64 {
    (p / (1.0 - p)).ln().clamp(-LLR_CLAMP, LLR_CLAMP)
}

/// Numerically stable log(exp(a) + exp(b)); -inf entries behave as zeros.
#[inline]
fn logsumexp2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi; // also covers both = -inf
    }
    let d = lo - hi;
    // exp underflows past -745; skipping earlier costs nothing at f64 precision.
    if d < -37.0 {
        hi
    } else {
        hi + d.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Time-invariant ISI trellis: state = last L−1 symbols, 2 branches per
/// state (input symbol +1 or −1), each labeled with the noiseless channel
/// output for that (state, input) pair.
#[derive(Debug, Clone)]
pub struct Trellis {
    channel_len: usize,
    num_states: usize,
    /// `next_state[2 s + u]`, input u: 0 ↦ symbol +1, 1 ↦ symbol −1.
    next_state: Vec<usize>,
    /// `branch_output[2 s + u]`: noiseless output of the transition.
    branch_output: Vec<f64>,
    /// Log of the (unnormalized) initial state distribution.
    log_initial: Vec<f64>,
}

fn symbol_of(bit: usize) -> f64 {
    1.0 - 2.0 * bit as f64
}

impl Trellis {
    fn with_log_initial(taps: &ChannelTaps, log_initial: Vec<f64>) -> Self {
        let l = taps.len();
        let h = taps.as_slice();
        let num_states = 1usize << (l - 1);
        let mask = num_states - 1;
        let mut next_state = vec![0usize; 2 * num_states];
        let mut branch_output = vec![0.0f64; 2 * num_states];
        for s in 0..num_states {
            // Bit j of the state is the symbol sent j+1 steps ago.
            let mut isi = 0.0;
            for k in 1..l {
                isi += h[k] * symbol_of((s >> (k - 1)) & 1);
            }
            for u in 0..2 {
                next_state[2 * s + u] = ((s << 1) | u) & mask;
                branch_output[2 * s + u] = h[0] * symbol_of(u) + isi;
            }
        }
        Self {
            channel_len: l,
            num_states,
            next_state,
            branch_output,
            log_initial,
        }
    }

    /// Trellis whose initial state is fixed by the L−1 known symbols
    /// preceding the payload, given in transmission order.
    pub fn with_known_prefix(taps: &ChannelTaps, prefix_symbols: &[f64]) -> Self {
        let l = taps.len();
        assert_eq!(
            prefix_symbols.len(),
            l - 1,
            "need exactly L-1 prefix symbols"
        );
        assert!(
            prefix_symbols.iter().all(|s| s.abs() == 1.0),
            "prefix symbols must be ±1"
        );
        let mut state = 0usize;
        // prefix[last] was sent one step before the payload → state bit 0.
        for (j, s) in prefix_symbols.iter().rev().enumerate() {
            if *s < 0.0 {
                state |= 1 << j;
            }
        }
        let num_states = 1usize << (l - 1);
        let mut log_initial = vec![f64::NEG_INFINITY; num_states];
        log_initial[state] = 0.0;
        Self::with_log_initial(taps, log_initial)
    }

    /// Trellis with no knowledge of the symbols before the payload
    /// (uniform initial distribution).
    pub fn with_uniform_initial(taps: &ChannelTaps) -> Self {
        let num_states = 1usize << (taps.len() - 1);
        Self::with_log_initial(taps, vec![0.0; num_states])
    }

    pub fn channel_len(&self) -> usize {
        self.channel_len
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_transitions(&self) -> usize {
        2 * self.num_states
    }

    /// Successor state for (state, input bit).
    pub fn next_state(&self, state: usize, input: usize) -> usize {
        self.next_state[2 * state + input]
    }

    /// Noiseless channel output for (state, input bit).
    pub fn branch_output(&self, state: usize, input: usize) -> f64 {
        self.branch_output[2 * state + input]
    }
}

/// Builds the equalizer trellis for taps `h` with the initial state pinned
/// to the known symbols immediately preceding the payload.
pub fn build_trellis(taps: &ChannelTaps, initial_symbols: &[f64]) -> Trellis {
    Trellis::with_known_prefix(taps, initial_symbols)
}

/// Forward-backward pass returning `p(b_i = +1 | received, h)` for every
/// payload position, with a uniform terminal state distribution.
pub fn bcjr_app(trellis: &Trellis, received: &[f64], sigma2: f64) -> AppVector {
    assert!(
        sigma2.is_finite() && sigma2 > 0.0,
        "noise variance must be positive, got {sigma2}"
    );
    assert!(
        received.iter().all(|x| x.is_finite()),
        "received samples must be finite"
    );
    let n = received.len();
    let s_count = trellis.num_states;
    if n == 0 {
        return AppVector::new(Vec::new());
    }

    let neg_inv_2s2 = -0.5 / sigma2;
    let next = &trellis.next_state;
    let out = &trellis.branch_output;

    // Forward pass; alpha[i] is stored for the fused backward pass.
    let mut alpha = vec![f64::NEG_INFINITY; n * s_count];
    let mut prev: Vec<f64> = trellis.log_initial.clone();
    let mut cur = vec![f64::NEG_INFINITY; s_count];
    for i in 0..n {
        alpha[i * s_count..(i + 1) * s_count].copy_from_slice(&prev);
        let x = received[i];
        cur.fill(f64::NEG_INFINITY);
        for s in 0..s_count {
            let a = prev[s];
            if a == f64::NEG_INFINITY {
                continue;
            }
            for u in 0..2 {
                let d = x - out[2 * s + u];
                let t = a + d * d * neg_inv_2s2;
                let ns = next[2 * s + u];
                cur[ns] = logsumexp2(cur[ns], t);
            }
        }
        // Renormalize so the recursion never drifts toward ±inf.
        let m = cur.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(m.is_finite(), "forward recursion lost all mass");
        for c in cur.iter_mut() {
            *c -= m;
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    // Backward pass fused with the per-symbol posteriors.
    let mut probs = vec![0.0; n];
    let mut beta = vec![0.0; s_count]; // uniform terminal
    let mut new_beta = vec![f64::NEG_INFINITY; s_count];
    for i in (0..n).rev() {
        let x = received[i];
        let a_row = &alpha[i * s_count..(i + 1) * s_count];
        let mut lp = [f64::NEG_INFINITY; 2];
        for s in 0..s_count {
            let mut b_acc = f64::NEG_INFINITY;
            let a = a_row[s];
            for u in 0..2 {
                let d = x - out[2 * s + u];
                let t = d * d * neg_inv_2s2 + beta[next[2 * s + u]];
                b_acc = logsumexp2(b_acc, t);
                if a != f64::NEG_INFINITY {
                    lp[u] = logsumexp2(lp[u], a + t);
                }
            }
            new_beta[s] = b_acc;
        }
        let m = new_beta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(m.is_finite(), "backward recursion lost all mass");
        for b in new_beta.iter_mut() {
            *b -= m;
        }
        std::mem::swap(&mut beta, &mut new_beta);
        probs[i] = sigmoid(lp[0] - lp[1]);
    }

    AppVector::new(probs)
}
