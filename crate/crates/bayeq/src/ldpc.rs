//! Regular (3,6) rate-1/2 LDPC code: progressive-edge-growth construction,
//! systematic encoding via GF(2) Gauss–Jordan elimination, and sum-product
//! belief-propagation decoding driven by the equalizer's posteriors.
//!
//! LLR convention throughout: `llr = log(p(bit=0)/p(bit=1))`, so positive
//! LLRs favor bit 0 (symbol +1). All messages are clamped to ±40.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bcjr::{llr_from_prob, AppVector};

/// Default belief-propagation iteration budget.
pub const DEFAULT_BP_MAX_ITER: usize = 100;

/// Column weight of constructed codes.
const VAR_DEGREE: usize = 3;
/// Row weight of constructed codes.
const CHECK_DEGREE: usize = 6;
/// Construction restarts before giving up.
const MAX_BUILD_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum LdpcError {
    #[error("block length must be even and at least 12, got {0}")]
    InvalidBlockLength(usize),
    #[error("code construction failed after {0} attempts")]
    ConstructionFailed(usize),
    #[error("message length {got} does not match code dimension {expected}")]
    MessageLength { got: usize, expected: usize },
    #[error("alist parse error: {0}")]
    AlistParse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A binary linear code described by a sparse parity-check matrix, with a
/// systematic encoder derived from its reduced row-echelon form.
///
/// Codes from [`build_code`] are (3,6)-regular with `num_checks = N/2`;
/// [`from_alist`](LdpcCode::from_alist) accepts arbitrary sparse matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LdpcCode {
    block_len: usize,
    /// Check index → sorted variable indices on that parity constraint.
    check_adj: Vec<Vec<u32>>,
    /// Variable index → sorted check indices it participates in.
    var_adj: Vec<Vec<u32>>,
    /// Systematic (message) positions: columns without an RREF pivot.
    message_cols: Vec<usize>,
    /// Pivot columns, one per RREF row, ascending.
    pivot_cols: Vec<usize>,
    /// Per pivot row: bit mask over the K message positions whose parity
    /// gives that pivot bit. Packed 64 bits per word.
    parity_gen: Vec<Vec<u64>>,
}

/// Outcome of a belief-propagation decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeResult {
    /// Hard-decision codeword, length N.
    pub decoded_bits: Vec<u8>,
    /// True iff the output satisfies every parity check.
    pub converged: bool,
    /// Full iterations run before convergence (0 if the channel hard
    /// decision was already a codeword) or `max_iter` if never converged.
    pub iterations_used: usize,
}

impl LdpcCode {
    /// Builds the code from check-side adjacency, deriving the variable
    /// adjacency and the systematic encoder.
    fn from_adjacency(block_len: usize, check_adj: Vec<Vec<u32>>) -> Result<Self, LdpcError> {
        let mut check_adj = check_adj;
        for row in &mut check_adj {
            row.sort_unstable();
            if row.windows(2).any(|w| w[0] == w[1]) {
                return Err(LdpcError::AlistParse(
                    "duplicate variable in a check row".into(),
                ));
            }
            if row.iter().any(|&v| v as usize >= block_len) {
                return Err(LdpcError::AlistParse(
                    "variable index out of range".into(),
                ));
            }
        }
        let mut var_adj = vec![Vec::new(); block_len];
        for (c, row) in check_adj.iter().enumerate() {
            for &v in row {
                var_adj[v as usize].push(c as u32);
            }
        }

        // Gauss–Jordan over GF(2) on bit-packed rows.
        let words = block_len.div_ceil(64);
        let mut rows: Vec<Vec<u64>> = check_adj
            .iter()
            .map(|row| {
                let mut packed = vec![0u64; words];
                for &v in row {
                    packed[v as usize / 64] ^= 1u64 << (v as usize % 64);
                }
                packed
            })
            .collect();
        let get = |row: &[u64], col: usize| row[col / 64] >> (col % 64) & 1 == 1;

        let mut pivot_cols = Vec::new();
        let mut rank = 0usize;
        for col in 0..block_len {
            if rank == rows.len() {
                break;
            }
            let Some(pr) = (rank..rows.len()).find(|&i| get(&rows[i], col)) else {
                continue;
            };
            rows.swap(rank, pr);
            let pivot_row = rows[rank].clone();
            for (i, row) in rows.iter_mut().enumerate() {
                if i != rank && get(row, col) {
                    for (w, p) in row.iter_mut().zip(&pivot_row) {
                        *w ^= p;
                    }
                }
            }
            pivot_cols.push(col);
            rank += 1;
        }

        let pivot_set: Vec<bool> = {
            let mut s = vec![false; block_len];
            for &c in &pivot_cols {
                s[c] = true;
            }
            s
        };
        let message_cols: Vec<usize> = (0..block_len).filter(|&c| !pivot_set[c]).collect();
        let msg_index: Vec<usize> = {
            let mut idx = vec![usize::MAX; block_len];
            for (k, &c) in message_cols.iter().enumerate() {
                idx[c] = k;
            }
            idx
        };
        let msg_words = message_cols.len().div_ceil(64).max(1);
        let parity_gen = (0..rank)
            .map(|r| {
                let mut mask = vec![0u64; msg_words];
                for &c in &message_cols {
                    if get(&rows[r], c) {
                        mask[msg_index[c] / 64] ^= 1u64 << (msg_index[c] % 64);
                    }
                }
                mask
            })
            .collect();

        Ok(Self {
            block_len,
            check_adj,
            var_adj,
            message_cols,
            pivot_cols,
            parity_gen,
        })
    }

    /// Codeword length N.
    pub fn block_len(&self) -> usize {
        self.block_len
    }

    /// Message length K = N − rank(H).
    pub fn message_len(&self) -> usize {
        self.message_cols.len()
    }

    /// Number of parity-check rows (including any linearly dependent ones).
    pub fn num_checks(&self) -> usize {
        self.check_adj.len()
    }

    /// Systematic codeword positions carrying the message, ascending.
    pub fn message_positions(&self) -> &[usize] {
        &self.message_cols
    }

    /// Variable indices on each parity check.
    pub fn check_adjacency(&self) -> &[Vec<u32>] {
        &self.check_adj
    }

    /// Check indices touching each variable.
    pub fn var_adjacency(&self) -> &[Vec<u32>] {
        &self.var_adj
    }

    /// Systematic encoding: message bits land on `message_positions()`,
    /// parity bits are solved from the reduced row-echelon form.
    pub fn encode(&self, message: &[u8]) -> Result<Vec<u8>, LdpcError> {
        if message.len() != self.message_cols.len() {
            return Err(LdpcError::MessageLength {
                got: message.len(),
                expected: self.message_cols.len(),
            });
        }
        debug_assert!(message.iter().all(|&b| b <= 1), "bits must be 0/1");
        let msg_words = self.message_cols.len().div_ceil(64).max(1);
        let mut packed = vec![0u64; msg_words];
        for (k, &bit) in message.iter().enumerate() {
            packed[k / 64] |= u64::from(bit) << (k % 64);
        }

        let mut codeword = vec![0u8; self.block_len];
        for (k, &c) in self.message_cols.iter().enumerate() {
            codeword[c] = message[k];
        }
        for (r, mask) in self.parity_gen.iter().enumerate() {
            let parity = mask
                .iter()
                .zip(&packed)
                .fold(0u32, |acc, (m, b)| acc ^ (m & b).count_ones());
            codeword[self.pivot_cols[r]] = (parity & 1) as u8;
        }
        Ok(codeword)
    }

    /// Reads the message back out of a codeword's systematic positions.
    pub fn extract_message(&self, codeword: &[u8]) -> Vec<u8> {
        assert_eq!(codeword.len(), self.block_len, "codeword length mismatch");
        self.message_cols.iter().map(|&c| codeword[c]).collect()
    }

    /// True iff every parity check is satisfied.
    pub fn is_codeword(&self, bits: &[u8]) -> bool {
        assert_eq!(bits.len(), self.block_len, "codeword length mismatch");
        self.check_adj
            .iter()
            .all(|row| row.iter().fold(0u8, |acc, &v| acc ^ bits[v as usize]) == 0)
    }

    /// Serializes the parity-check matrix in the alist text format:
    /// `N M`, max degrees, per-column and per-row degree lists, then
    /// 1-indexed adjacency lists (columns first).
    pub fn to_alist(&self) -> String {
        let max_col = self.var_adj.iter().map(Vec::len).max().unwrap_or(0);
        let max_row = self.check_adj.iter().map(Vec::len).max().unwrap_or(0);
        let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(" ");
        let mut out = format!("{} {}\n{} {}\n", self.block_len, self.num_checks(), max_col, max_row);
        out.push_str(&join(&mut self.var_adj.iter().map(|a| a.len().to_string())));
        out.push('\n');
        out.push_str(&join(&mut self.check_adj.iter().map(|a| a.len().to_string())));
        out.push('\n');
        for adj in &self.var_adj {
            out.push_str(&join(&mut adj.iter().map(|&c| (c + 1).to_string())));
            out.push('\n');
        }
        for adj in &self.check_adj {
            out.push_str(&join(&mut adj.iter().map(|&v| (v + 1).to_string())));
            out.push('\n');
        }
        out
    }

    /// Parses an alist-format parity-check matrix and derives an encoder
    /// for it. Zero-padded adjacency lines (as some writers emit for
    /// irregular codes) are accepted.
    pub fn from_alist(text: &str) -> Result<Self, LdpcError> {
        let bad = |msg: &str| LdpcError::AlistParse(msg.into());
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut ints = |expect: &str| -> Result<Vec<usize>, LdpcError> {
            lines
                .next()
                .ok_or_else(|| bad(&format!("missing {expect}")))?
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| bad(&format!("bad integer {t:?} in {expect}")))
                })
                .collect()
        };

        let header = ints("size header")?;
        let &[n, m] = header.as_slice() else {
            return Err(bad("size header must be exactly `N M`"));
        };
        if n == 0 || m == 0 {
            return Err(bad("N and M must be positive"));
        }
        let _max_degrees = ints("max-degree line")?;
        let col_deg = ints("column degree list")?;
        let row_deg = ints("row degree list")?;
        if col_deg.len() != n || row_deg.len() != m {
            return Err(bad("degree list length does not match header"));
        }

        let mut read_adj = |count: usize,
                            degrees: &[usize],
                            limit: usize,
                            what: &str|
         -> Result<Vec<Vec<u32>>, LdpcError> {
            (0..count)
                .map(|i| {
                    let entries: Vec<usize> = ints(what)?
                        .into_iter()
                        .filter(|&t| t != 0) // zero-padding
                        .collect();
                    if entries.len() != degrees[i] {
                        return Err(bad(&format!(
                            "{what} {i} has {} entries, degree says {}",
                            entries.len(),
                            degrees[i]
                        )));
                    }
                    entries
                        .into_iter()
                        .map(|t| {
                            if t > limit {
                                Err(bad(&format!("{what} {i}: index {t} out of range")))
                            } else {
                                Ok((t - 1) as u32)
                            }
                        })
                        .collect()
                })
                .collect()
        };
        let var_adj = read_adj(n, &col_deg, m, "column adjacency")?;
        let check_adj = read_adj(m, &row_deg, n, "row adjacency")?;

        let code = Self::from_adjacency(n, check_adj)?;
        // The column lists are redundant with the row lists; insist they agree.
        let mut sorted_cols = var_adj;
        for col in &mut sorted_cols {
            col.sort_unstable();
        }
        if sorted_cols != code.var_adj {
            return Err(bad("column and row adjacency lists disagree"));
        }
        Ok(code)
    }

    /// Reads an alist file from disk.
    pub fn read_alist_file(path: &std::path::Path) -> Result<Self, LdpcError> {
        Self::from_alist(&std::fs::read_to_string(path)?)
    }

    /// Writes the alist representation to disk.
    pub fn write_alist_file(&self, path: &std::path::Path) -> Result<(), LdpcError> {
        Ok(std::fs::write(path, self.to_alist())?)
    }
}

/// Builds a (3,6)-regular rate-1/2 code of length `n` by progressive edge
/// growth: each variable's edges go to the parity check farthest from it in
/// the Tanner graph built so far (preferring unreached checks, then lowest
/// degree), which greedily maximizes girth. Deterministic for a fixed seed.
pub fn build_code(n: usize, seed: u64) -> Result<LdpcCode, LdpcError> {
    if n < 12 || n % 2 != 0 {
        return Err(LdpcError::InvalidBlockLength(n));
    }
    for attempt in 0..MAX_BUILD_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt as u64));
        if let Some(check_adj) = try_peg(n, &mut rng) {
            return LdpcCode::from_adjacency(n, check_adj);
        }
    }
    Err(LdpcError::ConstructionFailed(MAX_BUILD_ATTEMPTS))
}

/// One progressive-edge-growth attempt; `None` if it paints itself into a
/// corner (some variable has no eligible check left).
fn try_peg(n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<u32>>> {
    let num_checks = n / 2;
    let mut check_adj: Vec<Vec<u32>> = vec![Vec::with_capacity(CHECK_DEGREE); num_checks];
    let mut var_adj: Vec<Vec<u32>> = vec![Vec::with_capacity(VAR_DEGREE); n];

    for v in 0..n {
        for _ in 0..VAR_DEGREE {
            let dist = check_distances(v, &var_adj, &check_adj, num_checks, n);
            // Eligible: spare capacity and not already wired to v.
            let eligible = |c: usize| {
                check_adj[c].len() < CHECK_DEGREE && !var_adj[v].contains(&(c as u32))
            };
            let unreached: Vec<usize> =
                (0..num_checks).filter(|&c| dist[c].is_none() && eligible(c)).collect();
            let pool = if !unreached.is_empty() {
                unreached
            } else {
                let far = (0..num_checks)
                    .filter(|&c| eligible(c))
                    .filter_map(|c| dist[c].map(|d| (c, d)))
                    .collect::<Vec<_>>();
                let max_d = far.iter().map(|&(_, d)| d).max()?;
                far.into_iter().filter(|&(_, d)| d == max_d).map(|(c, _)| c).collect()
            };
            if pool.is_empty() {
                return None;
            }
            let min_deg = pool.iter().map(|&c| check_adj[c].len()).min().unwrap();
            let best: Vec<usize> = pool
                .into_iter()
                .filter(|&c| check_adj[c].len() == min_deg)
                .collect();
            let chosen = best[rng.random_range(0..best.len())];
            check_adj[chosen].push(v as u32);
            var_adj[v].push(chosen as u32);
        }
    }
    Some(check_adj)
}

/// BFS distances from variable `v` to every check in the bipartite Tanner
/// graph (`None` = unreached). Checks adjacent to `v` are at distance 1.
fn check_distances(
    v: usize,
    var_adj: &[Vec<u32>],
    check_adj: &[Vec<u32>],
    num_checks: usize,
    num_vars: usize,
) -> Vec<Option<usize>> {
    let mut dist = vec![None; num_checks];
    let mut var_seen = vec![false; num_vars];
    var_seen[v] = true;
    let mut frontier = vec![v];
    let mut depth = 0;
    while !frontier.is_empty() {
        depth += 1;
        let mut new_checks = Vec::new();
        for &u in &frontier {
            for &c in &var_adj[u] {
                if dist[c as usize].is_none() {
                    dist[c as usize] = Some(depth);
                    new_checks.push(c as usize);
                }
            }
        }
        let mut next = Vec::new();
        for &c in &new_checks {
            for &u in &check_adj[c] {
                if !var_seen[u as usize] {
                    var_seen[u as usize] = true;
                    next.push(u as usize);
                }
            }
        }
        frontier = next;
    }
    dist
}

/// Converts equalizer posteriors `p(symbol = +1)` to decoder LLRs
/// `log(p(bit=0)/p(bit=1))` under the mapping bit 0 ↦ +1, clamped to ±40.
pub fn app_to_llr(app: &AppVector) -> Vec<f64> {
    app.probs().iter().map(|&p| llr_from_prob(p)).collect()
}

/// Sum-product belief propagation on the Tanner graph. Check messages use
/// prefix/suffix tanh products (no division); all messages clamp to ±40.
/// Stops as soon as the running hard decision satisfies every check —
/// including before the first iteration. Non-convergence is reported via
/// the flag, with the final hard decision returned as-is.
pub fn decode_bp(code: &LdpcCode, llrs: &[f64], max_iter: usize) -> DecodeResult {
    assert_eq!(llrs.len(), code.block_len(), "LLR length mismatch");
    assert!(llrs.iter().all(|l| l.is_finite()), "LLRs must be finite");

    // CSR edge layout, row-major over checks.
    let num_edges: usize = code.check_adj.iter().map(Vec::len).sum();
    let mut edge_var = Vec::with_capacity(num_edges);
    let mut row_start = Vec::with_capacity(code.check_adj.len() + 1);
    row_start.push(0);
    for row in &code.check_adj {
        edge_var.extend(row.iter().map(|&v| v as usize));
        row_start.push(edge_var.len());
    }

    let mut bits: Vec<u8> = llrs.iter().map(|&l| u8::from(l < 0.0)).collect();
    if code.is_codeword(&bits) {
        return DecodeResult {
            decoded_bits: bits,
            converged: true,
            iterations_used: 0,
        };
    }

    let max_row = code.check_adj.iter().map(Vec::len).max().unwrap_or(0);
    let mut v2c: Vec<f64> = edge_var.iter().map(|&v| llrs[v].clamp(-40.0, 40.0)).collect();
    let mut c2v = vec![0.0f64; num_edges];
    let mut totals = vec![0.0f64; code.block_len()];
    let mut tanhs = vec![0.0f64; max_row];
    let mut prefix = vec![0.0f64; max_row + 1];
    let mut suffix = vec![0.0f64; max_row + 1];

    for iter in 1..=max_iter {
        for c in 0..code.check_adj.len() {
            let (s, e) = (row_start[c], row_start[c + 1]);
            let w = e - s;
            for k in 0..w {
                tanhs[k] = (v2c[s + k] / 2.0).tanh();
            }
            prefix[0] = 1.0;
            for k in 0..w {
                prefix[k + 1] = prefix[k] * tanhs[k];
            }
            suffix[w] = 1.0;
            for k in (0..w).rev() {
                suffix[k] = suffix[k + 1] * tanhs[k];
            }
            for k in 0..w {
                let product = prefix[k] * suffix[k + 1];
                c2v[s + k] = (2.0 * product.atanh()).clamp(-40.0, 40.0);
            }
        }

        totals.copy_from_slice(llrs);
        for (e, &v) in edge_var.iter().enumerate() {
            totals[v] += c2v[e];
        }
        for (e, &v) in edge_var.iter().enumerate() {
            v2c[e] = (totals[v] - c2v[e]).clamp(-40.0, 40.0);
        }

        for (b, &t) in bits.iter_mut().zip(&totals) {
            *b = u8::from(t < 0.0);
        }
        if code.is_codeword(&bits) {
            return DecodeResult {
                decoded_bits: bits,
                converged: true,
                iterations_used: iter,
            };
        }
    }
    DecodeResult {
        decoded_bits: bits,
        converged: false,
        iterations_used: max_iter,
    }
}
