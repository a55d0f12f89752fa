//! The five per-rule complexity measures: Lempel-Ziv 76 phrase counting,
//! DEFLATE compression ratio, damage-spreading Lyapunov exponent, a
//! Krylov operator-spreading index, and the Wolfram class table.
//!
//! All measures are pure and deterministic given (rule, config, seed).

use once_cell::sync::Lazy;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eca::{self, EcaError, RuleId, SpacetimeGrid, State};
use crate::rng::{mix, rng_from_seed};

#[derive(Debug, thiserror::Error)]
pub enum ComplexityError {
    #[error("empty input sequence")]
    EmptyInput,
    #[error("invalid sizes: {0}")]
    InvalidSizes(String),
    #[error("state space too large: width {0} > 14")]
    StateSpaceTooLarge(usize),
    #[error(transparent)]
    Eca(#[from] EcaError),
}

/// Wolfram's four behavioral classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WolframClass {
    I,
    II,
    III,
    IV,
}

impl std::fmt::Display for WolframClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            WolframClass::I => "I",
            WolframClass::II => "II",
            WolframClass::III => "III",
            WolframClass::IV => "IV",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for WolframClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "I" => Ok(WolframClass::I),
            "II" => Ok(WolframClass::II),
            "III" => Ok(WolframClass::III),
            "IV" => Ok(WolframClass::IV),
            other => Err(format!("unknown Wolfram class {other:?}")),
        }
    }
}

/// Curated class table for the 88 canonical rules, expanded to all 256 via
/// the symmetry classes so membership is constant within each class.
static WOLFRAM_TABLE: Lazy<[WolframClass; 256]> = Lazy::new(|| {
    let raw = include_str!("../data/wolfram_classes.txt");
    let mut canon_class = std::collections::HashMap::new();
    for line in raw.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let rule: u8 = it.next().unwrap().parse().expect("bad rule in class table");
        let class: WolframClass = it.next().unwrap().parse().expect("bad class in table");
        canon_class.insert(rule, class);
    }
    assert_eq!(canon_class.len(), 88, "class table must cover 88 canonicals");
    let mut table = [WolframClass::I; 256];
    for r in RuleId::all() {
        let canon = eca::canonical_rule(r).code();
        table[r.code() as usize] = *canon_class
            .get(&canon)
            .unwrap_or_else(|| panic!("canonical rule {canon} missing from class table"));
    }
    table
});

/// Table lookup of a rule's Wolfram class. Total over all 256 rules.
pub fn wolfram_class(rule: RuleId) -> WolframClass {
    WOLFRAM_TABLE[rule.code() as usize]
}

// ---------------------------------------------------------------------------
// Lempel-Ziv 76
// ---------------------------------------------------------------------------

/// Suffix automaton over a binary alphabet with first-occurrence end
/// positions, used to answer "does this factor occur starting before i"
/// during the exhaustive-history parse in overall linear time.
struct SuffixAutomaton {
    next: Vec<[i32; 2]>,
    link: Vec<i32>,
    len: Vec<u32>,
    /// end index (inclusive) of the first occurrence of the state's factors
    first: Vec<u32>,
    last: usize,
}

impl SuffixAutomaton {
    fn new(capacity: usize) -> Self {
        let mut sam = SuffixAutomaton {
            next: Vec::with_capacity(2 * capacity + 2),
            link: Vec::with_capacity(2 * capacity + 2),
            len: Vec::with_capacity(2 * capacity + 2),
            first: Vec::with_capacity(2 * capacity + 2),
            last: 0,
        };
        sam.push_state(0, -1, u32::MAX);
        sam
    }

    fn push_state(&mut self, len: u32, link: i32, first: u32) -> usize {
        self.next.push([-1, -1]);
        self.link.push(link);
        self.len.push(len);
        self.first.push(first);
        self.next.len() - 1
    }

    fn extend(&mut self, pos: u32, ch: usize) {
        let cur = self.push_state(self.len[self.last] + 1, -1, pos);
        let mut p = self.last as i32;
        while p >= 0 && self.next[p as usize][ch] < 0 {
            self.next[p as usize][ch] = cur as i32;
            p = self.link[p as usize];
        }
        if p < 0 {
            self.link[cur] = 0;
        } else {
            let q = self.next[p as usize][ch] as usize;
            if self.len[p as usize] + 1 == self.len[q] {
                self.link[cur] = q as i32;
            } else {
                let clone = self.push_state(self.len[p as usize] + 1, self.link[q], self.first[q]);
                self.next[clone] = self.next[q];
                while p >= 0 && self.next[p as usize][ch] == q as i32 {
                    self.next[p as usize][ch] = clone as i32;
                    p = self.link[p as usize];
                }
                self.link[q] = clone as i32;
                self.link[cur] = clone as i32;
            }
        }
        self.last = cur;
    }
}

/// LZ76 exhaustive-history phrase count of a 0/1 sequence.
///
/// Scanning left to right, each phrase is the shortest prefix of the
/// remainder that cannot be reproduced by copying from a start position
/// inside the prior history (self-overlapping copies allowed); a final fully
/// reproducible phrase still counts.
pub fn lz76(seq: &[u8]) -> Result<usize, ComplexityError> {
    if seq.is_empty() {
        return Err(ComplexityError::EmptyInput);
    }
    let n = seq.len();
    let mut sam = SuffixAutomaton::new(n);
    for (i, &b) in seq.iter().enumerate() {
        debug_assert!(b <= 1, "lz76 input must be 0/1 symbols");
        sam.extend(i as u32, b as usize);
    }
    let mut phrases = 0usize;
    let mut i = 0usize;
    while i < n {
        let mut state = 0usize;
        let mut k = 0usize; // matched (reproducible) length so far
        while i + k < n {
            let ch = seq[i + k] as usize;
            let nxt = sam.next[state][ch];
            if nxt < 0 {
                break;
            }
            // factor s[i..i+k+1); reproducible iff its first occurrence
            // starts at or before i-1, i.e. ends at or before i+k-1
            if sam.first[nxt as usize] as usize + 1 > i + k {
                break;
            }
            state = nxt as usize;
            k += 1;
        }
        // phrase = reproducible run plus one terminating new symbol (absent
        // when the sequence ends mid-run)
        i += (k + 1).min(n - i);
        phrases += 1;
    }
    Ok(phrases)
}

/// Grid-level LZ76: flatten row-major, normalize the phrase count by
/// n / log2(n) so values are comparable across grid sizes.
pub fn lz_grid(grid: &SpacetimeGrid) -> Result<f64, ComplexityError> {
    let seq = grid.flatten();
    let n = seq.len() as f64;
    let c = lz76(&seq)? as f64;
    Ok(c * n.log2() / n)
}

/// Compressor identity recorded in report metadata.
pub const COMPRESSOR_ID: &str = "flate2/zlib-deflate level 9";

/// Compressed/raw byte ratio of the bit-packed grid under a DEFLATE-family
/// stream at maximum compression level.
pub fn compression_complexity(grid: &SpacetimeGrid) -> f64 {
    use flate2::write::ZlibEncoder;
    use flate2::Compression;
    use std::io::Write;
    let raw = grid.packed();
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::best());
    enc.write_all(&raw).expect("in-memory compression");
    let compressed = enc.finish().expect("in-memory compression");
    compressed.len() as f64 / raw.len() as f64
}

/// Slope floor contributed by a trial whose damage dies out.
pub const LYAPUNOV_DEAD_FLOOR: f64 = -1.0;

/// Damage-spreading Lyapunov estimate.
///
/// Per trial: evolve a random state and a copy with one flipped cell in
/// parallel, track the Hamming distance H(t), and least-squares fit the
/// slope of ln H(t) over the steps where the damage is alive. A trial whose
/// damage annihilates contributes the floor of -1.0 so means stay finite;
/// surviving-trial slopes are clamped to the same floor.
pub fn lyapunov(
    rule: RuleId,
    width: usize,
    trials: usize,
    steps: usize,
    seed: u64,
) -> Result<f64, ComplexityError> {
    if width < 16 || trials == 0 || steps < 2 {
        return Err(ComplexityError::InvalidSizes(format!(
            "need width >= 16, trials >= 1, steps >= 2 (got {width}, {trials}, {steps})"
        )));
    }
    let mut total = 0.0;
    for trial in 0..trials {
        let tseed = mix(seed, trial as u64);
        let mut a = State::random(width, 0.5, tseed);
        let mut b = a.clone();
        let flip_at = rng_from_seed(mix(tseed, 0xf11b)).gen_range(0..width);
        b.flip(flip_at);
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(steps);
        let mut died = false;
        for t in 1..=steps {
            a = eca::step(rule, &a)?;
            b = eca::step(rule, &b)?;
            let h = a.hamming(&b);
            if h == 0 {
                died = true;
                break; // identical states stay identical forever
            }
            pts.push((t as f64, (h as f64).ln()));
        }
        let slope = if pts.len() < 2 {
            LYAPUNOV_DEAD_FLOOR
        } else {
            let s = least_squares_slope(&pts);
            if died {
                s.clamp(LYAPUNOV_DEAD_FLOOR, 0.0)
            } else {
                s.max(LYAPUNOV_DEAD_FLOOR)
            }
        };
        total += slope;
    }
    Ok(total / trials as f64)
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for &(x, y) in pts {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Largest enumerable ring width for the Krylov proxy.
pub const KRYLOV_MAX_WIDTH: usize = 14;

/// Krylov operator-spreading index of a rule on the enumerable 2^width
/// periodic state space, observable = centered occupancy of cell 0.
///
/// The one-step linear operator U maps a function on states to its push
/// forward along the deterministic transition. An orthonormal Krylov basis
/// {K_n} is built from {O0, U O0, U^2 O0, ...} by Gram-Schmidt with
/// re-orthogonalization, truncating when the residual norm drops below
/// 1e-10; the score is the horizon-averaged mean basis index occupied by the
/// normalized evolved observable.
pub fn krylov(rule: RuleId, width: usize, horizon: usize) -> Result<f64, ComplexityError> {
    krylov_observable(rule, width, horizon, 0)
}

/// [`krylov`] with the occupancy observable on an arbitrary cell; rotating
/// the observed cell must not change the score (shift equivariance).
pub fn krylov_observable(
    rule: RuleId,
    width: usize,
    horizon: usize,
    cell: usize,
) -> Result<f64, ComplexityError> {
    if width > KRYLOV_MAX_WIDTH {
        return Err(ComplexityError::StateSpaceTooLarge(width));
    }
    if width < eca::MIN_WIDTH || horizon == 0 || cell >= width {
        return Err(ComplexityError::InvalidSizes(format!(
            "krylov needs {} <= width <= {KRYLOV_MAX_WIDTH}, horizon >= 1, cell < width",
            eca::MIN_WIDTH
        )));
    }
    let n_states = 1usize << width;
    // deterministic transition map on packed states
    let mut next = vec![0usize; n_states];
    for (s, nx) in next.iter_mut().enumerate() {
        let mut st = State::zeros(width);
        for i in 0..width {
            st.set(i, (s >> i) & 1 == 1);
        }
        let stepped = eca::step(rule, &st)?;
        let mut packed = 0usize;
        for i in 0..width {
            if stepped.get(i) {
                packed |= 1 << i;
            }
        }
        *nx = packed;
    }
    let apply_u = |v: &[f64]| {
        let mut out = vec![0.0; n_states];
        for s in 0..n_states {
            out[next[s]] += v[s];
        }
        out
    };
    // centered occupancy of `cell`, normalized
    let mut o0: Vec<f64> = (0..n_states)
        .map(|s| ((s >> cell) & 1) as f64 - 0.5)
        .collect();
    let norm0 = norm(&o0);
    o0.iter_mut().for_each(|x| *x /= norm0);

    // Krylov basis by Gram-Schmidt with one re-orthogonalization pass
    let mut basis: Vec<Vec<f64>> = vec![o0.clone()];
    let mut kvec = o0.clone();
    for _ in 0..horizon {
        kvec = apply_u(&kvec);
        let mut resid = kvec.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&resid, b);
                for (r, bv) in resid.iter_mut().zip(b) {
                    *r -= c * bv;
                }
            }
        }
        let rn = norm(&resid);
        if rn < 1e-10 {
            break;
        }
        resid.iter_mut().for_each(|x| *x /= rn);
        basis.push(resid);
    }

    let mut acc = 0.0;
    let mut evolved = o0;
    for _ in 1..=horizon {
        evolved = apply_u(&evolved);
        let nsq = dot(&evolved, &evolved);
        if nsq < 1e-24 {
            continue; // observable annihilated; contributes nothing
        }
        for (n_idx, b) in basis.iter().enumerate() {
            let c = dot(b, &evolved);
            acc += n_idx as f64 * c * c / nsq;
        }
    }
    Ok(acc / horizon as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// Aggregate report
// ---------------------------------------------------------------------------

/// Sizes and seeds for one full complexity report. Deterministic: the same
/// config always yields the same report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityConfig {
    /// simulation ring width for the grid-based measures
    pub grid_width: usize,
    /// evolution steps for the grid-based measures
    pub grid_steps: usize,
    pub lyapunov_width: usize,
    pub lyapunov_trials: usize,
    pub lyapunov_steps: usize,
    pub krylov_width: usize,
    pub krylov_horizon: usize,
    pub seed: u64,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        ComplexityConfig {
            grid_width: 256,
            grid_steps: 1000,
            lyapunov_width: 256,
            lyapunov_trials: 32,
            lyapunov_steps: 200,
            krylov_width: 10,
            krylov_horizon: 32,
            seed: 0,
        }
    }
}

/// The five complexity scores attached to one rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub rule: RuleId,
    pub wolfram_class: WolframClass,
    pub lempel_ziv: f64,
    pub compression: f64,
    pub lyapunov: f64,
    pub krylov: f64,
    pub compressor: String,
}

/// Run all five measures for one rule with the configured sizes and seeds.
pub fn report(rule: RuleId, config: &ComplexityConfig) -> Result<ComplexityReport, ComplexityError> {
    let grid_seed = mix(config.seed, rule.code() as u64);
    let init = State::random(config.grid_width, 0.5, grid_seed);
    let grid = eca::evolve_seeded(rule, &init, config.grid_steps, grid_seed)?;
    Ok(ComplexityReport {
        rule,
        wolfram_class: wolfram_class(rule),
        lempel_ziv: lz_grid(&grid)?,
        compression: compression_complexity(&grid),
        lyapunov: lyapunov(
            rule,
            config.lyapunov_width,
            config.lyapunov_trials,
            config.lyapunov_steps,
            mix(config.seed, 0x4c59 ^ rule.code() as u64),
        )?,
        krylov: krylov(rule, config.krylov_width, config.krylov_horizon)?,
        compressor: COMPRESSOR_ID.to_string(),
    })
}

/// Reports for many rules on the rayon pool, output ordered by rule id.
pub fn sweep(
    rules: &[RuleId],
    config: &ComplexityConfig,
) -> Result<Vec<ComplexityReport>, ComplexityError> {
    let mut sorted: Vec<RuleId> = rules.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted
        .par_iter()
        .map(|&r| report(r, config))
        .collect::<Result<Vec<_>, _>>()
}
