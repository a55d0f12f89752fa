//! Independent reference implementations used as oracles by the
//! acceptance suite.

use ecalab_core::eca::{RuleId, State};

/// Naive truth-table step: looks every neighborhood up bit by bit, no
/// packing tricks shared with the production kernel.
pub fn naive_step(rule: RuleId, s: &State) -> State {
    let w = s.width();
    let code = rule.code();
    let mut bits = Vec::with_capacity(w);
    for i in 0..w {
        let l = s.get((i + w - 1) % w) as u8;
        let c = s.get(i) as u8;
        let r = s.get((i + 1) % w) as u8;
        let idx = (l << 2) | (c << 1) | r;
        bits.push((code >> idx) & 1 == 1);
    }
    State::from_bits(&bits)
}

/// Quadratic-time exhaustive-history parser, straight from the
/// definition: the next phrase extends one symbol past the longest prefix
/// reproducible from an earlier start (overlap allowed).
pub fn lz76_reference(seq: &[u8]) -> usize {
    let n = seq.len();
    let mut i = 0;
    let mut phrases = 0;
    while i < n {
        // longest l such that seq[i..i+l) occurs starting at some p < i
        let mut l_max = 0;
        for p in 0..i {
            let mut l = 0;
            while i + l < n && seq[p + l] == seq[i + l] {
                l += 1;
            }
            l_max = l_max.max(l);
        }
        i += (l_max + 1).min(n - i);
        phrases += 1;
    }
    phrases
}
