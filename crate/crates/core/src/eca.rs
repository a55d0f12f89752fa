//! Exact simulation of the 256 elementary cellular automata.
//!
//! States are bit vectors on a periodic (wraparound) boundary, packed 64
//! cells per word so a step is a handful of word operations per 64 cells.
//! All public contracts are expressed over logical bits; packing is internal.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{mix, rng_from_seed};

/// Minimum state width: a radius-1 neighborhood needs three distinct cells.
pub const MIN_WIDTH: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum EcaError {
    #[error("invalid state: width {0} < {MIN_WIDTH}")]
    WidthTooSmall(usize),
    #[error("window {t_len}x{x_len} does not fit grid {rows}x{width}")]
    WindowTooLarge {
        t_len: usize,
        x_len: usize,
        rows: usize,
        width: usize,
    },
    #[error("evolve needs steps >= 1")]
    NoSteps,
    #[error("grid file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An 8-bit Wolfram rule number. Bit `n` of the code is the successor bit for
/// the neighborhood whose three bits `(left, center, right)` read as the
/// binary number `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RuleId(pub u8);

impl RuleId {
    pub fn code(self) -> u8 {
        self.0
    }

    /// Successor bit for one neighborhood. Total over all inputs.
    pub fn apply(self, left: bool, center: bool, right: bool) -> bool {
        let n = ((left as u8) << 2) | ((center as u8) << 1) | (right as u8);
        (self.0 >> n) & 1 == 1
    }

    /// Mirror the left/right roles in the truth table.
    pub fn reflect(self) -> RuleId {
        let mut out = 0u8;
        for n in 0..8u8 {
            let (l, c, r) = ((n >> 2) & 1, (n >> 1) & 1, n & 1);
            let m = (r << 2) | (c << 1) | l;
            out |= ((self.0 >> m) & 1) << n;
        }
        RuleId(out)
    }

    /// Flip all input and output bits.
    pub fn complement(self) -> RuleId {
        let mut out = 0u8;
        for n in 0..8u8 {
            out |= (1 - ((self.0 >> (7 - n)) & 1)) << n;
        }
        RuleId(out)
    }

    /// All 256 rules in ascending order.
    pub fn all() -> impl Iterator<Item = RuleId> {
        (0u16..256).map(|c| RuleId(c as u8))
    }
}

impl std::fmt::Display for RuleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A binary state on a width-`W` periodic ring, packed 64 cells per word.
/// Unused high bits of the last word are kept zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct State {
    width: usize,
    words: Vec<u64>,
}

impl State {
    pub fn zeros(width: usize) -> State {
        State {
            width,
            words: vec![0; width.div_ceil(64)],
        }
    }

    pub fn from_bits(bits: &[bool]) -> State {
        let mut s = State::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            s.set(i, b);
        }
        s
    }

    /// Each cell drawn independently Bernoulli(density) from the lab
    /// generator; same (width, density, seed) gives a bit-identical state.
    pub fn random(width: usize, density: f64, seed: u64) -> State {
        let mut rng = rng_from_seed(seed);
        let mut s = State::zeros(width);
        for i in 0..width {
            s.set(i, rng.gen::<f64>() < density);
        }
        s
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.width);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, b: bool) {
        debug_assert!(i < self.width);
        if b {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn flip(&mut self, i: usize) {
        self.words[i / 64] ^= 1 << (i % 64);
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.width).map(|i| self.get(i)).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn hamming(&self, other: &State) -> usize {
        assert_eq!(self.width, other.width);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    /// Cyclic rotation: cell `i` of the result is cell `(i + k) mod W`.
    pub fn rotate(&self, k: usize) -> State {
        let w = self.width;
        let k = k % w;
        let mut out = State::zeros(w);
        for i in 0..w {
            out.set(i, self.get((i + k) % w));
        }
        out
    }

    /// Packed little-endian bytes, LSB-first within each byte, padded to a
    /// byte boundary. The on-disk row encoding.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.width.div_ceil(8)];
        for i in 0..self.width {
            if self.get(i) {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_packed_bytes(bytes: &[u8], width: usize) -> Result<State, EcaError> {
        if bytes.len() != width.div_ceil(8) {
            return Err(EcaError::Format(format!(
                "row byte length {} does not match width {}",
                bytes.len(),
                width
            )));
        }
        let mut s = State::zeros(width);
        for i in 0..width {
            if (bytes[i / 8] >> (i % 8)) & 1 == 1 {
                s.set(i, true);
            }
        }
        // padding bits past `width` must be zero
        for i in width..bytes.len() * 8 {
            if (bytes[i / 8] >> (i % 8)) & 1 == 1 {
                return Err(EcaError::Format("nonzero padding bits in row".into()));
            }
        }
        Ok(s)
    }

    /// Neighbor-left view: bit i of the result is cell i-1 (periodic).
    fn shifted_left_neighbor(&self) -> Vec<u64> {
        let w = self.width;
        let nw = self.words.len();
        let mut out = vec![0u64; nw];
        out[0] = self.words[0] << 1;
        for j in 1..nw {
            out[j] = (self.words[j] << 1) | (self.words[j - 1] >> 63);
        }
        // wrap cell W-1 into position 0
        if self.get(w - 1) {
            out[0] |= 1;
        } else {
            out[0] &= !1;
        }
        mask_tail(&mut out, w);
        out
    }

    /// Neighbor-right view: bit i of the result is cell i+1 (periodic).
    fn shifted_right_neighbor(&self) -> Vec<u64> {
        let w = self.width;
        let nw = self.words.len();
        let mut out = vec![0u64; nw];
        for j in 0..nw - 1 {
            out[j] = (self.words[j] >> 1) | (self.words[j + 1] << 63);
        }
        out[nw - 1] = self.words[nw - 1] >> 1;
        // wrap cell 0 into position W-1
        let hi = w - 1;
        if self.get(0) {
            out[hi / 64] |= 1 << (hi % 64);
        }
        mask_tail(&mut out, w);
        out
    }
}

fn mask_tail(words: &mut [u64], width: usize) {
    let rem = width % 64;
    if rem != 0 {
        let last = words.len() - 1;
        words[last] &= (1u64 << rem) - 1;
    }
}

/// One synchronous update of every cell under `rule` with periodic boundary.
///
/// Word-parallel kernel: the successor is the OR over the rule's eight
/// truth-table entries of the AND of the matching left/center/right masks.
pub fn step(rule: RuleId, s: &State) -> Result<State, EcaError> {
    let w = s.width;
    if w < MIN_WIDTH {
        return Err(EcaError::WidthTooSmall(w));
    }
    let left = s.shifted_left_neighbor();
    let center = &s.words;
    let right = s.shifted_right_neighbor();
    let nw = center.len();
    let mut acc = vec![0u64; nw];
    for n in 0..8u8 {
        if (rule.0 >> n) & 1 == 0 {
            continue;
        }
        let (lb, cb, rb) = (n & 4 != 0, n & 2 != 0, n & 1 != 0);
        for j in 0..nw {
            let l = if lb { left[j] } else { !left[j] };
            let c = if cb { center[j] } else { !center[j] };
            let r = if rb { right[j] } else { !right[j] };
            acc[j] |= l & c & r;
        }
    }
    mask_tail(&mut acc, w);
    Ok(State {
        width: w,
        words: acc,
    })
}

/// The full T x W evolution of one rule from one initial state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpacetimeGrid {
    rule: RuleId,
    seed: u64,
    rows: Vec<State>,
}

impl SpacetimeGrid {
    pub fn rule(&self) -> RuleId {
        self.rule
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn width(&self) -> usize {
        self.rows[0].width()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, t: usize) -> &State {
        &self.rows[t]
    }

    pub fn rows(&self) -> &[State] {
        &self.rows
    }

    pub fn get(&self, t: usize, x: usize) -> bool {
        self.rows[t].get(x)
    }

    /// Row-major flattening to a 0/1 byte sequence (one byte per cell).
    pub fn flatten(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_rows() * self.width());
        for row in &self.rows {
            for i in 0..row.width() {
                out.push(row.get(i) as u8);
            }
        }
        out
    }

    /// Row-major bit packing (8 cells/byte, rows padded to byte boundary).
    pub fn packed(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for row in &self.rows {
            out.extend_from_slice(&row.to_packed_bytes());
        }
        out
    }
}

/// Evolve `init` for `steps` applications of `rule`. The grid has `steps + 1`
/// rows with row 0 equal to `init`.
pub fn evolve(rule: RuleId, init: &State, steps: usize) -> Result<SpacetimeGrid, EcaError> {
    evolve_seeded(rule, init, steps, 0)
}

/// Like [`evolve`], recording the seed that produced `init` in the grid
/// metadata for provenance.
pub fn evolve_seeded(
    rule: RuleId,
    init: &State,
    steps: usize,
    seed: u64,
) -> Result<SpacetimeGrid, EcaError> {
    if steps == 0 {
        return Err(EcaError::NoSteps);
    }
    let mut rows = Vec::with_capacity(steps + 1);
    rows.push(init.clone());
    for t in 0..steps {
        let next = step(rule, &rows[t])?;
        rows.push(next);
    }
    Ok(SpacetimeGrid { rule, seed, rows })
}

/// A t_len x x_len slice of a grid, possibly wrapping the periodic spatial
/// boundary. Contents are bit-identical to the source region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub t0: usize,
    pub x0: usize,
    rows: Vec<State>,
}

impl Window {
    pub fn t_len(&self) -> usize {
        self.rows.len()
    }

    pub fn x_len(&self) -> usize {
        self.rows[0].width()
    }

    pub fn row(&self, t: usize) -> &State {
        &self.rows[t]
    }

    pub fn rows(&self) -> &[State] {
        &self.rows
    }

    pub fn get(&self, t: usize, x: usize) -> bool {
        self.rows[t].get(x)
    }

    /// Copy the region at (t0, x0) out of `grid`, wrapping columns.
    pub fn extract(
        grid: &SpacetimeGrid,
        t0: usize,
        x0: usize,
        t_len: usize,
        x_len: usize,
    ) -> Result<Window, EcaError> {
        let (rows_n, width) = (grid.num_rows(), grid.width());
        if t_len == 0 || t0 + t_len > rows_n || x_len > width {
            return Err(EcaError::WindowTooLarge {
                t_len,
                x_len,
                rows: rows_n,
                width,
            });
        }
        let mut rows = Vec::with_capacity(t_len);
        for t in t0..t0 + t_len {
            let src = grid.row(t);
            let mut row = State::zeros(x_len);
            for x in 0..x_len {
                row.set(x, src.get((x0 + x) % width));
            }
            rows.push(row);
        }
        Ok(Window { t0, x0, rows })
    }
}

/// Draw a random window origin and extract it. Same grid + same seed gives
/// an identical window; the origin is recorded for reproducibility.
pub fn sample_window(
    grid: &SpacetimeGrid,
    t_len: usize,
    x_len: usize,
    seed: u64,
) -> Result<Window, EcaError> {
    sample_window_with_margin(grid, t_len, x_len, 0, seed)
}

/// Window sampling that keeps `t_margin` rows after the window inside the
/// grid (used when a target state `t_margin` steps ahead is also needed).
pub fn sample_window_with_margin(
    grid: &SpacetimeGrid,
    t_len: usize,
    x_len: usize,
    t_margin: usize,
    seed: u64,
) -> Result<Window, EcaError> {
    let (rows_n, width) = (grid.num_rows(), grid.width());
    if t_len == 0 || t_len + t_margin > rows_n || x_len > width {
        return Err(EcaError::WindowTooLarge {
            t_len,
            x_len,
            rows: rows_n,
            width,
        });
    }
    let mut rng = rng_from_seed(mix(seed, 0x77_69_6e_64));
    let t0 = rng.gen_range(0..=rows_n - t_len - t_margin);
    let x0 = rng.gen_range(0..width);
    Window::extract(grid, t0, x0, t_len, x_len)
}

/// One orbit of rules under reflection, complementation and their
/// composition. `canonical` is the smallest member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmetryClass {
    pub canonical: RuleId,
    pub members: Vec<RuleId>,
}

/// Partition all 256 rules into their 88 symmetry classes, ordered by
/// canonical rule number.
pub fn symmetry_classes() -> Vec<SymmetryClass> {
    let mut canon_of = [0u8; 256];
    for r in RuleId::all() {
        let orbit = [
            r,
            r.reflect(),
            r.complement(),
            r.reflect().complement(),
        ];
        canon_of[r.0 as usize] = orbit.iter().map(|x| x.0).min().unwrap();
    }
    let mut classes: Vec<SymmetryClass> = Vec::new();
    for c in 0..=255u8 {
        if canon_of[c as usize] == c {
            let members: Vec<RuleId> = RuleId::all()
                .filter(|r| canon_of[r.0 as usize] == c)
                .collect();
            classes.push(SymmetryClass {
                canonical: RuleId(c),
                members,
            });
        }
    }
    classes
}

/// Canonical (smallest) representative of a rule's symmetry class.
pub fn canonical_rule(r: RuleId) -> RuleId {
    [r, r.reflect(), r.complement(), r.reflect().complement()]
        .into_iter()
        .min()
        .unwrap()
}

const ECG_MAGIC: &[u8; 4] = b"ECG1";

/// Write a grid in the `.ecg` format: magic "ECG1", little-endian u32 fields
/// (rule, width, rows, reserved), u64 seed, then packed row-major bits padded
/// to a byte boundary per row.
pub fn save_grid<W: Write>(grid: &SpacetimeGrid, mut w: W) -> Result<(), EcaError> {
    w.write_all(ECG_MAGIC)?;
    w.write_all(&(grid.rule().0 as u32).to_le_bytes())?;
    w.write_all(&(grid.width() as u32).to_le_bytes())?;
    w.write_all(&(grid.num_rows() as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&grid.seed().to_le_bytes())?;
    for row in grid.rows() {
        w.write_all(&row.to_packed_bytes())?;
    }
    Ok(())
}

pub fn save_grid_file(grid: &SpacetimeGrid, path: &Path) -> Result<(), EcaError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_grid(grid, &mut f)?;
    Ok(())
}

pub fn load_grid<R: Read>(mut r: R) -> Result<SpacetimeGrid, EcaError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ECG_MAGIC {
        return Err(EcaError::Format("bad magic, not an .ecg file".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut R| -> Result<u32, EcaError> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let rule = read_u32(&mut r)?;
    let width = read_u32(&mut r)? as usize;
    let rows_n = read_u32(&mut r)? as usize;
    let _reserved = read_u32(&mut r)?;
    if rule > 255 {
        return Err(EcaError::Format(format!("rule {rule} out of range")));
    }
    if width < MIN_WIDTH || rows_n == 0 {
        return Err(EcaError::Format("degenerate grid dimensions".into()));
    }
    let mut seedbuf = [0u8; 8];
    r.read_exact(&mut seedbuf)?;
    let seed = u64::from_le_bytes(seedbuf);
    let row_bytes = width.div_ceil(8);
    let mut rows = Vec::with_capacity(rows_n);
    let mut buf = vec![0u8; row_bytes];
    for _ in 0..rows_n {
        r.read_exact(&mut buf)
            .map_err(|_| EcaError::Format("truncated grid payload".into()))?;
        rows.push(State::from_packed_bytes(&buf, width)?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(EcaError::Format("trailing bytes after grid payload".into()));
    }
    Ok(SpacetimeGrid {
        rule: RuleId(rule as u8),
        seed,
        rows,
    })
}

pub fn load_grid_file(path: &Path) -> Result<SpacetimeGrid, EcaError> {
    load_grid(std::io::BufReader::new(std::fs::File::open(path)?))
}
