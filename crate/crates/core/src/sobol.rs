//! Sobol low-discrepancy sequences in up to 128 dimensions.
//!
//! 32-bit Gray-code construction from Joe-Kuo direction numbers. The sequence
//! includes index 0, so the first unscrambled point is the origin (the
//! convention used by SciPy). Scrambling applies a random lower-triangular
//! linear matrix scramble to the direction numbers plus a random digital shift.

use ndarray::Array2;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sobol_table::{DIRECTION_TABLE, MAX_DIMENSIONS};

const BITS: usize = 32;
const SCALE: f64 = 1.0 / 4_294_967_296.0;

pub const SOBOL_MAX_DIMENSIONS: usize = MAX_DIMENSIONS;

fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = 1 << (BITS - 1 - k);
        }
        return v;
    }
    let (poly, m) = DIRECTION_TABLE[dim];
    let s = (32 - poly.leading_zeros() - 1) as usize;
    for k in 0..s.min(BITS) {
        v[k] = m[k] << (BITS - 1 - k);
    }
    for k in s..BITS {
        let mut next = v[k - s] ^ (v[k - s] >> s);
        for j in 1..s {
            if (poly >> (s - j)) & 1 == 1 {
                next ^= v[k - j];
            }
        }
        v[k] = next;
    }
    v
}

/// Multiplies direction numbers by a random unit lower-triangular bit matrix.
fn scramble_directions<R: Rng>(v: &mut [u32; BITS], rng: &mut R) {
    // Row r (bit r counted from the most significant end) holds a random mask
    // over bits 0..r with bit r itself set.
    let mut rows = [0u32; BITS];
    for (r, row) in rows.iter_mut().enumerate() {
        let diag = 1u32 << (BITS - 1 - r);
        let below: u32 = if r == 0 { 0 } else { rng.random::<u32>() & !(u32::MAX >> r) };
        *row = below | diag;
    }
    for x in v.iter_mut() {
        let mut out = 0u32;
        for (r, row) in rows.iter().enumerate() {
            if (row & *x).count_ones() % 2 == 1 {
                out |= 1 << (BITS - 1 - r);
            }
        }
        *x = out;
    }
}

/// Streaming generator over `[0, 1)^d`.
#[derive(Debug, Clone)]
pub struct Sobol {
    directions: Vec<[u32; BITS]>,
    state: Vec<u32>,
    index: u64,
}

impl Sobol {
    pub fn new(d: usize, scramble_seed: Option<u64>) -> Result<Self> {
        if d == 0 || d > MAX_DIMENSIONS {
            return Err(Error::InvalidParameter(format!(
                "Sobol dimension {d} outside 1..={MAX_DIMENSIONS}"
            )));
        }
        let mut directions: Vec<[u32; BITS]> = (0..d).map(direction_numbers).collect();
        let mut state = vec![0u32; d];
        if let Some(seed) = scramble_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in &mut directions {
                scramble_directions(v, &mut rng);
            }
            for s in &mut state {
                *s = rng.random();
            }
        }
        Ok(Self {
            directions,
            state,
            index: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.directions.len()
    }

    /// Writes the next point into `out`.
    pub fn next_into(&mut self, out: &mut [f64]) {
        if self.index > 0 {
            let bit = (self.index - 1).trailing_ones() as usize;
            assert!(bit < BITS, "Sobol sequence exhausted after 2^32 points");
            for (s, v) in self.state.iter_mut().zip(&self.directions) {
                *s ^= v[bit];
            }
        }
        for (o, &s) in out.iter_mut().zip(&self.state) {
            *o = s as f64 * SCALE;
        }
        self.index += 1;
    }

    pub fn take(&mut self, n: usize) -> Array2<f64> {
        let mut out = Array2::zeros((n, self.dim()));
        for mut row in out.rows_mut() {
            self.next_into(row.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// First `n` points of a `d`-dimensional Sobol sequence, scrambled when a
/// seed is given.
pub fn sobol_sample(n: usize, d: usize, scramble_seed: Option<u64>) -> Result<Array2<f64>> {
    Ok(Sobol::new(d, scramble_seed)?.take(n))
}

/// Maps `[0, 1)^d` points affinely onto `[lo, hi]^d`.
pub fn to_box(mut u: Array2<f64>, lo: f64, hi: f64) -> Array2<f64> {
    u.mapv_inplace(|v| lo + (hi - lo) * v);
    u
}
