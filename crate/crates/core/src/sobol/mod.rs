//! Sobol' low-discrepancy sequence.
//!
//! Gray-code (Antonov–Saleev) generation with the Joe–Kuo direction
//! numbers. The all-zero point at sequence index 0 is never emitted: the
//! first emitted point is `(0.5, ..., 0.5)`.
//!
//! A [`SobolStream`] is a cursor `(dimension, index)`. Because the point
//! at any index can be reconstructed directly from its Gray code, skipping
//! is `O(bits * d)` and a persisted cursor resumes bit-identically.

mod directions;

use serde::{Deserialize, Serialize};

use crate::error::SensaError;
use directions::DIRECTION_TABLE;
pub use directions::MAX_DIMENSION;

const BITS: usize = 32;
const SCALE: f64 = 1.0 / (1u64 << BITS) as f64;

/// Direction numbers for one dimension, `v[k]` scaled to 32 bits.
fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    let (poly, m_init) = DIRECTION_TABLE[dim];
    if dim == 0 {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1 << (BITS - 1 - k);
        }
        return v;
    }
    let degree = (32 - poly.leading_zeros() - 1) as usize;
    let a = (poly >> 1) & ((1 << (degree - 1)) - 1);
    for k in 0..degree.min(BITS) {
        v[k] = m_init[k] << (BITS - 1 - k);
    }
    for k in degree..BITS {
        let mut x = v[k - degree] ^ (v[k - degree] >> degree);
        for r in 1..degree {
            if (a >> (degree - 1 - r)) & 1 == 1 {
                x ^= v[k - r];
            }
        }
        v[k] = x;
    }
    v
}

/// Deterministic cursor over the `d`-dimensional Sobol' sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StreamCursor", into = "StreamCursor")]
pub struct SobolStream {
    dimension: usize,
    /// Number of points already emitted.
    index: u64,
    directions: Vec<[u32; BITS]>,
    /// Integer coordinates of the most recently emitted point.
    state: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct StreamCursor {
    dimension: usize,
    index: u64,
}

impl TryFrom<StreamCursor> for SobolStream {
    type Error = SensaError;

    fn try_from(c: StreamCursor) -> Result<Self, Self::Error> {
        let mut s = SobolStream::new(c.dimension)?;
        s.skip(c.index);
        Ok(s)
    }
}

impl From<SobolStream> for StreamCursor {
    fn from(s: SobolStream) -> Self {
        StreamCursor {
            dimension: s.dimension,
            index: s.index,
        }
    }
}

impl SobolStream {
    pub fn new(dimension: usize) -> Result<Self, SensaError> {
        if dimension == 0 || dimension > MAX_DIMENSION {
            return Err(SensaError::UnsupportedDimension {
                requested: dimension,
                max: MAX_DIMENSION,
            });
        }
        Ok(Self {
            dimension,
            index: 0,
            directions: (0..dimension).map(direction_numbers).collect(),
            state: vec![0; dimension],
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Number of points emitted so far.
    pub fn index(&self) -> u64 {
        self.index
    }

    /// Emits the next `count` points.
    pub fn next_points(&mut self, count: usize) -> Vec<Vec<f64>> {
        (0..count).map(|_| self.next_point()).collect()
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        // Sequence index of the point being emitted is index + 1; Gray-code
        // step flips the bit at the lowest zero of the previous index.
        let bit = (!self.index).trailing_zeros() as usize;
        assert!(bit < BITS, "Sobol' stream exhausted after 2^32 points");
        for (x, v) in self.state.iter_mut().zip(&self.directions) {
            *x ^= v[bit];
        }
        self.index += 1;
        self.state.iter().map(|&x| x as f64 * SCALE).collect()
    }

    /// Advances the cursor as if `count` points were emitted and discarded.
    pub fn skip(&mut self, count: u64) {
        if count == 0 {
            return;
        }
        self.index += count;
        self.state = self.integer_point(self.index);
    }

    /// Point number `n` of the underlying sequence, counting the origin as
    /// `n = 0`. Emitted point `k` (0-based) is `sequence_point(k + 1)`.
    pub fn sequence_point(&self, n: u64) -> Vec<f64> {
        self.integer_point(n)
            .into_iter()
            .map(|x| x as f64 * SCALE)
            .collect()
    }

    fn integer_point(&self, n: u64) -> Vec<u32> {
        let gray = n ^ (n >> 1);
        self.directions
            .iter()
            .map(|v| {
                let mut x = 0u32;
                for (bit, vb) in v.iter().enumerate() {
                    if (gray >> bit) & 1 == 1 {
                        x ^= vb;
                    }
                }
                x
            })
            .collect()
    }
}
