//! Rotary position embeddings with explicit position tables, so that the
//! downsampled-audio conditioning can reuse the decimated positions of the
//! full-rate sequence and stay phase-aligned with it.

use crate::error::{Error, Result};
use crate::nn::tensor::{sc, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    pub positions: Vec<usize>,
    pub head_dim: usize,
    /// [len, head_dim/2] each
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(positions: Vec<usize>, base: f64, head_dim: usize) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(Error::invalid("rope head_dim must be even"));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("rope positions must be strictly increasing"));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in &positions {
            for i in 0..half {
                let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
                let ang = p as f64 * freq;
                cos.push(sc::<T>(ang.cos()));
                sin.push(sc::<T>(ang.sin()));
            }
        }
        Ok(RopeTable {
            positions,
            head_dim,
            cos,
            sin,
        })
    }

    pub fn for_range(len: usize, base: f64, head_dim: usize) -> Result<Self> {
        Self::new((0..len).collect(), base, head_dim)
    }

    /// Skips the strictly-increasing validation; test-only degenerate tables.
    #[doc(hidden)]
    pub fn new_unchecked(positions: Vec<usize>, base: f64, head_dim: usize) -> Self {
        let mut sorted = positions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        let mut table = Self::new(sorted, base, head_dim).expect("valid head_dim");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in &positions {
            let t = table.positions.iter().position(|&q| q == p).unwrap();
            let (c, s) = table.factors(t);
            cos.extend_from_slice(c);
            sin.extend_from_slice(s);
        }
        table.positions = positions;
        table.cos = cos;
        table.sin = sin;
        table
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Rotation factors for token index `t` (row into the table).
    fn factors(&self, t: usize) -> (&[T], &[T]) {
        let half = self.head_dim / 2;
        (
            &self.cos[t * half..(t + 1) * half],
            &self.sin[t * half..(t + 1) * half],
        )
    }
}

/// Apply rotary rotation in place to `x` of shape [len, heads * head_dim].
/// `inverse` rotates by the negative angle (the exact adjoint, used in the
/// backward pass).
pub fn rope_apply<T: Scalar>(x: &mut Tensor<T>, table: &RopeTable<T>, heads: usize, inverse: bool) {
    let hd = table.head_dim;
    let half = hd / 2;
    debug_assert_eq!(x.cols(), heads * hd);
    debug_assert_eq!(x.rows(), table.len());
    for t in 0..table.len() {
        let (cos, sin) = table.factors(t);
        let row = x.row_mut(t);
        for h in 0..heads {
            let off = h * hd;
            for i in 0..half {
                let a = row[off + 2 * i];
                let b = row[off + 2 * i + 1];
                let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                row[off + 2 * i] = a * c - b * s;
                row[off + 2 * i + 1] = a * s + b * c;
            }
        }
    }
}
