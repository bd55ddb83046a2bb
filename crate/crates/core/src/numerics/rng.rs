//! Counter-based deterministic random streams.
//!
//! Every random draw in this crate comes from an `RngStream` addressed by
//! `(root_seed, stream_path)`. Draw values depend only on that address and
//! the draw counter, never on scheduling, so any unit of work that derives
//! its own stream produces identical results whether it runs sequentially
//! or in parallel.
//!
//! The mixing function is part of the on-disk reproducibility contract and
//! must not change between versions:
//!
//! * `mix64` is the SplitMix64 finalizer
//!   (`z ^= z>>30; z *= 0xBF58476D1CE4E5B9; z ^= z>>27; z *= 0x94D049BB133111EB; z ^= z>>31`).
//! * A stream's key is `fold(..fold(fold(mix64(root_seed), p0), p1).., pn)`
//!   where `fold(k, e) = mix64(mix64(k) + GOLDEN + e)` over wrapping u64
//!   arithmetic and `GOLDEN = 0x9E3779B97F4A7C15`.
//! * Raw draw `n` (0-based) is `mix64(key + (n+1) * GOLDEN)`, i.e. the
//!   SplitMix64 sequence seeded with `key`.
//! * A unit uniform is `(raw >> 11) as f64 * 2^-53`, in `[0, 1)`.
//! * A standard normal consumes exactly two raw draws `a, b` and returns
//!   `sqrt(-2 ln u) * cos(2 pi v)` with `u = ((a >> 12) + 0.5) * 2^-52`
//!   (open interval, never 0) and `v` the unit uniform of `b`.
//! * A bounded index draws raw u64s, rejecting values below
//!   `(2^64 - bound) mod bound`, and returns the first survivor mod bound.
//!
//! `fold` is injective in its element argument for a fixed key, so sibling
//! streams (same parent, different path element) never collide.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn fold(key: u64, elem: u64) -> u64 {
    mix64(mix64(key).wrapping_add(GOLDEN).wrapping_add(elem))
}

/// Immutable stream identity plus a draw cursor. Cloning duplicates the
/// cursor; `child` derives a disjoint stream regardless of cursor position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

/// Stream addressed by the root seed and a path of u64 elements.
///
/// `derive_stream(s, &[a, b]) == derive_stream(s, &[a]).child(b)` holds by
/// construction; path prefixes therefore act as namespaces.
pub fn derive_stream(root_seed: u64, stream_path: &[u64]) -> RngStream {
    let mut key = mix64(root_seed);
    for &elem in stream_path {
        key = fold(key, elem);
    }
    RngStream { key, counter: 0 }
}

impl RngStream {
    /// Derives the sub-stream for `tag`. Depends only on the stream's
    /// identity, not on how many values have been drawn from it.
    pub fn child(&self, tag: u64) -> RngStream {
        RngStream { key: fold(self.key, tag), counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let n = self.counter;
        self.counter += 1;
        mix64(self.key.wrapping_add(n.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `0..bound` by rejection. `bound` must be nonzero.
    pub fn next_index(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_index bound must be nonzero");
        let b = bound as u64;
        let reject_below = b.wrapping_neg() % b;
        loop {
            let r = self.next_u64();
            if r >= reject_below {
                return (r % b) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; consumes exactly two raw draws.
    pub fn next_normal(&mut self) -> f64 {
        let u = ((self.next_u64() >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64);
        let v = self.next_f64();
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    }

    /// In-place Fisher-Yates shuffle, descending index, partner uniform in
    /// `0..=i`. The swap sequence is part of the reproducibility contract.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}
