//! Seeded sampling that any language can reproduce bit for bit.
//!
//! All randomness in the crate (dataset splits, few-shot exemplars, training
//! batch order, mock random replies) flows through [`SplitMix64`] and the
//! three helpers below, so a split made here can be rebuilt elsewhere from
//! the seed alone:
//!
//! * `SplitMix64`: state += 0x9E3779B97F4A7C15, then the standard
//!   xor-shift/multiply finalizer (0xBF58476D1CE4E5B9, 0x94D049BB133111EB).
//! * `below(n)`: rejection sampling. Draws below `(2^64 - n) mod n` are
//!   discarded and the result is `x mod n`.
//! * `sample_indices(n, k)`: the first `k` steps of a forward Fisher-Yates
//!   shuffle of `0..n`; step `i` swaps `i` with `i + below(n - i)`.
//! * `seed_for(seed, key)`: `seed XOR FNV-1a-64(key bytes)`.

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    /// Full Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        self.sample_indices(n, n)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derives a per-key seed, e.g. one exemplar draw per question id.
pub fn seed_for(seed: u64, key: &str) -> u64 {
    seed ^ fnv1a64(key.as_bytes())
}
