//! Deterministic randomness helpers.
//!
//! Two kinds of randomness are used in this crate and they have different
//! reproducibility requirements:
//!
//! * **Sequential streams** (weight init, shuffling, synthetic motion): a
//!   seeded [`rand_chacha::ChaCha8Rng`] consumed in a fixed order. Helpers
//!   here derive well-separated child seeds from a run seed.
//! * **Dropout masks**: these must be *replayable*. A gradient check
//!   evaluates the same loss several times and needs bit-identical masks on
//!   every evaluation, and a resumed run must continue the exact mask
//!   sequence. A counter-based generator gives us that: the mask for call
//!   `n`, element `i` is a pure function of `(seed, n, i)`, so cloning the
//!   stream state replays it and restoring a counter resumes it.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer: a cheap, well-mixed 64-bit hash.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a base seed with a label into a new seed. Used to derive
/// independent child streams (shuffle for epoch k, sequence j, ...) from one
/// run seed without the streams overlapping.
#[inline]
pub fn derive_seed(base: u64, label: u64) -> u64 {
    mix64(base ^ mix64(label))
}

/// Seeded sequential generator for init / shuffling / synthesis.
pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Map a 64-bit hash to a uniform double in `[0, 1)`.
#[inline]
fn to_unit(h: u64) -> f64 {
    // Top 53 bits -> [0, 1) with full double precision.
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Counter-based dropout mask generator.
///
/// Each dropout application consumes one counter tick; elements within the
/// application are indexed independently. Cloning captures the state, so a
/// cloned stream replays exactly the same masks.
#[derive(Debug, Clone)]
pub struct DropoutStream {
    seed: u64,
    counter: Cell<u64>,
}

impl DropoutStream {
    pub fn new(seed: u64) -> Self {
        DropoutStream { seed, counter: Cell::new(0) }
    }

    /// Current counter, for checkpointing.
    pub fn counter(&self) -> u64 {
        self.counter.get()
    }

    /// Restore a counter from a checkpoint.
    pub fn set_counter(&self, counter: u64) {
        self.counter.set(counter);
    }

    /// Reserve one application slot and return its ticket.
    pub fn next_ticket(&self) -> DropoutTicket {
        let n = self.counter.get();
        self.counter.set(n + 1);
        DropoutTicket { state: mix64(self.seed ^ mix64(n)) }
    }
}

/// One dropout application's key; yields per-element uniforms.
#[derive(Debug, Clone, Copy)]
pub struct DropoutTicket {
    state: u64,
}

impl DropoutTicket {
    /// Uniform `[0, 1)` draw for element `i` of this application.
    #[inline]
    pub fn unit(&self, i: usize) -> f64 {
        to_unit(mix64(self.state ^ (i as u64).wrapping_mul(0xd6e8_feb8_6659_fd93)))
    }
}
