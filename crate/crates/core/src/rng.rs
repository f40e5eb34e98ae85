//! Named, independent random substreams derived from one experiment seed.
//!
//! Every consumer of randomness in a run (initialization, each transform
//! branch, dropout, data order) draws from its own ChaCha stream, so turning
//! one branch on or off never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    StudentInit = 1,
    TeacherInit = 2,
    Basic = 3,
    ExtremeLabeled = 4,
    ExtremeUnlabeled = 5,
    DropoutSupervised = 6,
    DropoutLabeled = 7,
    DropoutUnlabeled = 8,
    LabeledOrder = 9,
    UnlabeledOrder = 10,
    DropoutReference = 11,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Seeds derived from a parent seed by index (trial seeds, per-item seeds).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
