//! Seeded random streams.
//!
//! Every run owns a single seed. Consumers ask for a labelled substream
//! (`"init"`, `"shuffle"`, `"synth"`, ...) so that drawing more numbers for
//! one purpose never shifts the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// FNV-1a over the label bytes; stable across toolchains, unlike `DefaultHasher`.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent generator for `label` under `seed`.
pub fn substream(seed: u64, label: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(label));
    rng
}
