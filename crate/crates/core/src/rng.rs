//! Named random streams derived from one master seed, so that changing how
//! much randomness one stage consumes never perturbs another.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ALIGN_ORDER: &str = "align-order";
pub const NEGATIVES: &str = "negatives";
pub const MASKING: &str = "masking";
pub const CORRUPTION: &str = "corruption";
pub const CALIBRATION: &str = "calibration";

pub fn stream(master_seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = FnvHasher::default();
    h.write(name.as_bytes());
    h.write_u64(master_seed);
    ChaCha8Rng::seed_from_u64(h.finish())
}
