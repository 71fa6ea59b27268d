//! Portable random streams.
//!
//! Every consumer draws from ChaCha8 keyed by the run seed (expanded with
//! `SeedableRng::seed_from_u64`) and a 64-bit stream id. The stream id packs a
//! purpose tag in the high 32 bits and an index (sample, epoch, ...) in the low
//! 32 bits, so streams never overlap and any one of them can be regenerated
//! without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Purpose {
    SampleFields = 1,
    Splits = 2,
    ClassSignatures = 3,
    ParamInit = 4,
    EpochShuffle = 5,
    Masks = 6,
    HeadInit = 7,
    Reconstruct = 8,
    Probe = 9,
    BatchProportions = 10,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | (index & 0xffff_ffff));
    rng
}
