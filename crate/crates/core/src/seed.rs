//! Stable seed derivation.
//!
//! Derived seeds must not depend on the platform or on `std`'s randomized
//! hasher, so this uses FNV-1a over an explicit byte encoding followed by a
//! SplitMix64 finalizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a base seed together with an ordered list of string/integer parts.
pub fn derive_seed(base: u64, parts: &[SeedPart<'_>]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    };
    feed(&base.to_le_bytes());
    for part in parts {
        match part {
            SeedPart::Int(v) => {
                feed(&[0x01]);
                feed(&v.to_le_bytes());
            }
            SeedPart::Str(s) => {
                feed(&[0x02]);
                feed(&(s.len() as u64).to_le_bytes());
                feed(s.as_bytes());
            }
        }
    }
    splitmix64(h)
}

#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Int(u64),
    Str(&'a str),
}

/// Seed of the generator for one sampling run.
pub fn run_seed(base: u64, run_index: u32, tag: &str) -> u64 {
    derive_seed(base, &[SeedPart::Int(u64::from(run_index)), SeedPart::Str(tag)])
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
