//! Seed expansion.
//!
//! Every random stream in a run is derived from one global seed:
//! `derive(global, stage, counter)` hashes the stage label into a 64-bit
//! tag with FNV-1a, mixes it with the global seed and the counter, and runs
//! the result through the SplitMix64 finalizer. Stages use fixed labels
//! ("init", "shuffle", "dropout", "synth", ...) and counters such as the
//! epoch, the optimizer step or a layer index.

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(global: u64, stage: &str, counter: u64) -> u64 {
    let a = splitmix64(global ^ fnv1a(stage));
    splitmix64(a ^ counter.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Dropout seed for one call site at one optimizer step.
pub fn dropout_seed(global: u64, site: u64, step: u64) -> u64 {
    derive(derive(global, "dropout", site), "step", step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_streams() {
        assert_ne!(derive(1, "init", 0), derive(1, "init", 1));
        assert_ne!(derive(1, "init", 0), derive(1, "shuffle", 0));
        assert_ne!(derive(1, "init", 0), derive(2, "init", 0));
        assert_eq!(derive(9, "x", 3), derive(9, "x", 3));
    }
}
