//! Deterministic seed derivation: all randomness flows from a single root
//! seed, split per job by label so parallel jobs stay reproducible.

/// FNV-1a over the label, folded into the root seed.
pub fn child(root: u64, label: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    root ^ hash
}
