//! Derived seeds. Every component that needs an independent stream takes
//! `split(parent, stream)`, a SplitMix64 finaliser over the pair, so child
//! seeds never depend on how many draws a sibling made.

pub fn split(parent: u64, stream: u64) -> u64 {
    let mut z = parent ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream labels used by the pipeline.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const VALIDATE: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const DATAGEN: u64 = 5;
    pub const ASSEMBLE: u64 = 6;
}
