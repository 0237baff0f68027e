//! Byte-level vocabulary: the 256 byte values followed by four specials.

pub const PAD: u32 = 256;
pub const CLS: u32 = 257;
pub const SEP: u32 = 258;
pub const MASK: u32 = 259;

pub const SIZE: usize = 260;
/// Number of ordinary (non-special) tokens.
pub const BYTES: usize = 256;

pub fn is_special(t: u32) -> bool {
    t >= PAD
}

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}
