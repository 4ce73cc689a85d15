use crate::packet_model::FiveTuple;

/// Seed mixed into every flow hash.
pub const FLOW_HASH_SEED: u64 = 0x5851_f42d_4c95_7f2d;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// MurmurHash3 64-bit finalizer.
#[inline]
pub fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

/// FNV-1a over `bytes` starting from `offset_basis ^ seed`, finalized with
/// [`fmix64`] so every output bit depends on every input bit.
#[inline]
pub fn hash_bytes(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    fmix64(h)
}

/// Flow hash over the 13-byte wire encoding of the 5-tuple
/// (`src_ip | dst_ip | src_port | dst_port | proto`, big-endian fields).
#[inline]
pub fn flow_hash(tuple: &FiveTuple) -> u64 {
    hash_bytes(&tuple.to_bytes(), FLOW_HASH_SEED)
}
