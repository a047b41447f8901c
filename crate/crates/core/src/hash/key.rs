use std::fmt;

/// Spatial hashing primes shared by every voxel-block hashing implementation.
pub const P1: i32 = 73_856_093;
pub const P2: i32 = 19_349_669;
pub const P3: i32 = 83_492_791;

/// Integer coordinates of a voxel block in the unbounded block grid.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct BlockKey {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl BlockKey {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub const fn offset(self, dx: i32, dy: i32, dz: i32) -> Self {
        Self::new(self.x + dx, self.y + dy, self.z + dz)
    }

    /// Floor division of every component, used to map voxel blocks to mesh regions.
    pub fn div_floor(self, d: i32) -> Self {
        Self::new(self.x.div_euclid(d), self.y.div_euclid(d), self.z.div_euclid(d))
    }

    pub fn to_le_bytes(self) -> [u8; 12] {
        let mut out = [0u8; 12];
        out[0..4].copy_from_slice(&self.x.to_le_bytes());
        out[4..8].copy_from_slice(&self.y.to_le_bytes());
        out[8..12].copy_from_slice(&self.z.to_le_bytes());
        out
    }

    pub fn from_le_bytes(b: &[u8; 12]) -> Self {
        let c = |i: usize| i32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
        Self::new(c(0), c(4), c(8))
    }
}

impl fmt::Debug for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl From<(i32, i32, i32)> for BlockKey {
    fn from((x, y, z): (i32, i32, i32)) -> Self {
        Self::new(x, y, z)
    }
}

/// Bucket index of `key` in a table with `n` buckets.
///
/// Products wrap modulo 2^32 and the reduction is a non-negative modulo of
/// the signed XOR result, so every implementation agrees on placement.
pub fn hash_key(key: BlockKey, n: u32) -> u32 {
    assert!(n >= 1, "bucket count must be positive");
    let h = key.x.wrapping_mul(P1) ^ key.y.wrapping_mul(P2) ^ key.z.wrapping_mul(P3);
    i64::from(h).rem_euclid(i64::from(n)) as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_hashes_to_zero() {
        assert_eq!(hash_key(BlockKey::new(0, 0, 0), 1 << 20), 0);
    }

    #[test]
    fn unit_x_keeps_first_prime() {
        assert_eq!(hash_key(BlockKey::new(1, 0, 0), 1 << 30), 73_856_093);
    }

    #[test]
    fn mixed_key_matches_exact_integer_evaluation() {
        // (73856093 ^ 38699338 ^ 250478373) mod 2^20, evaluated with exact integers.
        assert_eq!(hash_key(BlockKey::new(1, 2, 3), 1 << 20), 363_058);
    }

    #[test]
    fn negative_xor_reduces_non_negatively() {
        // x * p1 wraps to a negative i32 here.
        let k = BlockKey::new(-7, 3, 11);
        let h = k.x.wrapping_mul(P1) ^ k.y.wrapping_mul(P2) ^ k.z.wrapping_mul(P3);
        assert!(h < 0);
        let n = 1_000_003;
        let b = hash_key(k, n);
        assert!(b < n);
        assert_eq!((i64::from(h) - i64::from(b)) % i64::from(n), 0);
    }

    #[test]
    fn key_bytes_roundtrip() {
        let k = BlockKey::new(-1, i32::MAX, i32::MIN);
        assert_eq!(BlockKey::from_le_bytes(&k.to_le_bytes()), k);
    }
}
