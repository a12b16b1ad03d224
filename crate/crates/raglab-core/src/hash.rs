//! FNV-1a 64-bit hashing, used for file checksums and parameter fingerprints.

pub const FNV_OFFSET: u64 = 0xcbf29ce484222325;
pub const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Incremental FNV-1a for streaming writers.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(FNV_OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

/// Fingerprint a set of f64 parameter tensors by name, shape, and bit pattern.
/// Stable across runs and platforms (little-endian serialization).
pub fn fingerprint_params<'a>(params: impl Iterator<Item = (&'a str, &'a [usize], &'a [f64])>) -> u64 {
    let mut h = Fnv1a::new();
    for (name, shape, data) in params {
        h.write(name.as_bytes());
        h.write(&[0]);
        for &d in shape {
            h.write(&(d as u64).to_le_bytes());
        }
        for &x in data {
            h.write(&x.to_bits().to_le_bytes());
        }
    }
    h.finish()
}
