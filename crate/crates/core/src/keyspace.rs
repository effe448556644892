//! The 63-bit key domain.
//!
//! Every leaf slot is a single machine word. The most significant bit is the
//! read-only flag, the remaining 63 bits hold the key payload. Payload `0`
//! marks an empty slot and is never a user key.

use std::fmt;

use thiserror::Error;

/// Mask of the read-only flag.
pub const READ_ONLY_BIT: u64 = 1 << 63;
/// Mask of the key payload.
pub const PAYLOAD_MASK: u64 = !READ_ONLY_BIT;
/// Largest legal key, `2^63 - 1`.
pub const MAX_KEY: u64 = PAYLOAD_MASK;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("key 0 is reserved for empty slots")]
    Reserved,
    #[error("key {0} does not fit in 63 bits")]
    TooLarge(u64),
    #[error("key {key} does not fit in {bits} bits")]
    KeyOverflow { key: u64, bits: u32 },
    #[error("value {value} does not fit in {bits} bits")]
    ValueOverflow { value: u64, bits: u32 },
    #[error("value width {0} leaves no room for a key")]
    WidthTooLarge(u32),
    #[error("empty range [{0}; {1}]")]
    EmptyRange(u64, u64),
}

/// One leaf slot word: read-only flag plus 63-bit payload.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct KeyWord(u64);

impl KeyWord {
    /// The empty, writable slot.
    pub const EMPTY: KeyWord = KeyWord(0);

    /// Encodes a user key. Rejects `0` and anything at or above `2^63`.
    pub fn encode(raw: u64) -> Result<KeyWord, KeyError> {
        check_key(raw)?;
        Ok(KeyWord(raw))
    }

    pub const fn from_bits(bits: u64) -> KeyWord {
        KeyWord(bits)
    }

    pub const fn bits(self) -> u64 {
        self.0
    }

    pub const fn payload(self) -> u64 {
        self.0 & PAYLOAD_MASK
    }

    pub const fn is_read_only(self) -> bool {
        self.0 & READ_ONLY_BIT != 0
    }

    /// True for an empty slot, frozen or not.
    pub const fn is_empty(self) -> bool {
        self.payload() == 0
    }

    /// Same payload with the read-only flag set. Idempotent.
    pub const fn set_readonly(self) -> KeyWord {
        KeyWord(self.0 | READ_ONLY_BIT)
    }
}

impl fmt::Debug for KeyWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_read_only() {
            write!(f, "{}*", self.payload())
        } else {
            write!(f, "{}", self.payload())
        }
    }
}

/// Validates a user key: `0 < key < 2^63`.
pub fn check_key(raw: u64) -> Result<u64, KeyError> {
    if raw == 0 {
        Err(KeyError::Reserved)
    } else if raw > MAX_KEY {
        Err(KeyError::TooLarge(raw))
    } else {
        Ok(raw)
    }
}

/// Validates a range argument `0 < lo <= hi < 2^63`.
pub fn check_range(lo: u64, hi: u64) -> Result<(), KeyError> {
    check_key(lo)?;
    check_key(hi)?;
    if lo > hi {
        return Err(KeyError::EmptyRange(lo, hi));
    }
    Ok(())
}

/// Key/value packing for dictionary and priority-queue use: the value lives
/// in the low `value_bits` bits, the key in the bits above it. Range
/// operations over `[pack(k, 0), pack(k, max)]` then address a single key,
/// and `remove(1, MAX_KEY)` pops the entry with the smallest key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedEntry {
    value_bits: u32,
}

impl PackedEntry {
    pub fn new(value_bits: u32) -> Result<PackedEntry, KeyError> {
        if value_bits >= 63 {
            return Err(KeyError::WidthTooLarge(value_bits));
        }
        Ok(PackedEntry { value_bits })
    }

    pub fn value_bits(self) -> u32 {
        self.value_bits
    }

    fn key_bits(self) -> u32 {
        63 - self.value_bits
    }

    pub fn pack(self, key: u64, value: u64) -> Result<KeyWord, KeyError> {
        if key == 0 {
            return Err(KeyError::Reserved);
        }
        if key >> self.key_bits() != 0 {
            return Err(KeyError::KeyOverflow { key, bits: self.key_bits() });
        }
        if self.value_bits < 64 && value >> self.value_bits != 0 {
            return Err(KeyError::ValueOverflow { value, bits: self.value_bits });
        }
        Ok(KeyWord((key << self.value_bits) | value))
    }

    pub fn unpack(self, word: KeyWord) -> (u64, u64) {
        let payload = word.payload();
        let mask = (1u64 << self.value_bits) - 1;
        (payload >> self.value_bits, payload & mask)
    }

    /// Inclusive payload range covering every value stored under `key`.
    pub fn key_range(self, key: u64) -> Result<(u64, u64), KeyError> {
        let lo = self.pack(key, 0)?;
        let hi = lo.bits() | ((1u64 << self.value_bits) - 1);
        Ok((lo.bits(), hi))
    }
}

/// Shorthand for [`PackedEntry::pack`].
pub fn pack(key: u64, value: u64, value_bits: u32) -> Result<KeyWord, KeyError> {
    PackedEntry::new(value_bits)?.pack(key, value)
}

/// Shorthand for [`PackedEntry::unpack`].
pub fn unpack(word: KeyWord, value_bits: u32) -> Result<(u64, u64), KeyError> {
    Ok(PackedEntry::new(value_bits)?.unpack(word))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_bounds() {
        let w = KeyWord::encode(1).unwrap();
        assert_eq!((w.payload(), w.is_read_only()), (1, false));
        let w = KeyWord::encode(MAX_KEY).unwrap();
        assert_eq!((w.payload(), w.is_read_only()), ((1 << 63) - 1, false));
        assert_eq!(KeyWord::encode(0), Err(KeyError::Reserved));
        assert_eq!(KeyWord::encode(1 << 63), Err(KeyError::TooLarge(1 << 63)));
        assert_eq!(KeyWord::encode(u64::MAX), Err(KeyError::TooLarge(u64::MAX)));
    }

    #[test]
    fn set_readonly_examples() {
        let five = KeyWord::encode(5).unwrap();
        let frozen = five.set_readonly();
        assert_eq!((frozen.payload(), frozen.is_read_only()), (5, true));
        assert_eq!(frozen.set_readonly(), frozen);
        let empty = KeyWord::EMPTY.set_readonly();
        assert_eq!((empty.payload(), empty.is_read_only()), (0, true));
        assert!(empty.is_empty());
    }

    #[test]
    fn pack_examples() {
        // shift/mask oracle: 3 << 8 | 1
        assert_eq!(pack(3, 1, 8).unwrap().payload(), (3u64 << 8) | 1);
        assert_eq!(pack(3, 1, 8).unwrap().payload(), 769);
        assert_eq!(pack(1, 0, 0).unwrap().payload(), 1);
        assert!(matches!(pack(1 << 55, 0, 8), Err(KeyError::KeyOverflow { .. })));
        assert!(matches!(pack(1, 256, 8), Err(KeyError::ValueOverflow { .. })));
        assert_eq!(pack(0, 3, 8), Err(KeyError::Reserved));
    }

    #[test]
    fn key_range_covers_values() {
        let p = PackedEntry::new(4).unwrap();
        assert_eq!(p.key_range(2).unwrap(), (32, 47));
    }

    proptest! {
        #[test]
        fn encode_accepts_exactly_the_domain(raw in any::<u64>()) {
            let ok = raw != 0 && raw < (1u64 << 63);
            prop_assert_eq!(KeyWord::encode(raw).is_ok(), ok);
            if ok {
                prop_assert_eq!(KeyWord::encode(raw).unwrap().payload(), raw);
            }
        }

        #[test]
        fn readonly_idempotent_and_payload_preserving(bits in any::<u64>()) {
            let w = KeyWord::from_bits(bits);
            let f = w.set_readonly();
            prop_assert!(f.is_read_only());
            prop_assert_eq!(f.payload(), w.payload());
            prop_assert_eq!(f.set_readonly(), f);
        }
    }

    #[test]
    fn pack_unpack_round_trip_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..100_000 {
            let width = rng.gen_range(0..=62u32);
            let key_bits = 63 - width;
            let key = rng.gen_range(1..(1u64 << key_bits));
            let value = if width == 0 { 0 } else { rng.gen_range(0..(1u64 << width)) };
            let word = pack(key, value, width).unwrap();
            assert!(!word.is_read_only());
            assert_eq!(unpack(word, width).unwrap(), (key, value));
        }
    }
}
