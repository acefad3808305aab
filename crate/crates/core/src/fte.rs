//! Observation-table codec: bit strings in, syntactically valid host-protocol
//! datagrams out, and back.
//!
//! Each encoded field with table size k carries floor(log2(k)) bits: the next
//! bits of the input, read big-endian, index the field's observation list.
//! Constant fields emit their sole observation; computed fields are evaluated
//! last over the assembled payload.

use rand::Rng;
use thiserror::Error;

use crate::checksum;
use crate::profile::{FieldKind, Profile};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("data is {given} bits but the profile can carry only {usable}")]
    Capacity { given: usize, usable: u32 },
    #[error("field `{field}`: value not in the observation table")]
    NotHostProtocol { field: String },
    #[error("field `{field}`: observed value at index {index} is outside the encodable range")]
    NotEncodable { field: String, index: usize },
}

/// MSB-first bit string.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitString {
    bytes: Vec<u8>,
    len: usize,
}

impl BitString {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self {
            bytes: bytes.to_vec(),
            len: bytes.len() * 8,
        }
    }

    /// Take the first `len` bits of `bytes`.
    pub fn from_bits(bytes: &[u8], len: usize) -> Self {
        assert!(len <= bytes.len() * 8);
        let mut s = Self {
            bytes: bytes[..(len + 7) / 8].to_vec(),
            len,
        };
        // clear slack bits in the last byte
        if len % 8 != 0 {
            let last = s.bytes.len() - 1;
            s.bytes[last] &= 0xFFu8 << (8 - len % 8);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len);
        self.bytes[i / 8] >> (7 - i % 8) & 1 == 1
    }

    pub fn push_bit(&mut self, bit: bool) {
        if self.len % 8 == 0 {
            self.bytes.push(0);
        }
        if bit {
            let i = self.len;
            self.bytes[i / 8] |= 1 << (7 - i % 8);
        }
        self.len += 1;
    }

    /// Append the low `n` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u64, n: u32) {
        for shift in (0..n).rev() {
            self.push_bit(value >> shift & 1 == 1);
        }
    }

    pub fn starts_with(&self, prefix: &BitString) -> bool {
        prefix.len <= self.len && (0..prefix.len).all(|i| self.bit(i) == prefix.bit(i))
    }

    /// Packed bytes; slack bits in the final byte are zero.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

/// Read cursor over a bit string; once the data runs out, further demand is
/// served from the supplied rng.
pub struct BitCursor<'a> {
    bits: &'a BitString,
    position: usize,
}

impl<'a> BitCursor<'a> {
    pub fn new(bits: &'a BitString) -> Self {
        Self { bits, position: 0 }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn read_padded(&mut self, n: u32, rng: &mut impl Rng) -> u64 {
        let mut out = 0u64;
        for _ in 0..n {
            let bit = if self.position < self.bits.len() {
                let b = self.bits.bit(self.position);
                self.position += 1;
                b
            } else {
                rng.gen::<bool>()
            };
            out = out << 1 | bit as u64;
        }
        out
    }
}

/// Map up to `usable_bits` of data onto one host-protocol datagram payload.
/// Bit demand past the end of `data` is filled with random pad bits.
pub fn encode(profile: &Profile, data: &BitString, rng: &mut impl Rng) -> Result<Vec<u8>, CodecError> {
    let usable = profile.usable_bits();
    if data.len() > usable as usize {
        return Err(CodecError::Capacity {
            given: data.len(),
            usable,
        });
    }
    let mut payload = vec![0u8; profile.datagram_len];
    let mut cursor = BitCursor::new(data);
    for (field, table) in profile.schema.iter().zip(&profile.tables) {
        let value: &[u8] = match field.kind {
            FieldKind::Constant => &table.observations[0],
            FieldKind::Encoded => {
                let bits = table.usable_bits();
                if bits == 0 {
                    &table.observations[0]
                } else {
                    let index = cursor.read_padded(bits, rng) as usize;
                    &table.observations[index]
                }
            }
            FieldKind::Computed => continue,
        };
        payload[field.offset..field.offset + field.width].copy_from_slice(value);
    }
    // computed fields go last, over the assembled bytes before each one
    for field in &profile.schema {
        if field.kind == FieldKind::Computed {
            let rule = field.rule.as_deref().expect("validated schema");
            let value = checksum::apply_rule(rule, &payload[..field.offset], field.width)
                .expect("validated schema");
            payload[field.offset..field.offset + field.width].copy_from_slice(&value);
        }
    }
    Ok(payload)
}

/// Invert `encode`: recover the full `usable_bits`-bit string (data prefix
/// plus whatever pad bits were drawn).
pub fn decode(profile: &Profile, payload: &[u8]) -> Result<BitString, CodecError> {
    if payload.len() != profile.datagram_len {
        return Err(CodecError::NotHostProtocol {
            field: "<datagram length>".into(),
        });
    }
    let mut out = BitString::new();
    for (field, table) in profile.schema.iter().zip(&profile.tables) {
        let value = &payload[field.offset..field.offset + field.width];
        match field.kind {
            FieldKind::Constant => {
                if value != table.observations[0].as_slice() {
                    return Err(CodecError::NotHostProtocol {
                        field: field.name.clone(),
                    });
                }
            }
            FieldKind::Computed => {
                let rule = field.rule.as_deref().expect("validated schema");
                let expected = checksum::apply_rule(rule, &payload[..field.offset], field.width)
                    .expect("validated schema");
                if value != expected.as_slice() {
                    return Err(CodecError::NotHostProtocol {
                        field: field.name.clone(),
                    });
                }
            }
            FieldKind::Encoded => {
                let index = table.index_of(value).ok_or_else(|| CodecError::NotHostProtocol {
                    field: field.name.clone(),
                })?;
                let bits = table.usable_bits();
                if bits == 0 {
                    continue;
                }
                if index >= 1usize << bits {
                    return Err(CodecError::NotEncodable {
                        field: field.name.clone(),
                        index,
                    });
                }
                out.push_bits(index as u64, bits);
            }
        }
    }
    Ok(out)
}

/// True iff the payload is indistinguishable from the host protocol: every
/// field value was previously observed, constants match, checksums hold.
pub fn validate_syntax(profile: &Profile, payload: &[u8]) -> bool {
    if payload.len() != profile.datagram_len {
        return false;
    }
    for (field, table) in profile.schema.iter().zip(&profile.tables) {
        let value = &payload[field.offset..field.offset + field.width];
        let ok = match field.kind {
            FieldKind::Constant => value == table.observations[0].as_slice(),
            FieldKind::Encoded => table.index_of(value).is_some(),
            FieldKind::Computed => {
                let rule = field.rule.as_deref().unwrap_or("");
                checksum::apply_rule(rule, &payload[..field.offset], field.width)
                    .map(|v| v.as_slice() == value)
                    .unwrap_or(false)
            }
        };
        if !ok {
            return false;
        }
    }
    true
}
