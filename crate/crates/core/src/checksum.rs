//! Checksum rules for computed protocol fields.
//!
//! A computed field names its rule in the schema; the rule is evaluated over
//! every byte strictly before the field's own offset.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChecksumError {
    #[error("unknown checksum rule `{0}`")]
    UnknownRule(String),
    #[error("rule `{rule}` produces {produced} bytes but the field is {width} bytes wide")]
    WidthMismatch {
        rule: String,
        produced: usize,
        width: usize,
    },
}

/// Default rule name for computed fields.
pub const CRC16_CCITT_FALSE: &str = "crc16-ccitt-false";

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no xorout.
pub fn crc16_ccitt_false(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &byte in data {
        crc ^= (byte as u16) << 8;
        for _ in 0..8 {
            if crc & 0x8000 != 0 {
                crc = (crc << 1) ^ 0x1021;
            } else {
                crc <<= 1;
            }
        }
    }
    crc
}

/// Evaluate a named rule over `preceding` and return the field bytes.
pub fn apply_rule(rule: &str, preceding: &[u8], width: usize) -> Result<Vec<u8>, ChecksumError> {
    match rule {
        CRC16_CCITT_FALSE => {
            if width != 2 {
                return Err(ChecksumError::WidthMismatch {
                    rule: rule.to_string(),
                    produced: 2,
                    width,
                });
            }
            Ok(crc16_ccitt_false(preceding).to_be_bytes().to_vec())
        }
        other => Err(ChecksumError::UnknownRule(other.to_string())),
    }
}

pub fn rule_known(rule: &str) -> bool {
    rule == CRC16_CCITT_FALSE
}
