//! Host-protocol profiles learned from captured traffic.
//!
//! A profile records, for every field of the host protocol's datagram, the
//! ordered list of distinct values seen in a capture, plus the interpacket
//! delay corpus, the shared cipher key, and the host UDP port. The two
//! endpoints of a channel must load byte-identical profiles.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checksum;

pub const KEY_LEN: usize = 16;
pub const PROFILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("capture is empty")]
    EmptyCapture,
    #[error("need at least 2 capture records, got {0}")]
    TooFewRecords(usize),
    #[error("record {index}: payload is {got} bytes, schema expects {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("record {index}: timestamp decreases")]
    NonMonotonicTimestamps { index: usize },
    #[error("record {index}: constant field `{field}` changed value")]
    ConstantVaries { field: String, index: usize },
    #[error("record {index}: computed field `{field}` fails its rule")]
    RuleMismatch { field: String, index: usize },
    #[error("capture line {line}: {msg}")]
    CaptureParse { line: usize, msg: String },
    #[error("invalid schema: {0}")]
    SchemaInvalid(String),
    #[error(transparent)]
    Checksum(#[from] checksum::ChecksumError),
    #[error("field `{field}`: duplicate observation")]
    DuplicateObservation { field: String },
    #[error("field `{field}`: observation has wrong width")]
    ObservationWidth { field: String },
    #[error("unsupported profile document version {0}")]
    UnknownVersion(u32),
    #[error("malformed profile document: {0}")]
    Document(String),
    #[error("t_avg must be positive, got {0}")]
    NonPositiveDelay(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    /// Single value across the capture; emitted verbatim.
    Constant,
    /// Carries data; values are drawn from the observation table.
    Encoded,
    /// Derived from preceding bytes by a named checksum rule.
    Computed,
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKind::Constant => write!(f, "constant"),
            FieldKind::Encoded => write!(f, "encoded"),
            FieldKind::Computed => write!(f, "computed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub offset: usize,
    pub width: usize,
    pub kind: FieldKind,
    /// Checksum rule name; required for computed fields, ignored otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
}

/// Ordered distinct values observed for one field. Order is first-seen and
/// must be identical on both endpoints.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ObservationTable {
    pub observations: Vec<Vec<u8>>,
}

impl ObservationTable {
    pub fn count(&self) -> usize {
        self.observations.len()
    }

    /// Bits actually encodable in this field: floor(log2(count)).
    pub fn usable_bits(&self) -> u32 {
        if self.observations.len() <= 1 {
            0
        } else {
            (usize::BITS - 1) - self.observations.len().leading_zeros()
        }
    }

    pub fn index_of(&self, value: &[u8]) -> Option<usize> {
        self.observations.iter().position(|o| o == value)
    }
}

/// Interpacket gaps, in seconds, from a contiguous capture.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DelayCorpus {
    pub delays: Vec<f64>,
}

impl DelayCorpus {
    pub fn count(&self) -> usize {
        self.delays.len()
    }

    pub fn mean(&self) -> f64 {
        if self.delays.is_empty() {
            0.0
        } else {
            self.delays.iter().sum::<f64>() / self.delays.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub schema: Vec<FieldSpec>,
    /// One table per schema field, in schema order. Computed fields have an
    /// empty table; constant fields have exactly one observation.
    pub tables: Vec<ObservationTable>,
    pub delay_corpus: DelayCorpus,
    pub key: [u8; KEY_LEN],
    pub datagram_len: usize,
    pub udp_port: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureRecord {
    pub timestamp: f64,
    pub payload: Vec<u8>,
}

/// Parse the capture exchange format: one record per line, decimal timestamp
/// in seconds, a space, then the hex payload. `#` lines are comments.
pub fn parse_capture(text: &str) -> Result<Vec<CaptureRecord>, ProfileError> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = i + 1;
        let (ts, hexpart) = line.split_once(' ').ok_or_else(|| ProfileError::CaptureParse {
            line: lineno,
            msg: "expected `<timestamp> <hex_payload>`".into(),
        })?;
        let timestamp: f64 = ts.parse().map_err(|e| ProfileError::CaptureParse {
            line: lineno,
            msg: format!("bad timestamp: {e}"),
        })?;
        let payload = hex::decode(hexpart.trim()).map_err(|e| ProfileError::CaptureParse {
            line: lineno,
            msg: format!("bad hex payload: {e}"),
        })?;
        records.push(CaptureRecord { timestamp, payload });
    }
    Ok(records)
}

pub fn validate_schema(schema: &[FieldSpec]) -> Result<usize, ProfileError> {
    if schema.is_empty() {
        return Err(ProfileError::SchemaInvalid("schema has no fields".into()));
    }
    let mut expected_offset = 0usize;
    for f in schema {
        if f.width == 0 {
            return Err(ProfileError::SchemaInvalid(format!(
                "field `{}` has zero width",
                f.name
            )));
        }
        if f.offset != expected_offset {
            return Err(ProfileError::SchemaInvalid(format!(
                "field `{}` at offset {} leaves a gap or overlap (expected offset {})",
                f.name, f.offset, expected_offset
            )));
        }
        if f.kind == FieldKind::Computed {
            if f.offset == 0 {
                return Err(ProfileError::SchemaInvalid(format!(
                    "computed field `{}` has no preceding bytes",
                    f.name
                )));
            }
            let rule = f.rule.as_deref().ok_or_else(|| {
                ProfileError::SchemaInvalid(format!("computed field `{}` names no rule", f.name))
            })?;
            if !checksum::rule_known(rule) {
                return Err(ProfileError::SchemaInvalid(format!(
                    "computed field `{}` names unknown rule `{rule}`",
                    f.name
                )));
            }
        }
        expected_offset += f.width;
    }
    Ok(expected_offset)
}

/// Build a profile from a capture: collect distinct values per encoded field
/// in first-seen order and take successive timestamp differences as the
/// delay corpus.
pub fn ingest_capture(
    capture: &[CaptureRecord],
    schema: &[FieldSpec],
    key: [u8; KEY_LEN],
    udp_port: u16,
) -> Result<Profile, ProfileError> {
    if capture.is_empty() {
        return Err(ProfileError::EmptyCapture);
    }
    if capture.len() < 2 {
        return Err(ProfileError::TooFewRecords(capture.len()));
    }
    let datagram_len = validate_schema(schema)?;

    let mut tables: Vec<ObservationTable> = vec![ObservationTable::default(); schema.len()];
    let mut delays = Vec::with_capacity(capture.len() - 1);

    for (index, rec) in capture.iter().enumerate() {
        if rec.payload.len() != datagram_len {
            return Err(ProfileError::LengthMismatch {
                index,
                expected: datagram_len,
                got: rec.payload.len(),
            });
        }
        if index > 0 {
            let dt = rec.timestamp - capture[index - 1].timestamp;
            if dt < 0.0 {
                return Err(ProfileError::NonMonotonicTimestamps { index });
            }
            delays.push(dt);
        }
        for (fi, field) in schema.iter().enumerate() {
            let value = &rec.payload[field.offset..field.offset + field.width];
            match field.kind {
                FieldKind::Encoded => {
                    if tables[fi].index_of(value).is_none() {
                        tables[fi].observations.push(value.to_vec());
                    }
                }
                FieldKind::Constant => {
                    if tables[fi].observations.is_empty() {
                        tables[fi].observations.push(value.to_vec());
                    } else if tables[fi].observations[0] != value {
                        return Err(ProfileError::ConstantVaries {
                            field: field.name.clone(),
                            index,
                        });
                    }
                }
                FieldKind::Computed => {
                    let rule = field.rule.as_deref().expect("validated above");
                    let expected =
                        checksum::apply_rule(rule, &rec.payload[..field.offset], field.width)?;
                    if expected != value {
                        return Err(ProfileError::RuleMismatch {
                            field: field.name.clone(),
                            index,
                        });
                    }
                }
            }
        }
    }

    Ok(Profile {
        schema: schema.to_vec(),
        tables,
        delay_corpus: DelayCorpus { delays },
        key,
        datagram_len,
        udp_port,
    })
}

impl Profile {
    /// (theoretical bits S, usable bits B) per datagram. Only encoded fields
    /// contribute: S = sum of log2(count), B = sum of floor(log2(count)).
    pub fn capacity(&self) -> (f64, u32) {
        let mut theoretical = 0.0f64;
        let mut usable = 0u32;
        for (field, table) in self.schema.iter().zip(&self.tables) {
            if field.kind == FieldKind::Encoded {
                theoretical += (table.count() as f64).log2();
                usable += table.usable_bits();
            }
        }
        (theoretical, usable)
    }

    pub fn theoretical_bits(&self) -> f64 {
        self.capacity().0
    }

    pub fn usable_bits(&self) -> u32 {
        self.capacity().1
    }

    /// Upper bound on goodput: S / T_avg bits per second.
    pub fn theoretical_goodput(&self, t_avg: f64) -> Result<f64, ProfileError> {
        if t_avg <= 0.0 {
            return Err(ProfileError::NonPositiveDelay(t_avg));
        }
        Ok(self.theoretical_bits() / t_avg)
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let len = validate_schema(&self.schema)?;
        if len != self.datagram_len {
            return Err(ProfileError::Document(format!(
                "schema widths sum to {len} but datagram_len is {}",
                self.datagram_len
            )));
        }
        if self.tables.len() != self.schema.len() {
            return Err(ProfileError::Document(
                "one observation table required per schema field".into(),
            ));
        }
        for (field, table) in self.schema.iter().zip(&self.tables) {
            match field.kind {
                FieldKind::Computed => {
                    if !table.observations.is_empty() {
                        return Err(ProfileError::Document(format!(
                            "computed field `{}` must not carry observations",
                            field.name
                        )));
                    }
                }
                FieldKind::Constant => {
                    if table.count() != 1 {
                        return Err(ProfileError::Document(format!(
                            "constant field `{}` must have exactly one observation",
                            field.name
                        )));
                    }
                }
                FieldKind::Encoded => {
                    if table.count() == 0 {
                        return Err(ProfileError::Document(format!(
                            "encoded field `{}` has no observations",
                            field.name
                        )));
                    }
                }
            }
            for obs in &table.observations {
                if obs.len() != field.width {
                    return Err(ProfileError::ObservationWidth {
                        field: field.name.clone(),
                    });
                }
            }
            let mut seen = std::collections::HashSet::new();
            for obs in &table.observations {
                if !seen.insert(obs.clone()) {
                    return Err(ProfileError::DuplicateObservation {
                        field: field.name.clone(),
                    });
                }
            }
        }
        for d in &self.delay_corpus.delays {
            if *d < 0.0 || !d.is_finite() {
                return Err(ProfileError::Document("negative or non-finite delay".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// serialization

#[derive(Serialize, Deserialize)]
struct TableDoc {
    field: String,
    observations: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ProfileDoc {
    version: u32,
    datagram_len: usize,
    udp_port: u16,
    key: String,
    schema: Vec<FieldSpec>,
    tables: Vec<TableDoc>,
    delays: Vec<f64>,
}

pub fn save_profile(profile: &Profile) -> Result<String, ProfileError> {
    profile.validate()?;
    let doc = ProfileDoc {
        version: PROFILE_VERSION,
        datagram_len: profile.datagram_len,
        udp_port: profile.udp_port,
        key: hex::encode(profile.key),
        schema: profile.schema.clone(),
        tables: profile
            .schema
            .iter()
            .zip(&profile.tables)
            .map(|(f, t)| TableDoc {
                field: f.name.clone(),
                observations: t.observations.iter().map(hex::encode).collect(),
            })
            .collect(),
        delays: profile.delay_corpus.delays.clone(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| ProfileError::Document(e.to_string()))
}

pub fn load_profile(text: &str) -> Result<Profile, ProfileError> {
    let doc: ProfileDoc =
        serde_json::from_str(text).map_err(|e| ProfileError::Document(e.to_string()))?;
    if doc.version != PROFILE_VERSION {
        return Err(ProfileError::UnknownVersion(doc.version));
    }
    let key_bytes = hex::decode(&doc.key).map_err(|e| ProfileError::Document(e.to_string()))?;
    let key: [u8; KEY_LEN] = key_bytes
        .try_into()
        .map_err(|_| ProfileError::Document("key must be 16 bytes of hex".into()))?;
    if doc.tables.len() != doc.schema.len() {
        return Err(ProfileError::Document(
            "tables and schema fields must align one-to-one".into(),
        ));
    }
    let mut tables = Vec::with_capacity(doc.tables.len());
    for (field, table) in doc.schema.iter().zip(&doc.tables) {
        if table.field != field.name {
            return Err(ProfileError::Document(format!(
                "table `{}` does not match schema field `{}`",
                table.field, field.name
            )));
        }
        let observations = table
            .observations
            .iter()
            .map(|h| hex::decode(h).map_err(|e| ProfileError::Document(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        tables.push(ObservationTable { observations });
    }
    let profile = Profile {
        schema: doc.schema,
        tables,
        delay_corpus: DelayCorpus { delays: doc.delays },
        key,
        datagram_len: doc.datagram_len,
        udp_port: doc.udp_port,
    };
    profile.validate()?;
    Ok(profile)
}
