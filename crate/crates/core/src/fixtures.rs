//! Synthetic profiles, captures, and delay corpora.
//!
//! Used heavily by the test suites; also handy for demo runs when no real
//! capture is at hand.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::checksum;
use crate::profile::{
    CaptureRecord, DelayCorpus, FieldKind, FieldSpec, ObservationTable, Profile,
};

pub const FIXTURE_KEY: [u8; 16] = [0x42; 16];

/// Profile shaped like the reference PMU stream: a 2-byte constant sync
/// word, 86 one-byte encoded fields with 64 observations each (6 bits per
/// field, 516 bits total), and a trailing CRC-16 field.
pub fn fixture_profile() -> Profile {
    let mut schema = vec![FieldSpec {
        name: "sync".into(),
        offset: 0,
        width: 2,
        kind: FieldKind::Constant,
        rule: None,
    }];
    let mut tables = vec![ObservationTable {
        observations: vec![vec![0xAA, 0x01]],
    }];
    for i in 0..86usize {
        schema.push(FieldSpec {
            name: format!("f{:02}", i + 1),
            offset: 2 + i,
            width: 1,
            kind: FieldKind::Encoded,
            rule: None,
        });
        // 64 distinct one-byte values, offset per field so tables differ
        tables.push(ObservationTable {
            observations: (0..64u16)
                .map(|v| vec![((v + i as u16 * 3) % 256) as u8])
                .collect(),
        });
    }
    schema.push(FieldSpec {
        name: "crc".into(),
        offset: 88,
        width: 2,
        kind: FieldKind::Computed,
        rule: Some(checksum::CRC16_CCITT_FALSE.into()),
    });
    tables.push(ObservationTable::default());

    Profile {
        schema,
        tables,
        delay_corpus: DelayCorpus { delays: vec![0.0333, 0.0334, 0.0333] },
        key: FIXTURE_KEY,
        datagram_len: 90,
        udp_port: 4712,
    }
}

/// Minimal profile with one encoded field per entry in `counts`, each field
/// holding that many distinct 2-byte observations.
pub fn profile_with_counts(counts: &[usize]) -> Profile {
    let mut schema = Vec::new();
    let mut tables = Vec::new();
    for (i, &count) in counts.iter().enumerate() {
        assert!(count >= 1 && count <= 65536);
        schema.push(FieldSpec {
            name: format!("f{}", i + 1),
            offset: i * 2,
            width: 2,
            kind: FieldKind::Encoded,
            rule: None,
        });
        tables.push(ObservationTable {
            observations: (0..count as u32)
                .map(|v| (v as u16).to_be_bytes().to_vec())
                .collect(),
        });
    }
    Profile {
        schema,
        tables,
        delay_corpus: DelayCorpus { delays: vec![0.03, 0.04] },
        key: FIXTURE_KEY,
        datagram_len: counts.len() * 2,
        udp_port: 4712,
    }
}

/// Standard normal draw via Box-Muller.
pub fn normal(rng: &mut impl Rng, mean: f64, sigma: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    mean + sigma * z
}

/// Delay corpus from a Markov chain over `modes.len()` states: each emitted
/// delay is normal around the entered state's mode.
pub fn markov_delays(
    rows: &[Vec<f64>],
    modes: &[f64],
    sigma: f64,
    n: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = 0usize;
    let mut delays = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut next = rows[state].len() - 1;
        for (j, p) in rows[state].iter().enumerate() {
            acc += p;
            if u < acc {
                next = j;
                break;
            }
        }
        state = next;
        delays.push(normal(&mut rng, modes[state], sigma).max(0.0));
    }
    delays
}

/// Transition rows used throughout the tests for the 3-state reference chain.
pub fn reference_rows() -> Vec<Vec<f64>> {
    vec![
        vec![0.1, 0.6, 0.3],
        vec![0.4, 0.4, 0.2],
        vec![0.25, 0.25, 0.5],
    ]
}

/// Modes bracketing the PMU stream's ~33 ms structure; under the reference
/// chain's stationary distribution the mean delay is ~0.0334 s.
pub fn reference_modes() -> Vec<f64> {
    vec![0.0165, 0.0328, 0.0483]
}

/// A synthetic three-mode corpus with mean near 0.0334 s.
pub fn synchrophasor_like_corpus(n: usize, seed: u64) -> Vec<f64> {
    markov_delays(&reference_rows(), &reference_modes(), 0.0012, n, seed)
}

/// Synthesize a capture for a profile: each encoded field cycles through its
/// observation table in order (so ingesting the capture reproduces the
/// tables exactly when there are enough records), constants and checksums
/// are valid, timestamps are spaced by `delays`.
pub fn synth_capture(profile: &Profile, delays: &[f64]) -> Vec<CaptureRecord> {
    let mut t = 0.0f64;
    let mut records = Vec::with_capacity(delays.len() + 1);
    for i in 0..=delays.len() {
        if i > 0 {
            t += delays[i - 1];
        }
        let mut payload = vec![0u8; profile.datagram_len];
        for (field, table) in profile.schema.iter().zip(&profile.tables) {
            let value: Vec<u8> = match field.kind {
                FieldKind::Constant => table.observations[0].clone(),
                FieldKind::Encoded => table.observations[i % table.count()].clone(),
                FieldKind::Computed => checksum::apply_rule(
                    field.rule.as_deref().unwrap(),
                    &payload[..field.offset],
                    field.width,
                )
                .unwrap(),
            };
            payload[field.offset..field.offset + field.width].copy_from_slice(&value);
        }
        records.push(CaptureRecord {
            timestamp: t,
            payload,
        });
    }
    records
}

/// Render records in the capture exchange format.
pub fn capture_to_text(records: &[CaptureRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{:.6} {}\n", r.timestamp, hex::encode(&r.payload)));
    }
    out
}
