//! Message segmentation and frame encryption.
//!
//! A message is a 4-byte big-endian length prefix plus payload. It is split
//! into fixed-size chunks; each chunk carries a one-byte sequence/type tag
//! and is encrypted as a unit with AES-128 in ECB mode, so frames tolerate
//! reordering on the wire.

use aes::cipher::{generic_array::GenericArray, BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes128;
use rand::Rng;
use thiserror::Error;

use crate::profile::Profile;

pub const BLOCK: usize = 16;
pub const MIN_CHUNK: usize = 32;
/// Data frames use tags 0..=250; 251-253 are reserved.
pub const MAX_DATA_SEQ: u8 = 250;
pub const SEQ_ACK: u8 = 0xFE;
pub const SEQ_CHAFF: u8 = 0xFF;

#[derive(Debug, Error)]
pub enum FramingError {
    #[error("chunk size {0} must be a multiple of {BLOCK} and at least {MIN_CHUNK}")]
    BadChunkSize(usize),
    #[error("message payload is empty")]
    EmptyPayload,
    #[error("message needs {needed} chunks but the sequence space allows {max}")]
    MessageTooLarge { needed: usize, max: usize },
    #[error("frames missing: {0:?}")]
    Incomplete(Vec<u8>),
    #[error("declared length {declared} exceeds the {available} available bytes")]
    Corrupt { declared: usize, available: usize },
    #[error("frame plaintext/ciphertext must be exactly {expected} bytes, got {got}")]
    BlockSize { expected: usize, got: usize },
    #[error("profile carries {usable} usable bits; at least 256 are required")]
    ProfileTooSmall { usable: u32 },
    #[error("duplicate frame with sequence {0}")]
    DuplicateSeq(u8),
}

/// One plaintext chunk: tag byte plus `chunk_bytes - 1` body bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub seq: u8,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn is_data(&self) -> bool {
        self.seq <= MAX_DATA_SEQ
    }

    pub fn is_ack(&self) -> bool {
        self.seq == SEQ_ACK
    }

    pub fn is_chaff(&self) -> bool {
        self.seq == SEQ_CHAFF
    }
}

fn check_chunk_size(chunk_bytes: usize) -> Result<(), FramingError> {
    if chunk_bytes < MIN_CHUNK || chunk_bytes % BLOCK != 0 {
        return Err(FramingError::BadChunkSize(chunk_bytes));
    }
    Ok(())
}

/// Number of data frames a payload needs at the given chunk size.
pub fn frames_needed(payload_len: usize, chunk_bytes: usize) -> usize {
    let body = chunk_bytes - 1;
    (payload_len + 4).div_ceil(body)
}

/// Split `length prefix || payload` into sequenced frames; the last body is
/// filled out with random bytes.
pub fn segment(
    payload: &[u8],
    chunk_bytes: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Frame>, FramingError> {
    check_chunk_size(chunk_bytes)?;
    if payload.is_empty() {
        return Err(FramingError::EmptyPayload);
    }
    let body = chunk_bytes - 1;
    let needed = frames_needed(payload.len(), chunk_bytes);
    let max = MAX_DATA_SEQ as usize + 1;
    if needed > max {
        return Err(FramingError::MessageTooLarge { needed, max });
    }
    let mut buf = Vec::with_capacity(needed * body);
    buf.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    buf.extend_from_slice(payload);
    while buf.len() % body != 0 {
        buf.push(rng.gen());
    }
    Ok(buf
        .chunks(body)
        .enumerate()
        .map(|(i, chunk)| Frame {
            seq: i as u8,
            body: chunk.to_vec(),
        })
        .collect())
}

/// Rebuild the message payload from a complete frame set, in any order.
pub fn reassemble(frames: &[Frame], chunk_bytes: usize) -> Result<Vec<u8>, FramingError> {
    check_chunk_size(chunk_bytes)?;
    let body = chunk_bytes - 1;
    let mut by_seq: Vec<Option<&Frame>> = vec![None; frames.len()];
    let mut missing = Vec::new();
    for f in frames {
        let i = f.seq as usize;
        if i >= frames.len() {
            // some lower seq must be absent
            continue;
        }
        if by_seq[i].is_some() {
            return Err(FramingError::DuplicateSeq(f.seq));
        }
        by_seq[i] = Some(f);
    }
    for (i, slot) in by_seq.iter().enumerate() {
        if slot.is_none() {
            missing.push(i as u8);
        }
    }
    if !missing.is_empty() {
        return Err(FramingError::Incomplete(missing));
    }
    let mut buf = Vec::with_capacity(frames.len() * body);
    for f in by_seq.into_iter().flatten() {
        buf.extend_from_slice(&f.body);
    }
    if buf.len() < 4 {
        return Err(FramingError::Corrupt {
            declared: 0,
            available: buf.len(),
        });
    }
    let declared = u32::from_be_bytes(buf[0..4].try_into().unwrap()) as usize;
    if declared > buf.len() - 4 {
        return Err(FramingError::Corrupt {
            declared,
            available: buf.len() - 4,
        });
    }
    buf.drain(..4);
    buf.truncate(declared);
    Ok(buf)
}

/// ECB over the whole chunk, tag byte included.
pub fn encrypt_frame(frame: &Frame, key: &[u8; 16], chunk_bytes: usize) -> Result<Vec<u8>, FramingError> {
    check_chunk_size(chunk_bytes)?;
    if frame.body.len() != chunk_bytes - 1 {
        return Err(FramingError::BlockSize {
            expected: chunk_bytes,
            got: frame.body.len() + 1,
        });
    }
    let mut buf = Vec::with_capacity(chunk_bytes);
    buf.push(frame.seq);
    buf.extend_from_slice(&frame.body);
    let cipher = Aes128::new(GenericArray::from_slice(key));
    for block in buf.chunks_mut(BLOCK) {
        cipher.encrypt_block(GenericArray::from_mut_slice(block));
    }
    Ok(buf)
}

pub fn decrypt_frame(ciphertext: &[u8], key: &[u8; 16], chunk_bytes: usize) -> Result<Frame, FramingError> {
    check_chunk_size(chunk_bytes)?;
    if ciphertext.len() != chunk_bytes {
        return Err(FramingError::BlockSize {
            expected: chunk_bytes,
            got: ciphertext.len(),
        });
    }
    let mut buf = ciphertext.to_vec();
    let cipher = Aes128::new(GenericArray::from_slice(key));
    for block in buf.chunks_mut(BLOCK) {
        cipher.decrypt_block(GenericArray::from_mut_slice(block));
    }
    Ok(Frame {
        seq: buf[0],
        body: buf[1..].to_vec(),
    })
}

/// Largest chunk size (multiple of 16 bytes) whose bits fit the profile's
/// usable capacity. 64 bytes for the reference 516-bit profile.
pub fn chunk_size_for(profile: &Profile) -> Result<usize, FramingError> {
    let usable = profile.usable_bits();
    if usable < (MIN_CHUNK * 8) as u32 {
        return Err(FramingError::ProfileTooSmall { usable });
    }
    Ok(usable as usize / (BLOCK * 8) * BLOCK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(99)
    }

    #[test]
    fn exact_fit_is_one_frame() {
        let payload = vec![0xAB; 59];
        let frames = segment(&payload, 64, &mut rng()).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].seq, 0);
        assert_eq!(frames[0].body.len(), 63);
        assert_eq!(&frames[0].body[..4], &59u32.to_be_bytes());
        assert_eq!(&frames[0].body[4..], payload.as_slice());
    }

    #[test]
    fn one_byte_overflow_makes_two_frames() {
        let payload = vec![0xCD; 63];
        let frames = segment(&payload, 64, &mut rng()).unwrap();
        assert_eq!(frames.len(), 2);
        // second body: final 4 payload bytes then 59 pad bytes
        assert_eq!(&frames[1].body[..4], &[0xCD; 4]);
        assert_eq!(frames[1].body.len(), 63);
        assert_eq!(reassemble(&frames, 64).unwrap(), payload);
    }

    #[test]
    fn reassemble_is_order_independent() {
        let payload: Vec<u8> = (0..200u8).collect();
        let mut frames = segment(&payload, 64, &mut rng()).unwrap();
        frames.reverse();
        assert_eq!(reassemble(&frames, 64).unwrap(), payload);
    }

    #[test]
    fn missing_frame_is_reported() {
        let payload = vec![1u8; 200];
        let frames = segment(&payload, 64, &mut rng()).unwrap();
        assert_eq!(frames.len(), 4);
        let partial: Vec<Frame> = frames
            .iter()
            .filter(|f| f.seq != 1)
            .cloned()
            .collect();
        match reassemble(&partial, 64) {
            Err(FramingError::Incomplete(missing)) => assert!(missing.contains(&1)),
            other => panic!("expected incomplete, got {other:?}"),
        }
    }

    #[test]
    fn absurd_declared_length_is_corruption() {
        let mut frames = segment(&[5u8; 100], 64, &mut rng()).unwrap();
        frames[0].body[..4].copy_from_slice(&1_000_000u32.to_be_bytes());
        assert!(matches!(
            reassemble(&frames, 64),
            Err(FramingError::Corrupt { declared: 1_000_000, .. })
        ));
    }

    #[test]
    fn message_too_large_for_sequence_space() {
        let payload = vec![0u8; 251 * 63]; // 251 chunks of payload + length prefix
        assert!(matches!(
            segment(&payload, 64, &mut rng()),
            Err(FramingError::MessageTooLarge { .. })
        ));
    }

    #[test]
    fn cipher_roundtrip() {
        let mut r = rng();
        for _ in 0..20 {
            let mut key = [0u8; 16];
            r.fill(&mut key);
            let mut body = vec![0u8; 63];
            r.fill(body.as_mut_slice());
            let f = Frame { seq: r.gen_range(0..=250), body };
            let ct = encrypt_frame(&f, &key, 64).unwrap();
            assert_eq!(ct.len(), 64);
            assert_eq!(decrypt_frame(&ct, &key, 64).unwrap(), f);
        }
    }

    #[test]
    fn ecb_repeats_identical_blocks() {
        let f = Frame { seq: 0, body: vec![7u8; 63] };
        let ct = encrypt_frame(&f, &[1u8; 16], 64).unwrap();
        // body bytes 15.. are four identical 16-byte plaintext blocks
        assert_eq!(ct[16..32], ct[32..48]);
        assert_eq!(ct[32..48], ct[48..64]);
    }

    #[test]
    fn wrong_key_tag_misinterpretation_rate() {
        // decrypting with the wrong key yields a uniform tag byte, so the
        // frame still looks like data about 251/256 of the time
        let mut r = rng();
        let trials = 20_000;
        let mut looks_like_data = 0usize;
        let f = Frame { seq: 3, body: vec![0x55; 63] };
        for _ in 0..trials {
            let mut k1 = [0u8; 16];
            let mut k2 = [0u8; 16];
            r.fill(&mut k1);
            r.fill(&mut k2);
            let ct = encrypt_frame(&f, &k1, 64).unwrap();
            let g = decrypt_frame(&ct, &k2, 64).unwrap();
            if g.is_data() {
                looks_like_data += 1;
            }
        }
        let rate = looks_like_data as f64 / trials as f64;
        assert!((rate - 251.0 / 256.0).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn wrong_length_is_block_size_error() {
        assert!(matches!(
            decrypt_frame(&[0u8; 63], &[0u8; 16], 64),
            Err(FramingError::BlockSize { .. })
        ));
        let f = Frame { seq: 0, body: vec![0; 10] };
        assert!(matches!(
            encrypt_frame(&f, &[0u8; 16], 64),
            Err(FramingError::BlockSize { .. })
        ));
    }

    #[test]
    fn chunk_size_tracks_usable_bits() {
        use crate::fixtures::{fixture_profile, profile_with_counts};
        assert_eq!(chunk_size_for(&fixture_profile()).unwrap(), 64);
        // 512 usable bits: 32 fields of 2^16 observations
        let p512 = profile_with_counts(&vec![65536; 32]);
        assert_eq!(p512.usable_bits(), 512);
        assert_eq!(chunk_size_for(&p512).unwrap(), 64);
        // 511 usable bits
        let mut counts = vec![65536usize; 31];
        counts.push(32768); // 15 bits
        let p511 = profile_with_counts(&counts);
        assert_eq!(p511.usable_bits(), 511);
        assert_eq!(chunk_size_for(&p511).unwrap(), 48);
        // too small
        let tiny = profile_with_counts(&[4, 4]);
        assert!(matches!(
            chunk_size_for(&tiny),
            Err(FramingError::ProfileTooSmall { .. })
        ));
    }

    #[test]
    fn two_segmentations_differ_only_in_pad() {
        let payload = vec![9u8; 70];
        let mut r = rng();
        let a = segment(&payload, 64, &mut r).unwrap();
        let b = segment(&payload, 64, &mut r).unwrap();
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]); // random pad differs
        assert_eq!(reassemble(&a, 64).unwrap(), reassemble(&b, 64).unwrap());
    }

    proptest! {
        #[test]
        fn segment_reassemble_roundtrip(len in 1usize..15_000, seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut payload = vec![0u8; len];
            r.fill(payload.as_mut_slice());
            let mut frames = segment(&payload, 64, &mut r).unwrap();
            // shuffle
            for i in (1..frames.len()).rev() {
                frames.swap(i, r.gen_range(0..=i));
            }
            prop_assert_eq!(reassemble(&frames, 64).unwrap(), payload);
        }
    }
}
