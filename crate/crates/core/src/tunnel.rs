//! Covert channel endpoints. A client accepts one local byte-stream
//! connection and a server forwards to a target service; between them,
//! stream data rides model-paced datagrams that carry encrypted frames
//! under the host-protocol encoding. Chaff fills idle firings and acks
//! ride the reverse channel, so the wire never reveals queue state.

use std::collections::{BTreeMap, VecDeque};
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::framing::{
    chunk_size_for, decrypt_frame, encrypt_frame, reassemble, segment, Frame, FramingError,
    MAX_DATA_SEQ, SEQ_ACK, SEQ_CHAFF,
};
use crate::fte::{self, BitString, CodecError};
use crate::profile::Profile;
use crate::timing::{next_delay, TimingModel};

/// Bitmap wide enough for data tags 0..=250.
pub const ACK_BITMAP_BYTES: usize = 32;
/// Ack body: flags byte + generation byte + bitmap.
pub const ACK_BODY_MIN: usize = 2 + ACK_BITMAP_BYTES;
pub const DEFAULT_MAX_RETRANSMITS: u32 = 10;
/// Session fails after this long with an unacked message and no progress.
pub const DEFAULT_ACK_TIMEOUT: f64 = 30.0;
/// Retransmission timeout floor, seconds.
pub const RTO_FLOOR: f64 = 0.2;
pub const DEFAULT_READ_BLOCK: usize = 4096;

#[derive(Debug, Error)]
pub enum TunnelError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("framing: {0}")]
    Framing(#[from] FramingError),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("profile chunk of {0} bytes cannot carry an ack bitmap")]
    ChunkTooSmallForAcks(usize),
    #[error("local listener accepted no connection before stop")]
    NoConnection,
    #[error("target connect failed: {0}")]
    TargetConnect(std::io::Error),
}

#[derive(Debug, Clone)]
pub struct CommonConfig {
    pub profile: Profile,
    pub model: TimingModel<f64>,
    pub seed: u64,
    pub max_retransmits: u32,
    pub ack_timeout: f64,
    /// Simulated datagram loss on the send path: (rate, seed).
    pub loss: Option<(f64, u64)>,
    pub read_block: usize,
}

impl CommonConfig {
    pub fn new(profile: Profile, model: TimingModel<f64>, seed: u64) -> Self {
        CommonConfig {
            profile,
            model,
            seed,
            max_retransmits: DEFAULT_MAX_RETRANSMITS,
            ack_timeout: DEFAULT_ACK_TIMEOUT,
            loss: None,
            read_block: DEFAULT_READ_BLOCK,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Counters {
    pub data_sent: u64,
    pub data_received: u64,
    pub chaff_sent: u64,
    pub chaff_received: u64,
    pub acks_sent: u64,
    pub acks_received: u64,
    pub retransmissions: u64,
    /// Datagrams failing syntax or observation lookup.
    pub foreign_dropped: u64,
    /// Reserved tags, conflicting bodies, corrupt length prefixes.
    pub corrupt_dropped: u64,
    pub duplicates: u64,
    pub scheduler_overruns: u64,
    pub messages_completed: u64,
    pub messages_delivered: u64,
    pub payload_bits_acked: u64,
    pub payload_bits_delivered: u64,
    pub first_data_sent: Option<f64>,
    pub last_ack_received: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatusReport {
    pub counters: Counters,
    pub goodput_bps: f64,
    pub elapsed_seconds: f64,
    pub failure: Option<String>,
}

impl std::fmt::Display for StatusReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = &self.counters;
        writeln!(f, "frames-data-sent:      {}", c.data_sent)?;
        writeln!(f, "frames-data-received:  {}", c.data_received)?;
        writeln!(f, "frames-chaff-sent:     {}", c.chaff_sent)?;
        writeln!(f, "frames-chaff-received: {}", c.chaff_received)?;
        writeln!(f, "frames-ack-sent:       {}", c.acks_sent)?;
        writeln!(f, "frames-ack-received:   {}", c.acks_received)?;
        writeln!(f, "retransmissions:       {}", c.retransmissions)?;
        writeln!(f, "foreign-dropped:       {}", c.foreign_dropped)?;
        writeln!(f, "corrupt-dropped:       {}", c.corrupt_dropped)?;
        writeln!(f, "duplicates:            {}", c.duplicates)?;
        writeln!(f, "scheduler-overruns:    {}", c.scheduler_overruns)?;
        writeln!(f, "messages-completed:    {}", c.messages_completed)?;
        writeln!(f, "messages-delivered:    {}", c.messages_delivered)?;
        writeln!(f, "goodput-bps:           {:.1}", self.goodput_bps)?;
        writeln!(f, "elapsed-seconds:       {:.3}", self.elapsed_seconds)?;
        if let Some(reason) = &self.failure {
            writeln!(f, "session-failure:       {reason}")?;
        }
        Ok(())
    }
}

/// Application payload bits acked, over the span from the first data frame
/// to the final ack. Zero until a message completes.
pub fn measure_goodput(c: &Counters) -> f64 {
    match (c.first_data_sent, c.last_ack_received) {
        (Some(t0), Some(t1)) if t1 > t0 && c.messages_completed > 0 => {
            c.payload_bits_acked as f64 / (t1 - t0)
        }
        _ => 0.0,
    }
}

// ---------------------------------------------------------------------------
// pacing

/// Drift-free firing schedule over the timing model. Each firing draws the
/// next gap and advances the intended fire time; actual send lateness is
/// counted but never shifts the schedule.
pub struct PaceCore {
    model: TimingModel<f64>,
    state: usize,
    rng: ChaCha8Rng,
    next_fire: f64,
    pub overruns: u64,
}

impl PaceCore {
    pub fn new(model: TimingModel<f64>, seed: u64, now: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (delay, state) = next_delay(&model, 0, &mut rng);
        PaceCore {
            model,
            state,
            rng,
            next_fire: now + delay,
            overruns: 0,
        }
    }

    pub fn next_fire(&self) -> f64 {
        self.next_fire
    }

    /// Call once per transmission, at or after `next_fire`. Returns the
    /// freshly drawn gap to the following firing.
    pub fn fire(&mut self, actual_now: f64) -> f64 {
        let (delay, state) = next_delay(&self.model, self.state, &mut self.rng);
        self.state = state;
        self.next_fire += delay;
        if actual_now > self.next_fire {
            self.overruns += 1;
        }
        delay
    }
}

// ---------------------------------------------------------------------------
// wire helpers

pub fn encode_datagram(
    profile: &Profile,
    chunk: usize,
    frame: &Frame,
    rng: &mut impl Rng,
) -> Result<Vec<u8>, TunnelError> {
    let ciphertext = encrypt_frame(frame, &profile.key, chunk)?;
    let bits = BitString::from_bytes(&ciphertext);
    Ok(fte::encode(profile, &bits, rng)?)
}

pub fn decode_datagram(
    profile: &Profile,
    chunk: usize,
    payload: &[u8],
) -> Result<Frame, TunnelError> {
    let bits = fte::decode(profile, payload)?;
    let bytes = &bits.as_bytes()[..chunk];
    Ok(decrypt_frame(bytes, &profile.key, chunk)?)
}

#[derive(Debug, Clone, PartialEq)]
struct AckOut {
    generation: u8,
    bitmap: [u8; ACK_BITMAP_BYTES],
    done: bool,
}

fn bitmap_set(bitmap: &mut [u8; ACK_BITMAP_BYTES], seq: u8) {
    bitmap[seq as usize / 8] |= 1 << (seq % 8);
}

fn bitmap_get(bitmap: &[u8; ACK_BITMAP_BYTES], seq: u8) -> bool {
    bitmap[seq as usize / 8] & (1 << (seq % 8)) != 0
}

fn build_ack_body(ack: &AckOut, body_len: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut body = vec![0u8; body_len];
    body[0] = ack.done as u8;
    body[1] = ack.generation;
    body[2..ACK_BODY_MIN].copy_from_slice(&ack.bitmap);
    rng.fill(&mut body[ACK_BODY_MIN..]);
    body
}

fn parse_ack_body(body: &[u8]) -> Option<AckOut> {
    if body.len() < ACK_BODY_MIN {
        return None;
    }
    let mut bitmap = [0u8; ACK_BITMAP_BYTES];
    bitmap.copy_from_slice(&body[2..ACK_BODY_MIN]);
    Some(AckOut {
        done: body[0] & 1 == 1,
        generation: body[1],
        bitmap,
    })
}

// ---------------------------------------------------------------------------
// session state

struct OutMessage {
    payload_len: usize,
    frames: Vec<Frame>,
    acked: Vec<bool>,
    sent_at: Vec<Option<f64>>,
    retransmits: Vec<u32>,
}

impl OutMessage {
    fn new(payload_len: usize, frames: Vec<Frame>) -> Self {
        let n = frames.len();
        OutMessage {
            payload_len,
            frames,
            acked: vec![false; n],
            sent_at: vec![None; n],
            retransmits: vec![0; n],
        }
    }

    fn all_acked(&self) -> bool {
        self.acked.iter().all(|&a| a)
    }

    fn next_unsent(&self) -> Option<usize> {
        (0..self.frames.len()).find(|&i| self.sent_at[i].is_none())
    }

    /// Unacked frames whose last transmission is at least `rto` old.
    fn due_retransmissions(&self, now: f64, rto: f64) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| {
                !self.acked[i] && matches!(self.sent_at[i], Some(t) if now - t >= rto)
            })
            .collect()
    }
}

struct SendState {
    current: Option<OutMessage>,
    completed: u64,
    /// Frames of the last fully acked message; the next message must not
    /// reuse any of them, or the receiver would take it for a retransmit.
    prev_frames: Vec<Frame>,
    last_progress: f64,
}

struct RecvState {
    assembly: BTreeMap<u8, Vec<u8>>,
    delivered: u64,
    /// Frames of the last delivered message, for duplicate recognition.
    last_frames: Vec<Frame>,
}

struct Session {
    send: SendState,
    recv: RecvState,
    ack_out: Option<AckOut>,
    pending: VecDeque<Vec<u8>>,
    counters: Counters,
    peer: Option<SocketAddr>,
    local_eof: bool,
    failure: Option<String>,
}

impl Session {
    fn new(peer: Option<SocketAddr>) -> Self {
        Session {
            send: SendState {
                current: None,
                completed: 0,
                prev_frames: Vec::new(),
                last_progress: 0.0,
            },
            recv: RecvState {
                assembly: BTreeMap::new(),
                delivered: 0,
                last_frames: Vec::new(),
            },
            ack_out: None,
            pending: VecDeque::new(),
            counters: Counters::default(),
            peer,
            local_eof: false,
            failure: None,
        }
    }
}

/// Segment a payload so that no frame coincides with the previous message's
/// frames; a coinciding frame would be read as a stale retransmit. Pad
/// redraws almost always suffice; `None` means the payloads genuinely share
/// a full frame and the caller must split.
fn build_frames(
    payload: &[u8],
    prev: &[Frame],
    chunk: usize,
    rng: &mut impl Rng,
) -> Result<Option<Vec<Frame>>, FramingError> {
    for _ in 0..16 {
        let frames = segment(payload, chunk, rng)?;
        let collides = frames
            .iter()
            .any(|f| prev.iter().any(|p| p.seq == f.seq && p.body == f.body));
        if !collides {
            return Ok(Some(frames));
        }
    }
    Ok(None)
}

fn full_bitmap(frames: &[Frame]) -> [u8; ACK_BITMAP_BYTES] {
    let mut bm = [0u8; ACK_BITMAP_BYTES];
    for f in frames {
        bitmap_set(&mut bm, f.seq);
    }
    bm
}

fn apply_ack(session: &mut Session, ack: &AckOut, now: f64) {
    session.counters.acks_received += 1;
    let send = &mut session.send;
    let Some(msg) = send.current.as_mut() else {
        return;
    };
    if ack.generation != (send.completed % 256) as u8 {
        return; // stale generation
    }
    let mut progressed = false;
    for (i, f) in msg.frames.iter().enumerate() {
        if !msg.acked[i] && bitmap_get(&ack.bitmap, f.seq) {
            msg.acked[i] = true;
            progressed = true;
        }
    }
    if progressed {
        send.last_progress = now;
    }
    if ack.done && msg.all_acked() {
        session.counters.payload_bits_acked += msg.payload_len as u64 * 8;
        session.counters.messages_completed += 1;
        session.counters.last_ack_received = Some(now);
        let msg = send.current.take().unwrap();
        send.prev_frames = msg.frames;
        send.completed += 1;
    }
}

fn apply_data_frame(session: &mut Session, frame: Frame, chunk: usize, deliver: &mpsc::Sender<Vec<u8>>) {
    session.counters.data_received += 1;
    let recv = &mut session.recv;
    if recv
        .last_frames
        .iter()
        .any(|p| p.seq == frame.seq && p.body == frame.body)
    {
        // retransmit of the delivered message: its done ack was lost
        session.counters.duplicates += 1;
        session.ack_out = Some(AckOut {
            generation: (recv.delivered.wrapping_sub(1) % 256) as u8,
            bitmap: full_bitmap(&recv.last_frames),
            done: true,
        });
        return;
    }
    match recv.assembly.get(&frame.seq) {
        Some(body) if *body != frame.body => {
            session.counters.corrupt_dropped += 1;
            return;
        }
        Some(_) => {
            session.counters.duplicates += 1;
        }
        None => {
            recv.assembly.insert(frame.seq, frame.body);
        }
    }

    // completion check once the length-bearing first frame is in
    let mut done = false;
    if let Some(first) = recv.assembly.get(&0u8) {
        let declared = u32::from_be_bytes(first[..4].try_into().unwrap()) as usize;
        let needed = crate::framing::frames_needed(declared, chunk);
        if needed > MAX_DATA_SEQ as usize + 1 {
            session.counters.corrupt_dropped += 1;
            recv.assembly.clear();
            return;
        }
        if needed <= recv.assembly.len()
            && (0..needed as u8).all(|s| recv.assembly.contains_key(&s))
        {
            let frames: Vec<Frame> = recv
                .assembly
                .iter()
                .take(needed)
                .map(|(&seq, body)| Frame {
                    seq,
                    body: body.clone(),
                })
                .collect();
            match reassemble(&frames, chunk) {
                Ok(payload) => {
                    session.counters.payload_bits_delivered += payload.len() as u64 * 8;
                    session.counters.messages_delivered += 1;
                    let _ = deliver.send(payload);
                    recv.last_frames = frames;
                    recv.delivered += 1;
                    recv.assembly.clear();
                    done = true;
                }
                Err(_) => {
                    // corrupt length prefix; discard and start over
                    session.counters.corrupt_dropped += 1;
                    recv.assembly.clear();
                    return;
                }
            }
        }
    }

    let recv = &session.recv;
    session.ack_out = Some(if done {
        AckOut {
            generation: (recv.delivered.wrapping_sub(1) % 256) as u8,
            bitmap: full_bitmap(&recv.last_frames),
            done: true,
        }
    } else {
        let mut bm = [0u8; ACK_BITMAP_BYTES];
        for &seq in recv.assembly.keys() {
            bitmap_set(&mut bm, seq);
        }
        AckOut {
            generation: (recv.delivered % 256) as u8,
            bitmap: bm,
            done: false,
        }
    });
}

fn process_datagram(
    session: &mut Session,
    profile: &Profile,
    chunk: usize,
    payload: &[u8],
    from: SocketAddr,
    now: f64,
    deliver: &mpsc::Sender<Vec<u8>>,
) {
    if payload.len() != profile.datagram_len {
        session.counters.foreign_dropped += 1;
        return;
    }
    let frame = match decode_datagram(profile, chunk, payload) {
        Ok(f) => f,
        Err(_) => {
            session.counters.foreign_dropped += 1;
            return;
        }
    };
    if session.peer.is_none() {
        session.peer = Some(from);
    }
    if frame.is_chaff() {
        session.counters.chaff_received += 1;
    } else if frame.is_ack() {
        match parse_ack_body(&frame.body) {
            Some(ack) => apply_ack(session, &ack, now),
            None => session.counters.corrupt_dropped += 1,
        }
    } else if frame.is_data() {
        apply_data_frame(session, frame, chunk, deliver);
    } else {
        // reserved tags 251-253
        session.counters.corrupt_dropped += 1;
    }
}

// ---------------------------------------------------------------------------
// the session loops

/// Drive one covert channel session over `udp` against `peer` (learned from
/// the first valid datagram when `None`), bridging `stream`. Returns when
/// the stream ends and the channel is drained, on session failure, or when
/// `stop` is raised.
pub fn run_session(
    cfg: &CommonConfig,
    udp: UdpSocket,
    peer: Option<SocketAddr>,
    stream: TcpStream,
    stop: &AtomicBool,
) -> Result<StatusReport, TunnelError> {
    let chunk = chunk_size_for(&cfg.profile)?;
    if chunk - 1 < ACK_BODY_MIN {
        return Err(TunnelError::ChunkTooSmallForAcks(chunk));
    }
    let max_payload = (MAX_DATA_SEQ as usize + 1) * (chunk - 1) - 4;
    let read_block = cfg.read_block.min(max_payload);
    let rto = (4.0 * cfg.model.corpus_mean()).max(RTO_FLOOR);
    let linger = (4.0 * rto).max(0.5);

    let origin = Instant::now();
    let now = move || origin.elapsed().as_secs_f64();

    udp.set_read_timeout(Some(Duration::from_millis(20)))?;
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    stream.set_nodelay(true).ok();

    let session = Mutex::new(Session::new(peer));
    let done = AtomicBool::new(false);
    let (deliver_tx, deliver_rx) = mpsc::channel::<Vec<u8>>();
    let mut tcp_reader = stream.try_clone()?;
    let mut tcp_writer = stream.try_clone()?;

    let report = thread::scope(|scope| {
        // local stream -> pending payloads
        scope.spawn(|| {
            let mut buf = vec![0u8; read_block];
            loop {
                if done.load(Ordering::Relaxed) || stop.load(Ordering::Relaxed) {
                    break;
                }
                match tcp_reader.read(&mut buf) {
                    Ok(0) => {
                        session.lock().unwrap().local_eof = true;
                        break;
                    }
                    Ok(n) => {
                        session.lock().unwrap().pending.push_back(buf[..n].to_vec());
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut => {}
                    Err(_) => {
                        session.lock().unwrap().local_eof = true;
                        break;
                    }
                }
            }
        });

        // delivered messages -> local stream
        let session_ref = &session;
        let done_ref = &done;
        scope.spawn(move || loop {
            match deliver_rx.recv_timeout(Duration::from_millis(50)) {
                Ok(payload) => {
                    if tcp_writer.write_all(&payload).is_err() {
                        session_ref.lock().unwrap().local_eof = true;
                        break;
                    }
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    if done_ref.load(Ordering::Relaxed) || stop.load(Ordering::Relaxed) {
                        break;
                    }
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            }
        });

        // datagrams -> session state
        scope.spawn(|| {
            let mut buf = vec![0u8; 65_536];
            loop {
                if done.load(Ordering::Relaxed) || stop.load(Ordering::Relaxed) {
                    break;
                }
                match udp.recv_from(&mut buf) {
                    Ok((n, from)) => {
                        let mut s = session.lock().unwrap();
                        process_datagram(&mut s, &cfg.profile, chunk, &buf[..n], from, now(), &deliver_tx);
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut => {}
                    Err(_) => break,
                }
            }
            drop(deliver_tx);
        });

        // pace loop: the only sender
        let mut core = PaceCore::new(cfg.model.clone(), cfg.seed, now());
        let mut pad_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5DEECE66D));
        let mut loss = cfg
            .loss
            .map(|(rate, seed)| (rate, ChaCha8Rng::seed_from_u64(seed)));
        let mut linger_start: Option<f64> = None;
        let failure;
        loop {
            if stop.load(Ordering::Relaxed) {
                failure = session.lock().unwrap().failure.clone();
                break;
            }
            let wait = core.next_fire() - now();
            if wait > 0.0 {
                thread::sleep(Duration::from_secs_f64(wait.min(0.05)));
                if core.next_fire() > now() {
                    continue;
                }
            }

            let t = now();
            let mut s = session.lock().unwrap();

            if let Some(reason) = s.failure.clone() {
                failure = Some(reason);
                break;
            }
            let drained =
                s.local_eof && s.pending.is_empty() && s.send.current.is_none();
            if drained {
                let start = *linger_start.get_or_insert(t);
                if t - start > linger {
                    failure = None;
                    break;
                }
            } else {
                linger_start = None;
            }

            // start the next message when the channel is free
            if s.send.current.is_none() {
                if let Some(payload) = s.pending.pop_front() {
                    let prev = std::mem::take(&mut s.send.prev_frames);
                    let frames = match build_frames(&payload, &prev, chunk, &mut pad_rng) {
                        Ok(Some(frames)) => frames,
                        Ok(None) => {
                            // shares a full frame with the previous message:
                            // peel off one byte to force distinct framing
                            s.pending.push_front(payload[1..].to_vec());
                            segment(&payload[..1], chunk, &mut pad_rng).unwrap()
                        }
                        Err(e) => {
                            failure = Some(e.to_string());
                            break;
                        }
                    };
                    s.send.prev_frames = prev;
                    s.send.current = Some(OutMessage::new(payload.len(), frames));
                    s.send.last_progress = t;
                }
            }

            // ack-timeout watchdog
            if let Some(msg) = &s.send.current {
                if t - s.send.last_progress > cfg.ack_timeout {
                    failure = Some(format!(
                        "no ack progress for {:.0} s with {} frames outstanding",
                        cfg.ack_timeout,
                        msg.acked.iter().filter(|&&a| !a).count()
                    ));
                    break;
                }
            }

            // pick by priority: retransmission-due, unsent data, ack, chaff
            enum Pick {
                Data(usize, Frame),
                Ack(Frame),
                Chaff(Frame),
            }
            let mut failed_frame = None;
            let pick = if let Some(msg) = s.send.current.as_mut() {
                let due = msg.due_retransmissions(t, rto);
                if let Some(&i) = due.first() {
                    msg.retransmits[i] += 1;
                    if msg.retransmits[i] >= cfg.max_retransmits {
                        failed_frame = Some(msg.frames[i].seq);
                    }
                    Some(Pick::Data(i, msg.frames[i].clone()))
                } else {
                    msg.next_unsent().map(|i| Pick::Data(i, msg.frames[i].clone()))
                }
            } else {
                None
            };
            if let Some(seq) = failed_frame {
                failure = Some(format!(
                    "frame {seq} retransmitted {} times",
                    cfg.max_retransmits
                ));
                break;
            }
            let pick = pick
                .or_else(|| {
                    s.ack_out.take().map(|ack| {
                        Pick::Ack(Frame {
                            seq: SEQ_ACK,
                            body: build_ack_body(&ack, chunk - 1, &mut pad_rng),
                        })
                    })
                })
                .unwrap_or_else(|| {
                    let mut body = vec![0u8; chunk - 1];
                    pad_rng.fill(&mut body[..]);
                    Pick::Chaff(Frame {
                        seq: SEQ_CHAFF,
                        body,
                    })
                });

            let (frame, data_index) = match &pick {
                Pick::Data(i, f) => (f, Some(*i)),
                Pick::Ack(f) | Pick::Chaff(f) => (f, None),
            };
            let peer_addr = s.peer;
            let wire = match encode_datagram(&cfg.profile, chunk, frame, &mut pad_rng) {
                Ok(w) => w,
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            };
            debug_assert!(fte::validate_syntax(&cfg.profile, &wire));

            if let Some(addr) = peer_addr {
                match &pick {
                    Pick::Data(_, _) => {
                        s.counters.data_sent += 1;
                        if s.counters.first_data_sent.is_none() {
                            s.counters.first_data_sent = Some(t);
                        }
                    }
                    Pick::Ack(_) => s.counters.acks_sent += 1,
                    Pick::Chaff(_) => s.counters.chaff_sent += 1,
                }
                if let Some(i) = data_index {
                    let resend = {
                        let msg = s.send.current.as_mut().unwrap();
                        let resend = msg.sent_at[i].is_some();
                        msg.sent_at[i] = Some(t);
                        resend
                    };
                    if resend {
                        s.counters.retransmissions += 1;
                    }
                }
                let dropped = match &mut loss {
                    Some((rate, rng)) => rng.gen::<f64>() < *rate,
                    None => false,
                };
                if !dropped {
                    let _ = udp.send_to(&wire, addr);
                }
            }
            // no peer yet: the firing elapses unused; the schedule advances
            // regardless so the first datagram is not a timing tell

            drop(s);
            core.fire(now());
        }

        done.store(true, Ordering::Relaxed);
        let mut s = session.lock().unwrap();
        s.counters.scheduler_overruns = core.overruns;
        StatusReport {
            goodput_bps: measure_goodput(&s.counters),
            elapsed_seconds: now(),
            failure,
            counters: std::mem::take(&mut s.counters),
        }
    });

    Ok(report)
}

/// Client endpoint: accept one local connection, tunnel it to `peer`.
pub fn run_client(
    cfg: &CommonConfig,
    udp: UdpSocket,
    peer: SocketAddr,
    listener: TcpListener,
    stop: &AtomicBool,
) -> Result<StatusReport, TunnelError> {
    listener.set_nonblocking(true)?;
    let stream = loop {
        if stop.load(Ordering::Relaxed) {
            return Err(TunnelError::NoConnection);
        }
        match listener.accept() {
            Ok((stream, _)) => break stream,
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(e.into()),
        }
    };
    stream.set_nonblocking(false)?;
    run_session(cfg, udp, Some(peer), stream, stop)
}

/// Server endpoint: forward tunneled data to the target service; the peer
/// address is learned from the first valid datagram.
pub fn run_server(
    cfg: &CommonConfig,
    udp: UdpSocket,
    target: SocketAddr,
    stop: &AtomicBool,
) -> Result<StatusReport, TunnelError> {
    let stream = TcpStream::connect(target).map_err(TunnelError::TargetConnect)?;
    run_session(cfg, udp, None, stream, stop)
}
