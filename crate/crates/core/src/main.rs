//! Command line front end: learn a profile and timing model from a capture,
//! inspect capacity, run tunnel endpoints, and verify candidate traffic
//! against a reference model.
//!
//! Exit codes: 0 success (or statistical equivalence), 1 statistical
//! rejection, 2 usage or input errors.

use std::fs;
use std::net::{SocketAddr, TcpListener, ToSocketAddrs, UdpSocket};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mimic_tunnel::framing::chunk_size_for;
use mimic_tunnel::profile::{
    ingest_capture, load_profile, parse_capture, save_profile, FieldKind, FieldSpec, Profile,
    KEY_LEN,
};
use mimic_tunnel::stats::compare_models;
use mimic_tunnel::timing::{infer_from_corpus, load_model, parse_delays, save_model};
use mimic_tunnel::tunnel::{run_client, run_server, CommonConfig, StatusReport};
use mimic_tunnel::ModelComparison64;

#[derive(Parser)]
#[command(
    name = "mimic-tunnel",
    version,
    about = "Covert byte-stream tunnel over protocol-mimicking datagrams"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Learn a profile and timing model from a capture
    Learn(LearnArgs),
    /// Report a profile's per-field and total encoding capacity
    Capacity(CapacityArgs),
    /// Run the client endpoint (forwards a local stream to the peer)
    Client(ClientArgs),
    /// Run the server endpoint (forwards tunneled data to a target)
    Server(ServerArgs),
    /// Test a candidate delay corpus against a reference timing model
    Verify(VerifyArgs),
}

/// Schema document: field layout plus the session constants a capture
/// cannot teach.
#[derive(Serialize, Deserialize)]
struct SchemaDoc {
    datagram_len: usize,
    udp_port: u16,
    /// 16-byte frame cipher key, hex.
    key: String,
    fields: Vec<FieldSpec>,
}

#[derive(Args)]
struct LearnArgs {
    /// Capture file: `<timestamp_seconds> <hex_payload>` per line
    #[arg(long)]
    capture: PathBuf,
    /// Schema document (JSON)
    #[arg(long)]
    schema: PathBuf,
    /// Output path for the profile document
    #[arg(long)]
    profile_out: PathBuf,
    /// Output path for the timing model document
    #[arg(long)]
    model_out: PathBuf,
    /// Histogram bin width in seconds
    #[arg(long, default_value_t = 0.001)]
    bin_width: f64,
    /// Peak threshold as a fraction of the tallest bin
    #[arg(long, default_value_t = 0.05)]
    min_prominence: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CapacityArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EndpointArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Pacing and pad randomness seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Simulated send-side datagram loss rate, for testing
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
    #[arg(long, default_value_t = 0)]
    loss_seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ClientArgs {
    /// Peer (server) address
    address: String,
    /// Peer UDP port; defaults to the profile's port
    port: Option<u16>,
    /// Local port accepting the application's stream connection
    #[arg(long)]
    listen_port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    listen_addr: String,
    #[command(flatten)]
    common: EndpointArgs,
}

#[derive(Args)]
struct ServerArgs {
    /// Target service address
    address: String,
    /// Target service port
    port: u16,
    /// UDP listen address; the port defaults to the profile's port
    #[arg(long, default_value = "0.0.0.0")]
    udp_addr: String,
    #[arg(long)]
    udp_port: Option<u16>,
    #[command(flatten)]
    common: EndpointArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Reference timing model document
    #[arg(long)]
    model: PathBuf,
    /// Candidate delay corpus: one seconds value per line
    #[arg(long, conflicts_with = "capture")]
    delays: Option<PathBuf>,
    /// Candidate capture file; delays are successive timestamp gaps
    #[arg(long)]
    capture: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Subsample size for the distribution test
    #[arg(long, default_value_t = 100)]
    ks_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.cmd {
        Cmd::Learn(args) => cmd_learn(args),
        Cmd::Capacity(args) => cmd_capacity(args),
        Cmd::Client(args) => cmd_client(args),
        Cmd::Server(args) => cmd_server(args),
        Cmd::Verify(args) => cmd_verify(args),
    }
}

fn read(path: &PathBuf) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &PathBuf, text: &str) -> Result<(), String> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn parse_key(hex_key: &str) -> Result<[u8; KEY_LEN], String> {
    let bytes = hex::decode(hex_key).map_err(|e| format!("schema key: {e}"))?;
    bytes
        .try_into()
        .map_err(|_| format!("schema key must be {KEY_LEN} bytes"))
}

fn resolve(address: &str, port: u16) -> Result<SocketAddr, String> {
    (address, port)
        .to_socket_addrs()
        .map_err(|e| format!("{address}:{port}: {e}"))?
        .next()
        .ok_or_else(|| format!("{address}:{port}: no address"))
}

fn cmd_learn(args: LearnArgs) -> Result<ExitCode, String> {
    let records = parse_capture(&read(&args.capture)?).map_err(|e| e.to_string())?;
    let doc: SchemaDoc =
        serde_json::from_str(&read(&args.schema)?).map_err(|e| format!("schema: {e}"))?;
    let key = parse_key(&doc.key)?;

    let profile =
        ingest_capture(&records, &doc.fields, key, doc.udp_port).map_err(|e| e.to_string())?;
    if profile.datagram_len != doc.datagram_len {
        return Err(format!(
            "schema declares {} byte datagrams but the fields cover {}",
            doc.datagram_len, profile.datagram_len
        ));
    }
    let model = infer_from_corpus(
        &profile.delay_corpus.delays,
        args.bin_width,
        args.min_prominence,
    )
    .map_err(|e| e.to_string())?;

    write(&args.profile_out, &save_profile(&profile).map_err(|e| e.to_string())?)?;
    write(&args.model_out, &save_model(&model).map_err(|e| e.to_string())?)?;

    let (theoretical, usable) = profile.capacity();
    let mean = profile.delay_corpus.mean();
    let goodput = profile
        .theoretical_goodput(mean)
        .map_err(|e| e.to_string())?;
    if args.json {
        let out = serde_json::json!({
            "theoretical_bits": theoretical,
            "usable_bits": usable,
            "mean_delay_seconds": mean,
            "theoretical_goodput_bps": goodput,
            "states": model.states(),
            "records": records.len(),
        });
        println!("{}", serde_json::to_string_pretty(&out).unwrap());
    } else {
        println!("records:                 {}", records.len());
        println!("theoretical-bits:        {theoretical:.4}");
        println!("usable-bits:             {usable}");
        println!("mean-delay-seconds:      {mean:.6}");
        println!("theoretical-goodput-bps: {goodput:.1}");
        println!("timing-states:           {}", model.states());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_capacity(args: CapacityArgs) -> Result<ExitCode, String> {
    let profile = load_profile(&read(&args.profile)?).map_err(|e| e.to_string())?;
    let (theoretical, usable) = profile.capacity();
    let chunk = chunk_size_for(&profile).ok();

    if args.json {
        let fields: Vec<_> = profile
            .schema
            .iter()
            .zip(&profile.tables)
            .map(|(f, t)| {
                serde_json::json!({
                    "field": f.name,
                    "kind": f.kind,
                    "observations": t.count(),
                    "usable_bits": if f.kind == FieldKind::Encoded { t.usable_bits() } else { 0 },
                })
            })
            .collect();
        let out = serde_json::json!({
            "fields": fields,
            "theoretical_bits": theoretical,
            "usable_bits": usable,
            "chunk_bytes": chunk,
        });
        println!("{}", serde_json::to_string_pretty(&out).unwrap());
    } else {
        for (f, t) in profile.schema.iter().zip(&profile.tables) {
            match f.kind {
                FieldKind::Encoded => {
                    println!("{}: {} obs, {} bits", f.name, t.count(), t.usable_bits())
                }
                FieldKind::Constant => println!("{}: constant", f.name),
                FieldKind::Computed => println!("{}: computed", f.name),
            }
        }
        println!("theoretical-bits: {theoretical:.4}");
        println!("usable-bits:      {usable}");
        match chunk {
            Some(c) => println!("chunk-bytes:      {c}"),
            None => println!("chunk-bytes:      none (profile too small to carry frames)"),
        }
    }
    if chunk.is_none() {
        return Err("profile too small: not enough encodable bits for one frame".into());
    }
    Ok(ExitCode::SUCCESS)
}

fn endpoint_config(args: &EndpointArgs) -> Result<(Profile, CommonConfig), String> {
    let profile = load_profile(&read(&args.profile)?).map_err(|e| e.to_string())?;
    let model = load_model(&read(&args.model)?).map_err(|e| e.to_string())?;
    let mut cfg = CommonConfig::new(profile.clone(), model, args.seed);
    if args.loss > 0.0 {
        cfg.loss = Some((args.loss, args.loss_seed));
    }
    Ok((profile, cfg))
}

fn finish(report: StatusReport, json: bool) -> Result<ExitCode, String> {
    if json {
        println!("{}", serde_json::to_string_pretty(&report).unwrap());
    } else {
        print!("{report}");
    }
    match report.failure {
        Some(reason) => Err(reason),
        None => Ok(ExitCode::SUCCESS),
    }
}

fn cmd_client(args: ClientArgs) -> Result<ExitCode, String> {
    let (profile, cfg) = endpoint_config(&args.common)?;
    let peer = resolve(&args.address, args.port.unwrap_or(profile.udp_port))?;
    let udp = UdpSocket::bind(("0.0.0.0", 0)).map_err(|e| format!("udp bind: {e}"))?;
    let listener = TcpListener::bind((args.listen_addr.as_str(), args.listen_port))
        .map_err(|e| format!("listen {}:{}: {e}", args.listen_addr, args.listen_port))?;
    let stop = AtomicBool::new(false);
    let report = run_client(&cfg, udp, peer, listener, &stop).map_err(|e| e.to_string())?;
    finish(report, args.common.json)
}

fn cmd_server(args: ServerArgs) -> Result<ExitCode, String> {
    let (profile, cfg) = endpoint_config(&args.common)?;
    let target = resolve(&args.address, args.port)?;
    let udp_port = args.udp_port.unwrap_or(profile.udp_port);
    let udp = UdpSocket::bind((args.udp_addr.as_str(), udp_port))
        .map_err(|e| format!("udp bind {}:{udp_port}: {e}", args.udp_addr))?;
    let stop = AtomicBool::new(false);
    let report = run_server(&cfg, udp, target, &stop).map_err(|e| e.to_string())?;
    finish(report, args.common.json)
}

fn capture_gaps(text: &str) -> Result<Vec<f64>, String> {
    let records = parse_capture(text).map_err(|e| e.to_string())?;
    if records.len() < 2 {
        return Err("need at least 2 capture records for delays".into());
    }
    records
        .windows(2)
        .map(|w| {
            let d = w[1].timestamp - w[0].timestamp;
            if d < 0.0 {
                Err("capture timestamps are not monotonic".into())
            } else {
                Ok(d)
            }
        })
        .collect()
}

fn print_comparison(cmp: &ModelComparison64, alpha: f64) {
    println!("state  chi2        df  p-value   verdict");
    for (label, r) in &cmp.per_state {
        println!(
            "{label}      {:<10.4}  {}   {:<8.4}  {}",
            r.statistic,
            r.df,
            r.p_value,
            if r.reject { "reject" } else { "fail-to-reject" }
        );
    }
    println!(
        "ks: D={:.5} threshold={:.5} p={:.4} -> {}",
        cmp.ks.d_statistic,
        cmp.ks.threshold,
        cmp.ks.p_value,
        if cmp.ks.reject { "reject" } else { "fail-to-reject" }
    );
    if !cmp.missing_states.is_empty() {
        println!("missing-states: {:?}", cmp.missing_states);
    }
    println!(
        "overall at alpha {alpha}: {}",
        if cmp.overall_equivalent {
            "equivalent"
        } else {
            "not equivalent"
        }
    );
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, String> {
    let model = load_model(&read(&args.model)?).map_err(|e| e.to_string())?;
    let candidate = match (&args.delays, &args.capture) {
        (Some(path), None) => parse_delays(&read(path)?).map_err(|e| e.to_string())?,
        (None, Some(path)) => capture_gaps(&read(path)?)?,
        _ => return Err("provide exactly one of --delays or --capture".into()),
    };
    let cmp = compare_models(&model, &candidate, args.alpha, args.ks_samples, args.seed)
        .map_err(|e| e.to_string())?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&cmp).unwrap());
    } else {
        print_comparison(&cmp, args.alpha);
    }
    Ok(if cmp.overall_equivalent {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
