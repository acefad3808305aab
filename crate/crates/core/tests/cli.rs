//! End-to-end checks of the command line front end via the built binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mimic_tunnel::fixtures;
use mimic_tunnel::profile::save_profile;
use mimic_tunnel::timing::{generate_sequence, infer_from_corpus, save_model};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mimic-tunnel"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_schema(dir: &Path) -> std::path::PathBuf {
    let profile = fixtures::fixture_profile();
    let doc = serde_json::json!({
        "datagram_len": profile.datagram_len,
        "udp_port": profile.udp_port,
        "key": hex::encode(profile.key),
        "fields": profile.schema,
    });
    let path = dir.join("schema.json");
    fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

fn write_capture(dir: &Path, n: usize) -> std::path::PathBuf {
    let profile = fixtures::fixture_profile();
    let delays = fixtures::synchrophasor_like_corpus(n, 3);
    let records = fixtures::synth_capture(&profile, &delays);
    let path = dir.join("capture.txt");
    fs::write(&path, fixtures::capture_to_text(&records)).unwrap();
    path
}

#[test]
fn learn_then_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let schema = write_schema(dir.path());
    let capture = write_capture(dir.path(), 2_000);
    let profile_out = dir.path().join("profile.json");
    let model_out = dir.path().join("model.json");

    let out = bin()
        .args(["learn", "--capture"])
        .arg(&capture)
        .arg("--schema")
        .arg(&schema)
        .arg("--profile-out")
        .arg(&profile_out)
        .arg("--model-out")
        .arg(&model_out)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("usable-bits:             516"), "{text}");
    assert!(text.contains("timing-states:           3"), "{text}");

    let out = bin()
        .args(["capacity", "--profile"])
        .arg(&profile_out)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("f01: 64 obs, 6 bits"), "{text}");
    assert!(text.contains("usable-bits:      516"), "{text}");
    assert!(text.contains("chunk-bytes:      64"), "{text}");
}

#[test]
fn capacity_rejects_a_profile_too_small_to_frame() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.json");
    fs::write(&path, save_profile(&fixtures::profile_with_counts(&[8])).unwrap()).unwrap();
    let out = bin().args(["capacity", "--profile"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let text = stdout(&out);
    assert!(text.contains("f1: 8 obs, 3 bits"), "{text}");
    assert!(stderr(&out).contains("too small"));
}

#[test]
fn learn_needs_two_records() {
    let dir = tempfile::tempdir().unwrap();
    let schema = write_schema(dir.path());
    let profile = fixtures::fixture_profile();
    let records = fixtures::synth_capture(&profile, &[]);
    let capture = dir.path().join("one.txt");
    fs::write(&capture, fixtures::capture_to_text(&records)).unwrap();
    let out = bin()
        .args(["learn", "--capture"])
        .arg(&capture)
        .arg("--schema")
        .arg(&schema)
        .arg("--profile-out")
        .arg(dir.path().join("p.json"))
        .arg("--model-out")
        .arg(dir.path().join("m.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("at least 2 capture records"),
        "{}",
        stderr(&out)
    );
}

fn write_model(dir: &Path) -> (std::path::PathBuf, mimic_tunnel::TimingModel64) {
    let corpus = fixtures::synchrophasor_like_corpus(20_000, 9);
    let model = infer_from_corpus(&corpus, 0.001, 0.05).unwrap();
    let path = dir.join("model.json");
    fs::write(&path, save_model(&model).unwrap()).unwrap();
    (path, model)
}

#[test]
fn verify_accepts_self_generated_delays() {
    let dir = tempfile::tempdir().unwrap();
    let (model_path, model) = write_model(dir.path());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let delays = generate_sequence(&model, 0, 10_000, &mut rng);
    let delays_path = dir.path().join("delays.txt");
    let text: String = delays.iter().map(|d| format!("{d}\n")).collect();
    fs::write(&delays_path, text).unwrap();

    let run = || {
        bin()
            .args(["verify", "--model"])
            .arg(&model_path)
            .arg("--delays")
            .arg(&delays_path)
            .args(["--seed", "4"])
            .output()
            .unwrap()
    };
    let out = run();
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("fail-to-reject"), "{text}");
    assert!(text.contains("overall at alpha 0.05: equivalent"), "{text}");
    // seeded reports are byte-identical across runs
    assert_eq!(stdout(&run()), text);
}

#[test]
fn verify_rejects_shifted_delays() {
    let dir = tempfile::tempdir().unwrap();
    let (model_path, model) = write_model(dir.path());
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let delays = generate_sequence(&model, 0, 10_000, &mut rng);
    let delays_path = dir.path().join("shifted.txt");
    let text: String = delays.iter().map(|d| format!("{}\n", d + 0.02)).collect();
    fs::write(&delays_path, text).unwrap();

    let out = bin()
        .args(["verify", "--model"])
        .arg(&model_path)
        .arg("--delays")
        .arg(&delays_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stdout(&out));
    assert!(stdout(&out).contains("not equivalent"));
}

#[test]
fn verify_requires_one_candidate_source() {
    let dir = tempfile::tempdir().unwrap();
    let (model_path, _) = write_model(dir.path());
    let out = bin()
        .args(["verify", "--model"])
        .arg(&model_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
