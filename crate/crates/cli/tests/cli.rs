use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use focalcodec::bsq::CodeIndex;
use focalcodec::codec::Variant;
use focalcodec::io::{self, TokenStream};
use focalcodec::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const DIM: usize = 32;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_focalcodec"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn focalcodec")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key}= in {text}"))
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", stdout(o), stderr(o));
}

/// Asserts a one-line `error kind=<kind> message=...` failure.
fn assert_error(o: &Output, kind: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error kind={kind} message=")), "{err}");
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Trains a tiny fc25 model and a matching random vocoder.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("cfg.json"),
            format!(
                r#"{{"train": {{"steps": 4, "batch": 2, "seed": 3}},
                    "codec": {{"variant": "fc25", "latent_dim": 8}},
                    "synthetic": {{"n_utterances": 4, "frames": 40, "dim": {DIM}}}}}"#
            ),
        )
        .unwrap();
        let o = run(
            dir.path(),
            &["train", "--synthetic", "--config", "cfg.json", "--out", "m.ck", "--vocoder-out", "v.ck"],
        );
        assert_ok(&o);
        let f = Self { dir };
        f.features("a.fcf", 50, 1);
        f.features("b.fcf", 31, 2);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn features(&self, name: &str, frames: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        io::write_features(self.path(name), &Tensor::randn([frames, DIM], 1.0, &mut rng)).unwrap();
    }

    fn run(&self, args: &[&str]) -> Output {
        run(self.dir.path(), args)
    }
}

#[test]
fn encode_decode_length_law() {
    let f = Fixture::new();
    assert_ok(&f.run(&["encode", "--features", "a.fcf", "--model", "m.ck", "--variant", "fc25", "--out", "a.fct"]));
    let stream = io::read_token_stream(f.path("a.fct")).unwrap();
    assert_eq!(stream.variant, Variant::Fc25);
    assert_eq!(stream.tokens.len(), 25);
    let o = f.run(&["decode", "--tokens", "a.fct", "--model", "m.ck", "--vocoder", "v.ck", "--out", "a.wav"]);
    assert_ok(&o);
    assert_eq!(io::read_wav(f.path("a.wav")).unwrap().len(), 50 * 320);
    assert_eq!(std::fs::metadata(f.path("a.wav")).unwrap().len(), 32044);

    let o = f.run(&[
        "decode", "--tokens", "a.fct", "--model", "m.ck", "--vocoder", "v.ck", "--out", "s.wav", "--stream",
        "--chunk", "3000", "--left-context", "48000", "--overlap", "250",
    ]);
    assert_ok(&o);
    assert_eq!(io::read_wav(f.path("s.wav")).unwrap().len(), 50 * 320);
}

#[test]
fn batch_encode_matches_single_and_thread_count() {
    let f = Fixture::new();
    assert_ok(&f.run(&["encode", "--features", "b.fcf", "--model", "m.ck", "--out", "single.fct"]));
    for threads in ["1", "2"] {
        let o = bin()
            .current_dir(f.dir.path())
            .env("FOCALCODEC_THREADS", threads)
            .args(["encode", "--features", "a.fcf", "--features", "b.fcf", "--model", "m.ck"])
            .args(["--out", &format!("a{threads}.fct"), "--out", &format!("b{threads}.fct")])
            .output()
            .unwrap();
        assert_ok(&o);
        assert_eq!(stdout(&o).lines().count(), 2);
    }
    let read = |n: &str| std::fs::read(f.path(n)).unwrap();
    assert_eq!(read("a1.fct"), read("a2.fct"));
    assert_eq!(read("b1.fct"), read("b2.fct"));
    assert_eq!(read("b1.fct"), read("single.fct"));
    // 31 frames are edge-padded to 32 before halving.
    assert_eq!(io::read_token_stream(f.path("b1.fct")).unwrap().tokens.len(), 16);
}

#[test]
fn variant_mismatch_is_reported() {
    let f = Fixture::new();
    let o = f.run(&["encode", "--features", "a.fcf", "--model", "m.ck", "--variant", "fc50", "--out", "x.fct"]);
    assert_error(&o, "mismatch");
    assert!(!f.path("x.fct").exists());

    let stream = TokenStream {
        variant: Variant::Fc12_5,
        latent_dim: 8,
        sample_rate: 16000,
        tokens: vec![CodeIndex(1); 4],
    };
    io::write_token_stream(f.path("other.fct"), &stream).unwrap();
    let o = f.run(&["decode", "--tokens", "other.fct", "--model", "m.ck", "--vocoder", "v.ck", "--out", "x.wav"]);
    assert_error(&o, "mismatch");
    assert!(stderr(&o).contains("fc12_5"));
}

#[test]
fn usage_and_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["encode", "--bogus"]);
    assert_error(&o, "usage");
    assert_eq!(o.status.code(), Some(2));
    assert_error(&run(dir.path(), &["frobnicate"]), "usage");
    assert_error(&run(dir.path(), &["train", "--out", "m.ck"]), "usage");

    let o = run(dir.path(), &["analyze", "--tokens", "missing.fct"]);
    assert_error(&o, "io");
    assert!(stderr(&o).contains("missing.fct"));

    std::fs::write(dir.path().join("short.fct"), b"FCT1\x01\x00\x0d\x00").unwrap();
    assert_error(&run(dir.path(), &["analyze", "--tokens", "short.fct"]), "truncated");
    std::fs::write(dir.path().join("bad.fct"), b"NOPE").unwrap();
    assert_error(&run(dir.path(), &["analyze", "--tokens", "bad.fct"]), "format");

    let o = run(dir.path(), &["--help"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("selfcheck"));
}

#[test]
fn analyze_full_usage() {
    let dir = tempfile::tempdir().unwrap();
    let stream = TokenStream {
        variant: Variant::Fc50,
        latent_dim: 13,
        sample_rate: 16000,
        tokens: (0..8192).map(CodeIndex).collect(),
    };
    io::write_token_stream(dir.path().join("all.fct"), &stream).unwrap();
    let o = run(dir.path(), &["analyze", "--tokens", "all.fct"]);
    assert_ok(&o);
    let out = stdout(&o);
    assert!(out.lines().all(|l| l.contains('=')), "{out}");
    assert_eq!(value(&out, "code_usage"), "1.0000");
    assert_eq!(value(&out, "normalized_entropy"), "1.0000");
    assert_eq!(value(&out, "unique"), "8192");
    assert_eq!(value(&out, "token_rate_hz"), "50");
    assert_eq!(value(&out, "bitrate_bps"), "650");

    let o = run(dir.path(), &["analyze", "--tokens", "all.fct", "--text"]);
    assert_ok(&o);
    assert!(stdout(&o).lines().any(|l| l.starts_with("code usage") && l.ends_with("1.0000")));
}

#[test]
fn resynth_reports_rtf() {
    let f = Fixture::new();
    f.features("long.fcf", 500, 4);
    let o = f.run(&["resynth", "--features", "long.fcf", "--model", "m.ck", "--vocoder", "v.ck", "--out", "r.wav"]);
    assert_ok(&o);
    let out = stdout(&o);
    let audio: f64 = value(&out, "audio_seconds").parse().unwrap();
    let wall: f64 = value(&out, "wall_seconds").parse().unwrap();
    let rtf: f64 = value(&out, "rtf").parse().unwrap();
    assert_eq!(audio, 10.0);
    assert!(rtf > 1.0, "rtf {rtf}");
    if wall >= 0.01 {
        assert!((rtf - audio / wall).abs() / rtf < 0.1, "{out}");
    }
    assert_eq!(io::read_wav(f.path("r.wav")).unwrap().len(), 500 * 320);
}

#[test]
fn convert_writes_audio() {
    let f = Fixture::new();
    let o = f.run(&[
        "convert", "--source", "a.fcf", "--reference", "b.fcf", "--model", "m.ck", "--vocoder", "v.ck", "--k", "4",
        "--out", "c.wav",
    ]);
    assert_ok(&o);
    assert_eq!(io::read_wav(f.path("c.wav")).unwrap().len(), 50 * 320);
    let o = f.run(&[
        "convert", "--source", "a.fcf", "--reference", "b.fcf", "--model", "m.ck", "--vocoder", "v.ck", "--k", "40",
        "--out", "c.wav",
    ]);
    assert_error(&o, "config");
}

#[test]
fn training_is_deterministic() {
    let a = Fixture::new();
    let b = Fixture::new();
    assert_eq!(std::fs::read(a.path("m.ck")).unwrap(), std::fs::read(b.path("m.ck")).unwrap());
    assert_eq!(std::fs::read(a.path("v.ck")).unwrap(), std::fs::read(b.path("v.ck")).unwrap());
}

#[test]
fn train_from_directory() {
    let f = Fixture::new();
    std::fs::create_dir(f.path("data")).unwrap();
    f.features("data/u0.fcf", 20, 7);
    f.features("data/u1.fcf", 13, 8);
    std::fs::write(f.path("small.json"), r#"{"train": {"steps": 2, "batch": 2}}"#).unwrap();
    let o = f.run(&["train", "--data", "data", "--config", "small.json", "--out", "d.ck"]);
    assert_ok(&o);
    assert_eq!(value(&stdout(&o), "utterances"), "2");
    let model = io::load_codec(f.path("d.ck")).unwrap();
    assert_eq!(model.config.input_dim, DIM);

    std::fs::write(f.path("bad.json"), r#"{"train": {"stepz": 2}}"#).unwrap();
    let o = f.run(&["train", "--data", "data", "--config", "bad.json", "--out", "d.ck"]);
    assert_error(&o, "config");
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["selfcheck"]);
    assert_ok(&o);
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.starts_with("check=")).all(|l| l.contains("status=pass")));
    assert_eq!(out.lines().last(), Some("selfcheck=pass checks=8"));
}
