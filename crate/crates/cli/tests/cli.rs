use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: &str = r#"{
    "seed": 4,
    "corpus": {
        "classes": ["tone", "click_train"],
        "directions": ["left", "back"],
        "distances": ["near", "far"],
        "clips_per_cell": {"train": 2, "val": 1, "test": 1},
        "clip_seconds": 0.25,
        "max_image_order": 2
    },
    "train": {"epochs": 2, "batch_size": 8},
    "probe": {"epochs": 5}
}"#;

fn elsa(args: &[&str], out: &Path, config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_elsa"));
    cmd.args(args).arg("--out").arg(out).env_remove("ELSA_REPHRASER_URL").env("RUST_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("spawn elsa")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn tree_hashes(root: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.starts_with(root.join("logs")) {
                let digest: String = Sha256::digest(std::fs::read(&p).unwrap()).iter().map(|b| format!("{b:02x}")).collect();
                out.push((p.strip_prefix(root).unwrap().display().to_string(), digest));
            }
        }
    }
    out.sort();
    out
}

fn report(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn synth_corpus_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = elsa(&["synth-corpus", "--seed", "7"], out, Some(&cfg));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ha, hb) = (tree_hashes(&a), tree_hashes(&b));
    assert!(ha.len() > 20);
    assert_eq!(ha, hb);
    assert!(a.join("logs/synth-corpus.log").exists());
    let cfg_echo: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg_echo["seed"], 7);
    assert_eq!(cfg_echo["corpus"]["seed"], 7);
    assert_eq!(report(&a)["synth-corpus"]["spatial"]["train"], 32);
}

#[test]
fn evaluate_identity_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let emb = tmp.path().join("identity.elsamat");
    let rows: Vec<Vec<f64>> = (0..10).map(|i| (0..6).map(|j| ((i * 7 + j * 3) % 11) as f64 - 5.0).collect()).collect();
    let m = |name: &str| elsa_core::dataio::NamedMatrix::from_rows(name, &rows).unwrap();
    elsa_core::dataio::write_matrices(&emb, &[m("audio"), m("text")]).unwrap();
    let out = tmp.path().join("run");
    let o = elsa(&["evaluate", "--embeddings", emb.to_str().unwrap()], &out, None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["evaluate"]["audio_to_text"]["r1"], 1.0);
    assert_eq!(r["evaluate"]["text_to_audio"]["map10"], 1.0);
}

#[test]
fn user_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "learning_rate": 3}"#).unwrap();
    let out = tmp.path().join("run");
    let o = elsa(&["synth-corpus"], &out, Some(&bad));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = elsa(&["probe"], &out, None);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let o = elsa(&["no-such-command"], &out, None);
    assert_eq!(o.status.code(), Some(1));
    let o = elsa(&["--help"], &out, None);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn simulate_writes_foa_and_caption() {
    let tmp = tempfile::tempdir().unwrap();
    let wav = tmp.path().join("mono.wav");
    let spec = hound::WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(&wav, spec).unwrap();
    for i in 0..8000 {
        w.write_sample(((i as f64 * 0.07).sin() * 12000.0) as i16).unwrap();
    }
    w.finalize().unwrap();
    let out = tmp.path().join("run");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_elsa"));
    // an unreachable rephraser falls back to the template caption
    cmd.args(["simulate", "--input", wav.to_str().unwrap(), "--caption", "a dog barks", "--room-index", "3"])
        .arg("--out")
        .arg(&out)
        .env("ELSA_REPHRASER_URL", "http://127.0.0.1:9/rephrase")
        .env("RUST_LOG", "error");
    let o = cmd.output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let foa = elsa_core::dataio::read_foa_wav(&out.join("simulated.wav")).unwrap();
    assert_eq!(foa.sample_rate, 16_000);
    assert!(foa.len() >= 4 * 16_000);
    let r = report(&out);
    let cap = &r["simulate"]["caption"];
    assert_eq!(cap["original_caption"], "a dog barks");
    assert_eq!(cap["rephraser_fallback"], true);
    assert_eq!(cap["rephrased"], cap["spatial_caption"]);
    assert!(cap["llm_prompt"].as_str().unwrap().contains("a dog barks"));
}

#[test]
fn staged_smoke_run_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let stages = ["synth-corpus", "featurize", "train", "evaluate", "probe", "swap", "doa", "export-embeddings"];
    let t0 = std::time::Instant::now();
    for stage in stages {
        let o = elsa(&[stage, "--workers", "2"], &out, Some(&cfg));
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(t0.elapsed().as_secs() < 300);
    let r = report(&out);
    for stage in stages {
        assert!(r.get(stage).is_some(), "missing {stage} report");
        assert!(out.join(format!("logs/{stage}.log")).exists());
    }
    assert!(out.join("checkpoints/best.ckpt").exists());
    assert!(out.join("embeddings/test.elsamat").exists());
    assert!(out.join("doa_breakdown.txt").exists());
    assert_eq!(r["train"]["epochs"].as_array().unwrap().len(), 2);

    let before = tree_hashes(&out);
    for stage in ["train", "probe"] {
        let o = elsa(&[stage, "--workers", "1"], &out, Some(&cfg));
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(before, tree_hashes(&out));
}
