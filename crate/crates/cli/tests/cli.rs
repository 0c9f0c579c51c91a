use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use melle_core::audio::save_wav;
use melle_core::fixture::speech_like;

const TINY: &str = "\
[model]
n_layers = 1
n_heads = 2
d_model = 16
d_ffn = 32
prenet_dim = 16
latent_hidden = 16
postnet_channels = 4
[train]
steps = 30
warmup_steps = 5
checkpoint_interval = 10
";

fn melle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_melle"))
        .args(args)
        .env_remove("MELLE_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three short utterances plus a manifest; returns (manifest, config).
fn corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let lines = ["the quick brown fox", "jumps over", "a lazy dog today"];
    let mut manifest = String::new();
    for (i, text) in lines.iter().enumerate() {
        let p = dir.join(format!("u{i}.wav"));
        save_wav(&p, &speech_like(i as u64, 0.8 + 0.2 * i as f64)).unwrap();
        manifest.push_str(&format!("{}\t{text}\n", p.display()));
    }
    let m = dir.join("manifest.tsv");
    fs::write(&m, manifest).unwrap();
    let c = dir.join("tiny.conf");
    fs::write(&c, TINY).unwrap();
    (m, c)
}

fn train(manifest: &Path, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--manifest", s(manifest), "--out", s(out), "--config", s(config), "--seed", "7"];
    args.extend_from_slice(extra);
    melle(&args)
}

#[test]
fn help_lists_every_flag() {
    let expected: &[(&str, &[&str])] = &[
        ("extract", &[]),
        (
            "train",
            &[
                "--manifest", "--out", "--config", "--resume", "--seed", "--n-layers", "--n-heads", "--d-model",
                "--d-ffn", "--dropout", "--n-mels", "--reduction-factor", "--max-frames", "--max-text-tokens",
                "--prenet-dim", "--prenet-dropout", "--latent-hidden", "--latent-sampling", "--postnet-channels",
                "--postnet-kernel", "--postnet-layers", "--init-seed", "--steps", "--batch-frames", "--peak-lr",
                "--warmup-steps", "--lambda-breakpoint", "--lambda", "--beta", "--gamma", "--weight-decay",
                "--grad-clip", "--checkpoint-interval",
            ],
        ),
        (
            "synth",
            &[
                "--checkpoint", "--vocab", "--prompt-wav", "--prompt-text", "--target-text", "--out", "--report",
                "--config", "--seed", "--mode", "--sampling", "--n-samples", "--max-frames-out",
                "--griffin-lim-iters",
            ],
        ),
        ("gradcheck", &["--component", "--max-entries", "--config", "--seed", "--d-model", "--reduction-factor"]),
        ("ablate", &["--manifest", "--out", "--config", "--no-latent-sampling", "--no-flux", "--sampling", "--steps"]),
    ];
    for (sub, flags) in expected {
        let o = melle(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let help = String::from_utf8(o.stdout).unwrap();
        for f in *flags {
            assert!(help.contains(&format!("{f} ")) || help.contains(&format!("{f}\n")), "{sub}: {f} missing");
        }
    }
    let o = melle(&["--help"]);
    let help = String::from_utf8(o.stdout).unwrap();
    for sub in ["extract", "train", "synth", "gradcheck", "ablate"] {
        assert!(help.contains(sub));
    }
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(code(&melle(&["train", "--bogus"])), 1);
    assert_eq!(code(&melle(&["gradcheck", "--component", "nope"])), 1);
    assert_eq!(code(&melle(&[])), 1);
}

#[test]
fn extract_empty_manifest_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("empty.tsv");
    fs::write(&m, "").unwrap();
    let out = dir.path().join("feats");
    assert_eq!(code(&melle(&["extract", s(&m), s(&out)])), 0);
    assert!(!out.exists() || fs::read_dir(&out).unwrap().next().is_none());
}

#[test]
fn extract_is_idempotent_and_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = corpus(dir.path());
    let out = dir.path().join("feats");
    assert_eq!(code(&melle(&["extract", s(&m), s(&out)])), 0);
    let names = ["u0.melf", "u1.melf", "u2.melf", "manifest.tsv"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| fs::read(out.join(n)).unwrap()).collect();
    let stamp = fs::metadata(out.join("u0.melf")).unwrap().modified().unwrap();
    assert_eq!(code(&melle(&["extract", s(&m), s(&out)])), 0);
    let second: Vec<Vec<u8>> = names.iter().map(|n| fs::read(out.join(n)).unwrap()).collect();
    assert_eq!(first, second);
    assert_eq!(fs::metadata(out.join("u0.melf")).unwrap().modified().unwrap(), stamp);

    let bad = dir.path().join("broken.wav");
    fs::write(&bad, b"RIFF\x10\x00\x00\x00WAVEjunk").unwrap();
    let mixed = dir.path().join("mixed.tsv");
    let text = fs::read_to_string(&m).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let bad_line = format!("{}\tbroken", bad.display());
    lines.insert(1, &bad_line);
    fs::write(&mixed, lines.join("\n")).unwrap();
    let out2 = dir.path().join("feats2");
    let o = melle(&["extract", s(&mixed), s(&out2)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    for n in ["u0.melf", "u1.melf", "u2.melf"] {
        assert!(out2.join(n).exists(), "{n}");
    }
    assert!(!out2.join("broken.melf").exists());
}

#[test]
fn training_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let (m, c) = corpus(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train(&m, &c, &a, &[])), 0);
    assert_eq!(code(&train(&m, &c, &b, &[])), 0);
    let metrics = fs::read_to_string(a.join("metrics.tsv")).unwrap();
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.tsv")).unwrap());
    assert_eq!(metrics.lines().count(), 31);
    assert_eq!(fs::read(a.join("model.mckp")).unwrap(), fs::read(b.join("model.mckp")).unwrap());
    for step in [10, 20, 30] {
        assert!(a.join(format!("checkpoint-{step:06}.mckp")).exists());
    }

    // resume from step 10 into the second run's directory
    let ck = b.join("checkpoint-000010.mckp");
    assert_eq!(code(&train(&m, &c, &b, &["--resume", s(&ck)])), 0);
    let resumed = fs::read_to_string(b.join("metrics.tsv")).unwrap();
    let steps: Vec<u64> = resumed.lines().skip(1).map(|l| l.split('\t').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=30).collect::<Vec<_>>());
    assert_eq!(resumed, metrics);
    assert_eq!(fs::read(a.join("model.mckp")).unwrap(), fs::read(b.join("model.mckp")).unwrap());

    // a different seed gives a different run
    let d = dir.path().join("d");
    let mut args = vec!["train", "--manifest", s(&m), "--out", s(&d), "--config", s(&c), "--seed", "8"];
    args.extend_from_slice(&["--steps", "5", "--warmup-steps", "1"]);
    assert_eq!(code(&melle(&args)), 0);
    let other = fs::read_to_string(d.join("metrics.tsv")).unwrap();
    assert_ne!(other.lines().nth(1), metrics.lines().nth(1));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = corpus(dir.path());
    let c = dir.path().join("bad.conf");
    fs::write(&c, "[train]\nstepz = 3\n").unwrap();
    let o = train(&m, &c, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));
}

#[test]
fn synth_is_reproducible_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (m, c) = corpus(dir.path());
    let run = dir.path().join("run");
    assert_eq!(code(&train(&m, &c, &run, &["--steps", "10", "--warmup-steps", "2"])), 0);
    let ck = run.join("model.mckp");
    let prompt = dir.path().join("u0.wav");
    let synth = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "synth", "--checkpoint", s(&ck), "--prompt-wav", s(&prompt), "--prompt-text", "the quick brown fox",
            "--target-text", "jumps over", "--mode", "cross_sentence", "--max-frames-out", "40",
            "--griffin-lim-iters", "8", "--out", s(out),
        ];
        args.extend_from_slice(extra);
        melle(&args)
    };
    let (x, y, z) = (dir.path().join("x.wav"), dir.path().join("y.wav"), dir.path().join("z.wav"));
    assert_eq!(code(&synth(&x, &["--seed", "3"])), 0);
    assert_eq!(code(&synth(&y, &["--seed", "3"])), 0);
    assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap());
    assert_eq!(fs::read(x.with_extension("melf")).unwrap(), fs::read(y.with_extension("melf")).unwrap());
    assert_eq!(code(&synth(&z, &["--seed", "4"])), 0);
    assert_ne!(fs::read(z.with_extension("melf")).unwrap(), fs::read(x.with_extension("melf")).unwrap());

    let report = fs::read_to_string(x.with_extension("jsonl")).unwrap();
    for field in ["request_hash", "seed", "frame_count", "stop_step", "truncated", "score"] {
        assert!(report.contains(&format!("\"{field}\"")), "{field}");
    }

    let five = dir.path().join("five.wav");
    assert_eq!(code(&synth(&five, &["--n-samples", "5"])), 0);
    assert!(five.exists() && five.with_extension("melf").exists());

    let o = melle(&[
        "synth", "--checkpoint", s(&dir.path().join("missing.mckp")), "--prompt-wav", s(&prompt),
        "--target-text", "hi", "--out", s(&dir.path().join("never.wav")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.mckp"));
}

#[test]
fn gradcheck_component_restricts_scope() {
    let o = melle(&["gradcheck", "--component", "losses"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = out.lines().skip(1).filter(|l| !l.starts_with('#')).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.starts_with("losses\t") && r.ends_with("pass")));
    assert!(out.contains("# losses: max relative error"));
}

#[test]
fn ablate_writes_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let (m, c) = corpus(dir.path());
    let out = dir.path().join("abl");
    let o = melle(&["ablate", "--manifest", s(&m), "--out", s(&out), "--config", s(&c), "--steps", "10", "--warmup-steps", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("ablation.tsv")).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), table);
    assert_eq!(table.lines().count(), 5, "{table}");

    // a single flag runs that variant next to the full model
    let out = dir.path().join("abl2");
    let o = melle(&["ablate", "--manifest", s(&m), "--out", s(&out), "--config", s(&c), "--steps", "5", "--warmup-steps", "1", "--no-flux"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(out.join("ablation.tsv")).unwrap().lines().count(), 3);
}
