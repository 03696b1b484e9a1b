use std::path::Path;
use std::process::Command;

use avsep::checkpoint::{load_checkpoint, save_checkpoint};
use avsep::data::{generate_toy_corpus, materialize_test_set, Manifest, SourceBank, ToyCorpusConfig};
use avsep::eval::{evaluate, OracleSeparator, PassthroughSeparator};
use avsep::{AvSepNet, SeparatorConfig};

fn toy(dir: &Path) -> (Manifest, SourceBank) {
    let cfg = ToyCorpusConfig { speakers: 5, utterances_per_speaker: 2, utterance_seconds: 0.5, visual_dim: 8, ..Default::default() };
    let manifest = generate_toy_corpus(dir, &cfg).unwrap();
    let bank = SourceBank::load(&manifest, cfg.sample_rate).unwrap();
    (manifest, bank)
}

fn small_model() -> SeparatorConfig {
    SeparatorConfig {
        chunk_size: 8,
        dim: 8,
        layers: 1,
        blocks: 1,
        heads: 2,
        ffn_width: 8,
        visual_dim: 8,
        dropout: 0.0,
        ..Default::default()
    }
}

fn avsep(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_avsep")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_and_passthrough_bound_the_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, bank) = toy(dir.path());
    let specs = materialize_test_set(&manifest, 4, 3, 2, 0.2, 1).unwrap();
    let oracle = evaluate(&OracleSeparator, &specs, &bank, 4000, 25.0).unwrap();
    assert!(oracle.overall.si_sdr >= 60.0, "{:?}", oracle.overall);
    let pass = evaluate(&PassthroughSeparator, &specs, &bank, 4000, 25.0).unwrap();
    assert!(pass.overall.si_sdri.abs() < 1e-9, "{:?}", pass.overall);
    assert_eq!(pass.rows.len(), 1);
    assert_eq!((pass.rows[0].n_speakers, pass.rows[0].guided, pass.rows[0].samples), (3, 2, 4));
}

#[test]
fn saved_checkpoints_evaluate_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, bank) = toy(dir.path());
    let net = AvSepNet::<f32>::new(&small_model()).unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let specs = materialize_test_set(&manifest, 3, 2, 1, 0.0, 2).unwrap();
    let a = evaluate(&net, &specs, &bank, 3000, 25.0).unwrap();
    let b = evaluate(&back, &specs, &bank, 3000, 25.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn command_line_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    let corpus_cfg = d.join("corpus.toml");
    std::fs::write(&corpus_cfg, "speakers = 5\nutterances_per_speaker = 3\nutterance_seconds = 0.5\nvisual_dim = 8\n").unwrap();
    let out = avsep(&["synth-data", "--out", s(&corpus), "--config", s(&corpus_cfg), "--valid", "1", "--test", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(Manifest::read(corpus.join("test.jsonl")).unwrap().records.len(), 5);

    let ckpt = d.join("model.ckpt");
    save_checkpoint(&AvSepNet::<f32>::new(&small_model()).unwrap(), &ckpt).unwrap();
    let specs = d.join("specs.jsonl");
    let test = corpus.join("test.jsonl");
    let out = avsep(&["make-specs", "--manifest", s(&test), "--out", s(&specs), "--speakers", "2", "--guided", "1", "--samples", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report = d.join("eval.jsonl");
    let args = ["eval", "--checkpoint", s(&ckpt), "--spec", s(&specs), "--manifest", s(&test), "--clip-seconds", "0.25", "--out", s(&report)];
    let out = avsep(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("OA"));
    assert!(d.join("eval.txt").exists());

    let rep_dir = d.join("report");
    let out = avsep(&["report", s(&report), "--out", s(&rep_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(rep_dir.join("report.txt").exists() && rep_dir.join("drop_rates.jsonl").exists());

    let wav = corpus.join("wav").join(std::fs::read_dir(corpus.join("wav")).unwrap().next().unwrap().unwrap().file_name());
    let sep = d.join("sep");
    let out = avsep(&["separate", "--checkpoint", s(&ckpt), "--mix", s(&wav), "--speakers", "3", "--out", s(&sep)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!((1..=3).all(|i| sep.join(format!("est_{i}.wav")).exists()));

    let missing = avsep(&["eval", "--checkpoint", s(&d.join("none.ckpt")), "--spec", s(&specs), "--manifest", s(&test)]);
    assert_eq!(missing.status.code(), Some(7));
    let bad_cfg = d.join("bad.toml");
    std::fs::write(&bad_cfg, "lr = -1.0\n").unwrap();
    assert_eq!(avsep(&["train", "--config", s(&bad_cfg)]).status.code(), Some(3));
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let junk = avsep(&["eval", "--checkpoint", s(&d.join("junk.ckpt")), "--spec", s(&specs), "--manifest", s(&test)]);
    assert_eq!(junk.status.code(), Some(4));
}
