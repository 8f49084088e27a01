use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use convcap::data::{read_features, write_features, Vocabulary};
use convcap::decode::greedy_decode;
use convcap::eval::parse_metrics_csv;
use convcap::model::{AnyModel, Captioner, Checkpoint, CheckpointMeta, LstmConfig, ModelConfig, ModelSpec};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_convcap");

const SMALL_CNN: &str = "epochs = 2\nembed_dim = 16\nhidden_dim = 16\nbottleneck_dim = 8\nkernel_widths = 3,3\nmax_steps = 8\nlr = 1e-3\n";
const SMALL_LSTM: &str = "epochs = 2\nembed_dim = 16\nhidden_dim = 16\nmax_steps = 8\nlr = 1e-3\n";

fn convcap(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("CONVCAP_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = convcap(args);
    assert!(
        out.status.success(),
        "convcap {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(root: &Path, scenes: usize) -> PathBuf {
    let dir = root.join("data");
    ok(&["synth", "--scenes", &scenes.to_string(), "--seed", "7", "--out", s(&dir)]);
    dir
}

fn write_config(root: &Path, name: &str, text: &str) -> PathBuf {
    let p = root.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn train(root: &Path, data: &Path, model: &str, config: &str, out: &str) -> PathBuf {
    let cfg = write_config(root, &format!("{out}.cfg"), config);
    let dir = root.join(out);
    ok(&["train", "--model", model, "--data", s(data), "--config", s(&cfg), "--out", s(&dir)]);
    dir
}

#[test]
fn synth_is_byte_identical_and_round_trips() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--scenes", "500", "--seed", "7", "--out", s(d)]);
    }
    for f in ["corpus.tsv", "features.ccf", "vocab.txt", "scenes.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let m = manifest(&a.join("manifest.json"));
    assert_eq!(m["status"], "complete");
    assert_eq!(m["config"]["scenes"], 500);
    assert_eq!(m["seed"], 7);
    assert_eq!(fs::read_to_string(a.join("corpus.tsv")).unwrap().lines().count(), 500);

    let feats = read_features(&a.join("features.ccf")).unwrap();
    assert_eq!(feats.len(), 500);
    let again = tmp.path().join("again.ccf");
    write_features(&feats, &again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), fs::read(a.join("features.ccf")).unwrap());
}

#[test]
fn manifest_checksums_match_artifacts() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 20);
    let m = manifest(&data.join("manifest.json"));
    let artifacts = m["artifacts"].as_object().unwrap();
    assert_eq!(artifacts.len(), 4);
    for (name, sum) in artifacts {
        let digest = hex::encode(Sha256::digest(fs::read(data.join(name)).unwrap()));
        assert_eq!(sum.as_str().unwrap(), digest, "{name}");
    }
    assert!(!data.join("manifest.json.lock").exists());
}

#[test]
fn ablation_flags_off_trains_plain_cnn() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 40);
    let cfg = format!("{SMALL_CNN}weight_norm = false\ndropout = false\nresidual = false\nattention = false\n");
    let run = train(tmp.path(), &data, "cnn", &cfg, "plain");
    let spec: Value = serde_json::from_str(&fs::read_to_string(run.join("model.json")).unwrap()).unwrap();
    assert_eq!(spec["kind"], "cnn");
    for flag in ["weight_norm", "dropout", "residual", "attention"] {
        assert_eq!(spec["config"][flag], false, "{flag}");
    }
    let ck = Checkpoint::load(&run.join("last.ckpt")).unwrap();
    assert_eq!(ck.meta.epoch, 2);
    let records = parse_metrics_csv(&fs::read_to_string(run.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(records.len(), 4);
    let m = manifest(&run.join("manifest.json"));
    assert_eq!(m["status"], "complete");
    assert_eq!(m["config"]["settings"]["weight_norm"], "false");
    for f in ["vocab.txt", "model.json", "metrics.csv", "last.ckpt", "best.ckpt"] {
        assert!(m["artifacts"][f].is_string(), "{f} missing from manifest");
    }
}

#[test]
fn attention_and_lstm_share_the_pipeline() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 40);
    let attn = SMALL_CNN.replace("hidden_dim = 16", "hidden_dim = 64");
    let run = train(tmp.path(), &data, "cnn-attn", &attn, "attn");
    let ck = Checkpoint::load(&run.join("best.ckpt")).unwrap();
    let ModelSpec::Cnn(c) = ck.model.spec() else { panic!("expected a cnn") };
    assert!(c.attention);

    let run = train(tmp.path(), &data, "lstm", SMALL_LSTM, "lstm");
    let ck = Checkpoint::load(&run.join("best.ckpt")).unwrap();
    assert!(matches!(ck.model.spec(), ModelSpec::Lstm(_)));
}

#[test]
fn resume_continues_the_schedule_bit_exactly() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 40);
    let base = "embed_dim = 8\nhidden_dim = 8\nbottleneck_dim = 4\nkernel_widths = 3\nmax_steps = 8\neval_every = 5\n";
    let full = train(tmp.path(), &data, "cnn", &format!("{base}epochs = 16\n"), "full");
    let first = train(tmp.path(), &data, "cnn", &format!("{base}epochs = 15\n"), "first");

    let cfg = write_config(tmp.path(), "second.cfg", &format!("{base}epochs = 16\n"));
    let second = tmp.path().join("second");
    let out = ok(&[
        "train", "--model", "cnn", "--data", s(&data), "--config", s(&cfg), "--out", s(&second),
        "--resume", s(&first.join("last.ckpt")),
    ]);
    let log = String::from_utf8_lossy(&out.stderr);
    // 5e-5 decayed once by 0.1 after 15 completed epochs
    let lr = 5e-5 * 0.1f64;
    assert!(log.contains(&format!("resuming after epoch 15 at lr {lr:e}")), "{log}");
    assert!((lr - 5e-6).abs() < 1e-18);
    assert_eq!(
        fs::read(full.join("last.ckpt")).unwrap(),
        fs::read(second.join("last.ckpt")).unwrap()
    );
}

#[test]
fn resume_with_a_different_model_fails_and_marks_the_run() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 20);
    let first = train(tmp.path(), &data, "cnn", SMALL_CNN, "first");
    let cfg = write_config(tmp.path(), "other.cfg", &SMALL_CNN.replace("embed_dim = 16", "embed_dim = 12"));
    let out_dir = tmp.path().join("second");
    let out = convcap(&[
        "train", "--model", "cnn", "--data", s(&data), "--config", s(&cfg), "--out", s(&out_dir),
        "--resume", s(&first.join("last.ckpt")),
    ]);
    assert!(!out.status.success());
    let m = manifest(&out_dir.join("manifest.json"));
    assert_eq!(m["status"], "failed");
    assert!(m["error"].as_str().unwrap().contains("mismatch"));
}

#[test]
fn config_and_data_mismatches_exit_nonzero() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 10);
    // attention needs hidden_dim equal to the 64 spatial channels
    let cfg = write_config(tmp.path(), "bad.cfg", SMALL_CNN);
    let out = convcap(&["train", "--model", "cnn-attn", "--data", s(&data), "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let cfg = write_config(tmp.path(), "typo.cfg", "epochz = 3\n");
    let out = convcap(&["train", "--model", "cnn", "--data", s(&data), "--config", s(&cfg), "--out", s(&tmp.path().join("y"))]);
    assert!(!out.status.success());

    let out = convcap(&["train", "--model", "lstm", "--data", s(&tmp.path().join("nope")), "--out", s(&tmp.path().join("z"))]);
    assert!(!out.status.success());
}

#[test]
fn caption_beam_one_is_greedy_and_beam_three_ranks() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 12);
    let run = train(tmp.path(), &data, "cnn", SMALL_CNN, "run");
    let ckpt = run.join("best.ckpt");
    let feats_path = data.join("features.ccf");

    let one = tmp.path().join("caps/beam1.tsv");
    ok(&["caption", "--ckpt", s(&ckpt), "--features", s(&feats_path), "--beam", "1", "--out", s(&one)]);
    let ck = Checkpoint::load(&ckpt).unwrap();
    let vocab = Vocabulary::load(&run.join("vocab.txt")).unwrap();
    let feats = read_features(&feats_path).unwrap();
    let text = fs::read_to_string(&one).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), feats.len());
    for (line, (id, f)) in lines.iter().zip(&feats) {
        let g = greedy_decode(&ck.model, f, ck.model.max_steps()).unwrap();
        let want = format!("{id}\t1\t{}\t{}", g.log_prob, vocab.decode(g.caption()).join(" "));
        assert_eq!(*line, want);
    }
    assert!(tmp.path().join("caps/beam1.tsv.manifest.json").exists());

    let three = tmp.path().join("caps/beam3.tsv");
    ok(&["caption", "--ckpt", s(&ckpt), "--features", s(&feats_path), "--beam", "3", "--out", s(&three)]);
    let text = fs::read_to_string(&three).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3 * feats.len());
    for chunk in rows.chunks(3) {
        let ranks: Vec<&str> = chunk.iter().map(|r| r[1]).collect();
        assert_eq!(ranks, ["1", "2", "3"]);
        let lp: Vec<f64> = chunk.iter().map(|r| r[2].parse().unwrap()).collect();
        assert!(lp[0] >= lp[1] && lp[1] >= lp[2]);
        assert!(chunk.iter().all(|r| r[0] == chunk[0][0]));
    }
}

#[test]
fn eval_writes_bleu_and_reference_files() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 30);
    let run = train(tmp.path(), &data, "lstm", SMALL_LSTM, "run");
    let out = tmp.path().join("eval");
    ok(&["eval", "--ckpt", s(&run.join("best.ckpt")), "--data", s(&data), "--beam", "2", "--out", s(&out)]);
    let bleu = fs::read_to_string(out.join("bleu.csv")).unwrap();
    let rows: Vec<&str> = bleu.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "n,bleu,precision");
    assert_eq!(rows.len(), 5);
    for row in &rows[1..] {
        let b: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&b));
    }
    // 10% of 30 images held out
    assert_eq!(fs::read_to_string(out.join("candidates.txt")).unwrap().lines().count(), 3);
    assert_eq!(fs::read_to_string(out.join("references.txt")).unwrap().lines().count(), 3);
    assert_eq!(manifest(&out.join("manifest.json"))["status"], "complete");
}

fn untrained(root: &Path, name: &str, spec: ModelSpec, vocab: &Vocabulary) -> PathBuf {
    let dir = root.join(name);
    fs::create_dir_all(&dir).unwrap();
    vocab.save(&dir.join("vocab.txt")).unwrap();
    let model = AnyModel::from_spec(&spec, 1).unwrap();
    let meta = CheckpointMeta {
        seed: 1,
        epoch: 0,
        optimizer_steps: 0,
        train: None,
    };
    let path = dir.join("init.ckpt");
    Checkpoint::new(model, meta).save(&path).unwrap();
    path
}

#[test]
fn analyze_untrained_reports_uniform_entropy() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 16);
    let vocab = Vocabulary::load(&data.join("vocab.txt")).unwrap();
    let v = vocab.len();
    let mut cnn = ModelConfig::full(v);
    (cnn.feature_dim, cnn.embed_dim, cnn.hidden_dim, cnn.bottleneck_dim) = (64, 16, 16, 8);
    cnn.kernel_widths = vec![3, 3];
    cnn.max_steps = 8;
    (cnn.attention, cnn.spatial) = (false, None);
    let lstm = LstmConfig {
        vocab_size: v,
        feature_dim: 64,
        embed_dim: 16,
        hidden_dim: 16,
        max_steps: 8,
    };
    let a = untrained(tmp.path(), "cnn", ModelSpec::Cnn(cnn), &vocab);
    let b = untrained(tmp.path(), "lstm", ModelSpec::Lstm(lstm), &vocab);
    let out = tmp.path().join("analysis");
    ok(&[
        "analyze", "--ckpt", s(&a), "--ckpt", s(&b), "--data", s(&data), "--beam", "2", "--probe", "4",
        "--max-images", "4", "--out", s(&out),
    ]);
    let ln_v = (v as f64).ln();
    for tag in ["cnn", "lstm"] {
        let recs = parse_metrics_csv(&fs::read_to_string(out.join(format!("{tag}_analysis.csv"))).unwrap()).unwrap();
        assert_eq!(recs.len(), 1);
        assert!((recs[0].entropy - ln_v).abs() < 1e-12, "{tag}: {} vs {ln_v}", recs[0].entropy);
        assert!((recs[0].loss - ln_v).abs() < 1e-12);
        let div = fs::read_to_string(out.join(format!("{tag}_diversity.csv"))).unwrap();
        assert_eq!(div.lines().count(), 14);
        let by_pos = fs::read_to_string(out.join(format!("{tag}_entropy_by_position.csv"))).unwrap();
        for row in by_pos.lines().skip(1) {
            let h: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
            assert!((h - ln_v).abs() < 1e-12);
        }
    }
    let cmp = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(cmp.starts_with("metric,cnn,lstm\n"));
    assert!(cmp.contains("# entropy:"));
}

#[test]
fn analyze_rejects_kind_mismatches() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 12);
    let run = train(tmp.path(), &data, "lstm", SMALL_LSTM, "run");
    let ck = run.join("best.ckpt");
    let out = convcap(&["analyze", "--ckpt", s(&ck), "--expect", "cnn", "--data", s(&data), "--out", s(&tmp.path().join("a"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind mismatch"));
    let last = run.join("last.ckpt");
    let out = convcap(&["analyze", "--ckpt", s(&ck), "--ckpt", s(&last), "--data", s(&data), "--out", s(&tmp.path().join("b"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind mismatch"));
}

#[test]
fn output_root_from_environment() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(BIN)
        .args(["synth", "--scenes", "3", "--seed", "1"])
        .env("CONVCAP_OUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("synth/corpus.tsv").exists());
    assert_eq!(manifest(&tmp.path().join("synth/manifest.json"))["status"], "complete");

    let out = convcap(&["synth", "--scenes", "3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("CONVCAP_OUT_ROOT"));
}

#[test]
fn busy_output_directory_is_refused() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("busy");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("manifest.json.lock"), "").unwrap();
    let out = convcap(&["synth", "--scenes", "3", "--out", s(&dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
    assert!(!dir.join("corpus.tsv").exists());
}
