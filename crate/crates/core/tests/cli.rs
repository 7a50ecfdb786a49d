use std::path::Path;
use std::process::Command;

use diarkit::cli::*;
use diarkit::pipeline::{tsvad_features, Diarizer};
use diarkit::simulate::read_manifest;
use diarkit::tensor::Tensor;
use diarkit::Error;

fn small_config(dir: &Path) -> Config {
    let text = format!(
        r#"
[model]
variant = "blstm_time_trans_spk"
preset = "toy"

[training]
peak_lr = 2e-3
warmup_steps = 5
total_steps = 12
batch = 1
chunk_seconds = 4.0
seed = 7

[simulation]
train_conversations = 3
test_conversations = 1
min_speakers = 2
max_speakers = 2
duration = 8.0
pool_size = 6
seed = 11

[paths]
data_dir = "{d}/data"
train_manifest = "{d}/data/train.tsv"
infer_input = "{d}/data/test.tsv"
checkpoint = "{d}/model.ckpt"
loss_csv = "{d}/loss.csv"
output_rttm = "{d}/hyp.rttm"
reference = "{d}/data/test.tsv"
profile_rttm = "{d}/ref.rttm"
report = "{d}/report.json"
"#,
        d = dir.display()
    );
    Config::from_toml(&text).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_config_round_trips() {
    let cfg = Config::default();
    let text = cfg.to_toml().unwrap();
    assert_eq!(Config::from_toml(&text).unwrap(), cfg);
    assert_eq!(Config::from_toml("").unwrap(), cfg);
}

#[test]
fn unknown_keys_are_rejected_with_a_line() {
    let err = Config::from_toml("[training]\nseed = 3\nlearning_rate = 0.1\n").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("learning_rate"), "{msg}");
    assert!(msg.contains("line 3"), "{msg}");
    assert_eq!(exit_code(&err), EXIT_CONFIG);
    assert!(Config::from_toml("[nonsense]\n").is_err());
}

#[test]
fn invalid_values_name_their_field() {
    let err = Config::from_toml("[simulation]\nmax_overlap = 0.9\n").unwrap_err();
    assert!(err.to_string().contains("simulation.max_overlap"), "{err}");
    assert_eq!(exit_code(&err), EXIT_CONFIG);
    let err = Config::from_toml("[training]\ntotal_steps = 10\nwarmup_steps = 20\n").unwrap_err();
    assert!(err.to_string().contains("training.warmup_steps"), "{err}");
    let err = Config::from_toml("[model]\nvariant = \"lstm\"\n").unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);
}

#[test]
fn worker_count_respects_the_cap() {
    assert_eq!(worker_count(None, None).unwrap(), 1);
    assert_eq!(worker_count(Some(4), None).unwrap(), 4);
    assert_eq!(worker_count(Some(4), Some("2")).unwrap(), 2);
    assert_eq!(worker_count(Some(1), Some("8")).unwrap(), 1);
    assert!(worker_count(Some(0), None).is_err());
    assert!(worker_count(None, Some("0")).is_err());
    assert!(worker_count(None, Some("many")).is_err());
}

#[test]
fn exit_codes_follow_the_error_kind() {
    assert_eq!(exit_code(&Error::config("x", "y")), EXIT_CONFIG);
    assert_eq!(exit_code(&Error::Checkpoint("bad".into())), EXIT_IO);
    assert_eq!(exit_code(&Error::Numerical("nan".into())), EXIT_NUMERICAL);
    let io = Error::io(Path::new("/nope"), std::io::Error::from(std::io::ErrorKind::NotFound));
    assert_eq!(exit_code(&io), EXIT_IO);
}

#[test]
fn simulate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = small_config(a.path());
    let cb = small_config(b.path());
    let out = cmd_simulate(&ca, 1).unwrap();
    cmd_simulate(&cb, 2).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].1.len(), 3);
    let da = dir_bytes(&a.path().join("data"));
    let db = dir_bytes(&b.path().join("data"));
    assert_eq!(da.len(), 2 * 4 + 4);
    assert!(da == db);
    let entries = read_manifest(&a.path().join("data/test.tsv")).unwrap();
    assert_eq!(entries.len(), 1);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = small_config(a.path());
    let mut cb = small_config(b.path());
    cmd_simulate(&ca, 1).unwrap();
    cb.paths.train_manifest = ca.paths.train_manifest.clone();
    let sa = cmd_train(&ca, 1).unwrap();
    let sb = cmd_train(&cb, 1).unwrap();
    assert_eq!(sa.losses.len(), 12);
    assert_eq!(sa.losses, sb.losses);
    let csv_a = std::fs::read(a.path().join("loss.csv")).unwrap();
    let csv_b = std::fs::read(b.path().join("loss.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let text = String::from_utf8(csv_a).unwrap();
    assert_eq!(text.lines().next(), Some("step,loss,lr"));
    assert_eq!(text.lines().count(), 13);
    // The embedded config differs only in its paths.
    let weights = |d: &Path| decode(&std::fs::read(d.join("model.ckpt")).unwrap()).unwrap().entries;
    assert_eq!(weights(a.path()), weights(b.path()));

    let (model, cfg) = load_checkpoint(&a.path().join("model.ckpt")).unwrap();
    assert_eq!(cfg.model.variant, Variant::BlstmTimeTransSpk);
    let (again, _) = load_checkpoint(&a.path().join("model.ckpt")).unwrap();
    let (Diarizer::TsVad(m1), Diarizer::TsVad(m2)) = (&model, &again) else {
        panic!("expected a TS-VAD model")
    };
    let entries = read_manifest(&a.path().join("data/test.tsv")).unwrap();
    let audio = diarkit::pipeline::read_wav(&entries[0].audio, 16000).unwrap();
    let x = tsvad_features(&audio, &cfg.features).unwrap();
    let emb = m1.embeddings(&x).unwrap();
    let d = emb.shape()[1];
    let profiles = Tensor::new(&[2, d], emb.data()[..2 * d].to_vec()).unwrap();
    let y1 = m1.predict(&x, &profiles).unwrap();
    let y2 = m2.predict(&x, &profiles).unwrap();
    assert_eq!(y1.data(), y2.data());

    // Saving a loaded model changes nothing.
    let mut copy = model;
    save_checkpoint(&mut copy, &cfg, &a.path().join("copy.ckpt")).unwrap();
    let (reloaded, _) = load_checkpoint(&a.path().join("copy.ckpt")).unwrap();
    let Diarizer::TsVad(m3) = &reloaded else { panic!() };
    assert_eq!(m3.predict(&x, &profiles).unwrap().data(), y1.data());

    // Oracle-profile inference and scoring on the test split.
    let reference = read_reference(&a.path().join("data/test.tsv")).unwrap();
    std::fs::write(a.path().join("ref.rttm"), diarkit::score::write_rttm(&reference)).unwrap();
    let mut icfg = ca.clone();
    icfg.inference.first_pass = false;
    let hyp = cmd_infer(&icfg, 1).unwrap();
    let rttm = std::fs::read_to_string(a.path().join("hyp.rttm")).unwrap();
    assert_eq!(rttm.lines().count(), hyp.len());
    let report = cmd_score(&icfg).unwrap();
    assert!(report.total.scored > 0.0);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.path().join("report.json")).unwrap()).unwrap();
    for key in ["total", "miss", "fa", "conf", "per_session", "buckets"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn training_lowers_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.training.total_steps = Some(200);
    cfg.training.warmup_steps = Some(20);
    cmd_simulate(&cfg, 1).unwrap();
    let s = cmd_train(&cfg, 1).unwrap();
    let head: f64 = s.losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = s.losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}

#[test]
fn infer_rejects_a_mismatched_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut model = build_model(&cfg, 0).unwrap();
    save_checkpoint(&mut model, &cfg, &dir.path().join("model.ckpt")).unwrap();
    let mut other = cfg.clone();
    other.model.variant = Variant::TransTrans;
    let err = cmd_infer(&other, 1).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);
}

#[test]
fn container_layout_has_the_expected_size() {
    let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = Tensor::new(&[4], vec![0.5, -0.5, 0.25, 1e-3]).unwrap();
    let cfg = "x = 1\n";
    let bytes = encode(cfg, &[("layer.weight", &a), ("bias", &b)]);
    let entry = |name: &str, t: &Tensor| 4 + name.len() + 1 + 4 + 8 * t.rank() + 4 * t.numel();
    let expected = 8 + 4 + 4 + cfg.len() + 4 + entry("layer.weight", &a) + entry("bias", &b) + 32;
    assert_eq!(bytes.len(), expected);
    assert_eq!(&bytes[..8], b"DIARKIT1");
    let c = decode(&bytes).unwrap();
    assert_eq!(c.config, cfg);
    assert_eq!(c.entries[0].0, "layer.weight");
    assert_eq!(c.entries[0].1, a);
    assert_eq!(c.entries[1].1.data()[3], 1e-3f32 as f64);
}

#[test]
fn damaged_containers_are_rejected() {
    let a = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let bytes = encode("", &[("a", &a)]);
    let err = decode(&bytes[..bytes.len() - 5]).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    assert_eq!(exit_code(&err), EXIT_IO);
    let mut flipped = bytes.clone();
    flipped[30] ^= 1;
    assert!(decode(&flipped).unwrap_err().to_string().contains("checksum"));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode(&magic).unwrap_err().to_string().contains("magic"));
    assert!(decode(&bytes[..4]).is_err());
}

#[test]
fn selftest_passes() {
    for (name, ok, detail) in selftest() {
        assert!(ok, "{name}: {detail}");
    }
}

fn diarkit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diarkit"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(diarkit().arg("frobnicate").output().unwrap().status.code(), Some(2));
    assert_eq!(diarkit().arg("train").output().unwrap().status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[training]\nbogus = 1\n").unwrap();
    let out = diarkit().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let missing = dir.path().join("missing.toml");
    let out = diarkit().args(["score", "--config"]).arg(&missing).output().unwrap();
    assert_eq!(out.status.code(), Some(3));

    let good = dir.path().join("good.toml");
    std::fs::write(&good, "[paths]\nreference = \"ref.rttm\"\noutput_rttm = \"hyp.rttm\"\n").unwrap();
    let out = diarkit().args(["score", "--config"]).arg(&good).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let out = diarkit()
        .args(["score", "--jobs", "0", "--config"])
        .arg(&good)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(dir.path().join("ref.rttm"), "SPEAKER s 1 0.000 10.000 <NA> <NA> A <NA> <NA>\n").unwrap();
    std::fs::write(dir.path().join("hyp.rttm"), "SPEAKER s 1 0.000 9.000 <NA> <NA> x <NA> <NA>\n").unwrap();
    let out = diarkit().args(["score", "--config"]).arg(&good).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("7.89"));

    let out = diarkit().arg("selftest").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}
