use std::path::Path;
use std::process::{Command, Output};

use fedhe::paillier::{KeyFile, LoadedKey};
use serde_json::Value;

fn fedhe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedhe")).args(args).output().expect("binary runs")
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{l:?}: {e}")))
        .collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn keygen_writes_loadable_key_and_guards_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let key = dir.path().join("key.json");
    let out = fedhe(&["keygen", "--bits", "1024", "--out", path(&key), "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&key).unwrap();
    let LoadedKey::Pair(kp) = KeyFile::parse(&text).unwrap().load().unwrap() else {
        panic!("expected a private key file");
    };
    assert_eq!(kp.public.n().bits(), 1024);
    let report = &json_lines(&out)[0];
    assert_eq!(report["key_bits"], 1024);
    assert_eq!(report["fingerprint"], format!("{:016x}", kp.public.id().fingerprint));

    let again = fedhe(&["keygen", "--bits", "1024", "--out", path(&key), "--seed", "6"]);
    assert_eq!(again.status.code(), Some(2));
    assert_eq!(std::fs::read_to_string(&key).unwrap(), text);
    let forced = fedhe(&["keygen", "--bits", "1024", "--out", path(&key), "--seed", "6", "--force"]);
    assert!(forced.status.success());
    assert_ne!(std::fs::read_to_string(&key).unwrap(), text);
}

#[test]
fn keygen_rejects_small_keys_without_unsafe() {
    let dir = tempfile::tempdir().unwrap();
    let key = dir.path().join("k.json");
    assert_eq!(fedhe(&["keygen", "--bits", "8", "--out", path(&key)]).status.code(), Some(2));
    assert!(!key.exists());
    let ok = fedhe(&["keygen", "--bits", "64", "--unsafe", "--out", path(&key)]);
    assert!(ok.status.success());
}

#[test]
fn bench_verifies_every_operator() {
    for op in ["encode", "decode", "henc", "hdec", "hmul", "hadd", "hmatmul", "hsum"] {
        for backend in ["naive", "parallel:3"] {
            let out = fedhe(&[
                "bench", "--op", op, "--count", "9", "--key-bits", "128", "--backend", backend, "--verify", "--warmups", "1",
                "--runs", "2",
            ]);
            assert!(out.status.success(), "{op}: {}", String::from_utf8_lossy(&out.stderr));
            let r = &json_lines(&out)[0];
            assert_eq!(r["operator"], op);
            assert_eq!(r["count"], 9);
            assert_eq!(r["verified"], true);
            let t = r["throughput"].as_f64().unwrap();
            let w = r["wall_time_s"].as_f64().unwrap();
            assert!((t * w - 9.0).abs() < 1e-6);
        }
    }
}

#[test]
fn bench_single_instance_and_usage_errors() {
    let out = fedhe(&["bench", "--op", "hadd", "--count", "1", "--key-bits", "128"]);
    assert!(out.status.success());
    let r = &json_lines(&out)[0];
    assert!(r["throughput"].as_f64().unwrap().is_finite());
    assert_eq!(r["verified"], Value::Null);
    assert_eq!(fedhe(&["bench", "--op", "hdiv"]).status.code(), Some(2));
    assert_eq!(fedhe(&["bench", "--op", "hmul", "--backend", "gpu"]).status.code(), Some(2));
    assert_eq!(fedhe(&["bench", "--op", "hmul", "--count", "0", "--key-bits", "128"]).status.code(), Some(1));
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", path(dir)];
    args.extend_from_slice(extra);
    let out = fedhe(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn synth_shapes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, &["--rows", "100", "--features", "4", "--seed", "3"]);
    synth(&b, &["--rows", "100", "--features", "4", "--seed", "3"]);
    let full = std::fs::read_to_string(a.join("full.csv")).unwrap();
    let lines: Vec<&str> = full.lines().collect();
    assert_eq!(lines.len(), 101);
    assert!(lines.iter().all(|l| l.split(',').count() == 6));
    for f in ["full.csv", "guest.csv", "host.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let h = dir.path().join("h");
    synth(&h, &["--rows", "10", "--features", "2", "--mode", "homo", "--parties", "3"]);
    for k in 0..3 {
        assert!(h.join(format!("party{k}.csv")).exists());
    }
}

fn train(dataset: &Path, extra: &[&str]) -> Vec<Value> {
    let mut args = vec!["train", "--dataset", path(dataset), "--key-bits", "256", "--unsafe"];
    args.extend_from_slice(extra);
    let out = fedhe(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    json_lines(&out)
}

fn epochs(lines: &[Value]) -> Vec<&Value> {
    lines.iter().filter(|l| l.get("epoch").is_some()).collect()
}

#[test]
fn hetero_training_with_oracle() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--rows", "120", "--features", "4", "--seed", "1"]);
    let lines = train(dir.path(), &["--mode", "hetero", "--epochs", "3", "--oracle"]);
    assert_eq!(lines[0]["mode"], "hetero");
    assert_eq!(epochs(&lines).len(), 3);
    let oracle = &lines.last().unwrap()["oracle"];
    assert!(oracle["max_loss_deviation"].as_f64().unwrap() <= 1e-4);
    assert!(oracle["max_weight_deviation"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn cache_switch_changes_only_traffic() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--rows", "64", "--features", "4"]);
    let on = train(dir.path(), &["--mode", "hetero", "--epochs", "2", "--cache", "on"]);
    let off = train(dir.path(), &["--mode", "hetero", "--epochs", "2", "--cache", "off"]);
    let (on, off) = (epochs(&on), epochs(&off));
    for (a, b) in on.iter().zip(&off) {
        assert_eq!(a["loss"], b["loss"]);
        for role in ["guest", "host"] {
            let bytes = |r: &Value| r["ledger"][role]["downloads"]["bytes"].as_u64().unwrap();
            assert!(bytes(a) < bytes(b), "{role}");
        }
    }
}

#[test]
fn zero_epochs_prints_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--rows", "20", "--features", "2"]);
    let lines = train(&dir.path().join("full.csv"), &["--mode", "hetero", "--epochs", "0"]);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["epochs"], 0);
}

#[test]
fn homo_training_reaches_below_ln2() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--rows", "200", "--features", "4", "--mode", "homo", "--parties", "2", "--seed", "9"]);
    let lines = train(dir.path(), &["--mode", "homo", "--epochs", "5", "--oracle"]);
    let last = epochs(&lines).last().unwrap()["loss"].as_f64().unwrap();
    assert!(last < std::f64::consts::LN_2, "{last}");
    let oracle = &lines.last().unwrap()["oracle"];
    assert!(oracle["max_loss_deviation"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn training_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = fedhe(&["train", "--mode", "hetero", "--dataset", path(&missing), "--key-bits", "256", "--unsafe"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "id,y,a,b\n1,1,0.5,x\n").unwrap();
    let out = fedhe(&["train", "--mode", "hetero", "--dataset", path(&bad), "--key-bits", "256", "--unsafe"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a number"));
    let out = fedhe(&["train", "--mode", "hetero", "--dataset", path(&bad), "--lr=-1"]);
    assert_eq!(out.status.code(), Some(2));
}
