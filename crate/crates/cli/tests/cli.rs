use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hs3::segmetrics::{merge_confusion, ClusterMap, ConfusionMatrix};
use serde_json::Value;

fn hs3(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hs3")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hs3(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Stage confusions where pairs {0,1}, {2,3}, {4,5} are confused.
fn write_confusions(dir: &Path, k_final: usize) {
    let mut stage = vec![0u64; 36];
    for c in 0..6 {
        stage[c * 6 + c] = 60;
        stage[c * 6 + (c ^ 1)] = 40;
    }
    let conf = ConfusionMatrix::from_counts(6, stage).unwrap();
    fs::write(dir.join("s1.csv"), conf.to_csv(None).unwrap()).unwrap();
    fs::write(dir.join("s2.csv"), conf.to_csv(None).unwrap()).unwrap();
    let mut fin = vec![0u64; k_final * k_final];
    for c in 0..k_final {
        fin[c * k_final + c] = 90;
        fin[c * k_final + (c + 1) % k_final] = 10;
    }
    let fin = ConfusionMatrix::from_counts(k_final, fin).unwrap();
    fs::write(dir.join("final.csv"), fin.to_csv(None).unwrap()).unwrap();
}

fn small_data(dir: &Path) {
    ok(dir, &["gen-data", "--out", "d.bin", "--count", "12", "--height", "32", "--width", "32", "--hierarchy-out", "h.json"]);
}

#[test]
fn missing_out_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&hs3(dir.path(), &["gen-data", "--seed", "7"])), 2);
    assert_eq!(code(&hs3(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&hs3(dir.path(), &["train", "--data", "nope.bin", "--out", "a", "--history", "b"])), 2);
    assert_eq!(code(&hs3(dir.path(), &["gen-data", "--out", "no/such/dir/d.bin"])), 2);
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--seed", "7", "--out", "a.bin", "--count", "6"]);
    ok(d, &["gen-data", "--seed", "7", "--out", "b.bin", "--count", "6"]);
    assert_eq!(fs::read(d.join("a.bin")).unwrap(), fs::read(d.join("b.bin")).unwrap());
    let m = json(&d.join("a.bin.manifest.json"));
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["resolved"]["spec"]["num_groups"], 3);
    assert_eq!(m["threads"], 1);
}

#[test]
fn threads_variable_is_validated_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |v: &str| Command::new(env!("CARGO_BIN_EXE_hs3")).current_dir(d).env("HS3_THREADS", v).args(["gen-data", "--out", "t.bin", "--count", "2", "--height", "16", "--width", "16"]).output().unwrap();
    assert_eq!(code(&run("zero")), 2);
    assert_eq!(code(&run("0")), 2);
    assert!(run("4").status.success());
    assert_eq!(json(&d.join("t.bin.manifest.json"))["threads"], 4);
}

#[test]
fn derive_theta_zero_keeps_every_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_confusions(d, 6);
    let table = ok(d, &["derive", "--stage", "s1.csv", "--stage", "s2.csv", "--final", "final.csv", "--theta", "0", "--plan-out", "p.json", "--curves-out", "c.csv"]);
    let plan = json(&d.join("p.json"));
    for s in plan["stages"].as_array().unwrap() {
        assert_eq!(s["k"], 6);
    }
    assert!(table.starts_with("stage"));
    let curves = fs::read_to_string(d.join("c.csv")).unwrap();
    assert!(curves.starts_with("stage,k,miou\n"));
    assert_eq!(curves.lines().count(), 1 + 2 * 5);
}

#[test]
fn derive_ratio_merges_the_confused_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_confusions(d, 6);
    ok(d, &["derive", "--stage", "s1.csv", "--stage", "s2.csv", "--final", "final.csv", "--plan-out", "p.json", "--curves-out", "c.csv", "--line-out", "l.csv"]);
    let plan = json(&d.join("p.json"));
    let a: Vec<u64> = plan["stages"][0]["assignment"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    // Only confused pairs may share a cluster, and the weak stage must merge some.
    assert!(plan["stages"][0]["k"].as_u64().unwrap() < 6);
    for i in 0..6 {
        for j in 0..6 {
            if i != j && a[i] == a[j] {
                assert_eq!(i ^ 1, j, "{a:?}");
            }
        }
    }
    assert!(fs::read_to_string(d.join("l.csv")).unwrap().starts_with("k,miou\n"));
}

#[test]
fn derive_manual_uses_halving_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_confusions(d, 6);
    ok(d, &["derive", "--stage", "s1.csv", "--stage", "s2.csv", "--final", "final.csv", "--clustering", "manual", "--plan-out", "p.json", "--curves-out", "c.csv"]);
    let plan = json(&d.join("p.json"));
    let ks: Vec<usize> = hs3::speclust::class_counts_by_halving(6, 2);
    for (s, k) in plan["stages"].as_array().unwrap().iter().zip(ks) {
        assert_eq!(s["k"].as_u64().unwrap() as usize, k.min(6));
    }
}

#[test]
fn derive_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_confusions(d, 6);
    let args = |p: &'static str| ["derive", "--stage", "s1.csv", "--stage", "s2.csv", "--final", "final.csv", "--theta", "40", "--seed", "3", "--plan-out", p, "--curves-out", "c.csv"];
    ok(d, &args("a.json"));
    ok(d, &args("b.json"));
    assert_eq!(fs::read(d.join("a.json")).unwrap(), fs::read(d.join("b.json")).unwrap());
}

#[test]
fn derive_rejects_inconsistent_class_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_confusions(d, 5);
    let out = hs3(d, &["derive", "--stage", "s1.csv", "--final", "final.csv", "--plan-out", "p.json", "--curves-out", "c.csv"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("s1.csv"));
}

#[test]
fn training_variants_and_history_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    ok(d, &["train", "--data", "d.bin", "--variant", "none", "--epochs", "1", "--out", "n.ckpt", "--history", "n.csv"]);
    let header = fs::read_to_string(d.join("n.csv")).unwrap();
    assert!(header.starts_with("epoch,total_loss,val_miou\n"), "{header}");
    ok(d, &["train", "--data", "d.bin", "--val", "d.bin", "--epochs", "1", "--out", "ds.ckpt", "--history", "ds.csv"]);
    let ds = fs::read_to_string(d.join("ds.csv")).unwrap();
    assert!(ds.starts_with("epoch,total_loss,stage1_loss,stage2_loss,val_miou\n"), "{ds}");
    assert!(!ds.trim_end().ends_with(','));

    // hs3 needs a plan source.
    assert_eq!(code(&hs3(d, &["train", "--data", "d.bin", "--variant", "hs3", "--out", "h.ckpt", "--history", "h.csv"])), 2);
    assert_eq!(code(&hs3(d, &["train", "--data", "d.bin", "--variant", "ds", "--two-phase", "--out", "h.ckpt", "--history", "h.csv"])), 2);

    ok(d, &["train", "--data", "d.bin", "--variant", "hs3fuse", "--two-phase", "--epochs", "1", "--fuse-scale", "0.5", "--out", "f.ckpt", "--history", "f.csv", "--artifacts", "art"]);
    for f in ["plan.json", "curves.csv", "line.csv", "stage1_confusion.csv", "final_confusion.csv", "phase1_history.csv"] {
        assert!(d.join("art").join(f).is_file(), "{f}");
    }
    let m = json(&d.join("f.ckpt.manifest.json"));
    assert_eq!(m["resolved"]["fuse"]["final_channels"], 16);
    assert_eq!(m["flags"]["variant"], "hs3fuse");

    ok(d, &["train", "--data", "d.bin", "--variant", "hs3", "--plan", "art/plan.json", "--epochs", "1", "--out", "p.ckpt", "--history", "p.csv"]);
}

#[test]
fn eval_maps_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    ok(d, &["train", "--data", "d.bin", "--epochs", "1", "--out", "m.ckpt", "--history", "m.csv"]);
    let identity = serde_json::to_string(&ClusterMap::identity(12)).unwrap();
    fs::write(d.join("id.json"), identity).unwrap();
    fs::write(d.join("one.json"), serde_json::to_string(&ClusterMap::all_in_one(12)).unwrap()).unwrap();

    ok(d, &["eval", "--checkpoint", "m.ckpt", "--data", "d.bin", "--out", "plain.json", "--confusion-out", "conf.csv"]);
    ok(d, &["eval", "--checkpoint", "m.ckpt", "--data", "d.bin", "--out", "id.out.json", "--map", "id.json"]);
    assert_eq!(fs::read(d.join("plain.json")).unwrap(), fs::read(d.join("id.out.json")).unwrap());

    ok(d, &["eval", "--checkpoint", "m.ckpt", "--data", "d.bin", "--out", "one.out.json", "--map", "one.json"]);
    assert_eq!(json(&d.join("one.out.json"))["merged"]["metrics"]["miou"], 1.0);

    ok(d, &["eval", "--checkpoint", "m.ckpt", "--data", "d.bin", "--out", "h.out.json", "--map", "h.json"]);
    let (_, conf) = ConfusionMatrix::from_csv(&fs::read_to_string(d.join("conf.csv")).unwrap()).unwrap();
    let map: ClusterMap = serde_json::from_str(&fs::read_to_string(d.join("h.json")).unwrap()).unwrap();
    let oracle = merge_confusion(&conf, &map).unwrap().metrics();
    let got = &json(&d.join("h.out.json"))["merged"]["metrics"];
    assert_eq!(got["miou"].as_f64(), oracle.miou);
    assert_eq!(got["pixel_accuracy"].as_f64(), oracle.pixel_accuracy);
}

#[test]
fn eval_rejects_class_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    ok(d, &["train", "--data", "d.bin", "--epochs", "1", "--out", "m.ckpt", "--history", "m.csv"]);
    ok(d, &["gen-data", "--out", "six.bin", "--count", "4", "--height", "32", "--width", "32", "--groups", "2", "--classes-per-group", "3"]);
    let out = hs3(d, &["eval", "--checkpoint", "m.ckpt", "--data", "six.bin", "--out", "x.json"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}
