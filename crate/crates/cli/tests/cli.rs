use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dualtrack::calibrate::{search, Family, Objective};
use dualtrack::commands::{build_report, ABLATION_HEADER};
use dualtrack::io::{load_config, load_sequences};
use dualtrack_core::eval::{report, Protocol, ResetConfig, RunRecord};
use dualtrack_core::gridmath::Heatmap;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualtrack"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("DUALTRACK_THREADS", "2").output().expect("spawn dualtrack")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, lines.join("\n") + "\n").unwrap();
    p
}

fn simulate(dir: &Path, name: &str, config: &Path, seed: u64, count: usize) -> PathBuf {
    let out = dir.join(name);
    let (seed, count) = (seed.to_string(), count.to_string());
    ok(&["simulate", "--config", s(config), "--out", s(&out), "--seed", &seed, "--count", &count]);
    out
}

fn read_record(p: &Path) -> RunRecord {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn short(dir: &Path) -> PathBuf {
    write_config(dir, "short.txt", &["sim.length=30"])
}

#[test]
fn simulate_missing_config_is_config_error() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["simulate", "--config", s(&tmp.path().join("nope.txt")), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let bad = write_config(tmp.path(), "bad.txt", &["sim.no_such_key=1"]);
    assert_eq!(code(&["simulate", "--config", s(&bad), "--out", s(&tmp.path().join("o"))]), 2);
    assert_eq!(code(&["simulate", "--bogus-flag"]), 2);
}

#[test]
fn simulate_writes_one_groundtruth_line_per_frame() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", &["sim.length=37"]);
    let seq = simulate(tmp.path(), "seq", &cfg, 3, 1);
    let gt = fs::read_to_string(seq.join("groundtruth.txt")).unwrap();
    assert_eq!(gt.lines().count(), 37);
    assert_eq!(fs::read_to_string(seq.join("scene.jsonl")).unwrap().lines().count(), 37);
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = short(tmp.path());
    let a = simulate(tmp.path(), "a", &cfg, 11, 1);
    let b = simulate(tmp.path(), "b", &cfg, 11, 1);
    let c = simulate(tmp.path(), "c", &cfg, 12, 1);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn simulate_count_lays_out_subdirectories() {
    let tmp = TempDir::new().unwrap();
    let cfg = short(tmp.path());
    let set = simulate(tmp.path(), "set", &cfg, 5, 3);
    let single = simulate(tmp.path(), "one", &cfg, 6, 1);
    for k in 0..3 {
        assert!(set.join(format!("seq_{k:03}")).join("meta.json").is_file());
    }
    assert_eq!(dir_bytes(&set.join("seq_001")), dir_bytes(&single));
}

#[test]
fn track_writes_one_box_per_frame() {
    let tmp = TempDir::new().unwrap();
    let cfg = short(tmp.path());
    let seq = simulate(tmp.path(), "seq", &cfg, 1, 1);
    for protocol in ["reset", "ope"] {
        let out = tmp.path().join(format!("{protocol}.json"));
        ok(&["track", "--seq", s(&seq), "--out", s(&out), "--protocol", protocol]);
        let rec = read_record(&out);
        assert_eq!(rec.boxes.len(), 30);
        assert_eq!(rec.overlaps.len(), 30);
        assert_eq!(rec.groundtruth.len(), 30);
        rec.validate().unwrap();
        assert!(rec.config.pointer("/tracker/mu").is_some());
        assert!(rec.config.pointer("/eval/burn_in").is_some());
    }
}

fn diff_paths(a: &Value, b: &Value, path: String, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for k in x.keys().chain(y.keys().filter(|k| !x.contains_key(*k))) {
                diff_paths(x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), format!("{path}/{k}"), out);
            }
        }
        _ if a != b => out.push(path),
        _ => {}
    }
}

#[test]
fn fusion_endpoints_differ_only_through_mu() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", &["sim.length=40", "sim.motion_sigma=6"]);
    let seq = simulate(tmp.path(), "seq", &cfg, 4, 1);
    let mut recs = Vec::new();
    for mu in ["0", "1"] {
        let c = write_config(tmp.path(), &format!("mu{mu}.txt"), &[&format!("tracker.mu={mu}")]);
        let out = tmp.path().join(format!("mu{mu}.json"));
        ok(&["track", "--seq", s(&seq), "--config", s(&c), "--out", s(&out), "--protocol", "ope"]);
        recs.push(read_record(&out));
    }
    let mut diffs = Vec::new();
    diff_paths(&recs[0].config, &recs[1].config, String::new(), &mut diffs);
    assert_eq!(diffs, vec!["/tracker/mu".to_string()]);
    assert_eq!(recs[0].groundtruth, recs[1].groundtruth);
    assert_eq!(recs[0].sequence, recs[1].sequence);
    assert_eq!(recs[0].boxes[0], recs[1].boxes[0]);
    assert_ne!(recs[0].boxes, recs[1].boxes);
}

#[test]
fn heatmap_dump_holds_full_grids() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", &["sim.length=12"]);
    let seq = simulate(tmp.path(), "seq", &cfg, 2, 1);
    let dump = tmp.path().join("maps");
    ok(&["track", "--seq", s(&seq), "--out", s(&tmp.path().join("r.json")), "--dump-heatmaps", s(&dump), "--protocol", "ope"]);
    let files = dir_bytes(&dump);
    assert_eq!(files.len(), 11);
    for (name, bytes) in files {
        assert!(name.ends_with(".txt"));
        let text = String::from_utf8(bytes).unwrap();
        let dims: Vec<usize> = text.lines().next().unwrap().split(' ').map(|t| t.parse().unwrap()).collect();
        let values = text.lines().nth(1).unwrap().split(' ').count();
        assert_eq!(values, dims[0] * dims[1] * dims[2]);
        let map = Heatmap::from_text(&text).unwrap();
        assert_eq!(map.anchors, 5);
    }
}

#[test]
fn track_rejects_malformed_sequences() {
    let tmp = TempDir::new().unwrap();
    let cfg = short(tmp.path());
    let seq = simulate(tmp.path(), "seq", &cfg, 1, 1);
    fs::write(seq.join("groundtruth.txt"), "1,2,x,4\n").unwrap();
    assert_eq!(code(&["track", "--seq", s(&seq), "--out", s(&tmp.path().join("r.json"))]), 4);
    assert_eq!(code(&["track", "--seq", s(&tmp.path().join("missing")), "--out", s(&tmp.path().join("r.json"))]), 4);
    let bad = write_config(tmp.path(), "bad.txt", &["tracker.mu=2"]);
    assert_eq!(code(&["track", "--seq", s(&seq), "--config", s(&bad), "--out", s(&tmp.path().join("r.json"))]), 2);
}

fn perfect_record(name: &str, len: usize) -> RunRecord {
    let gt: Vec<[f64; 4]> = (0..len).map(|k| [10.0 + k as f64, 20.0, 30.0, 40.0]).collect();
    RunRecord {
        sequence: name.into(),
        boxes: gt.clone(),
        overlaps: vec![1.0; len],
        failures: vec![],
        config: Value::Null,
        protocol: Protocol::Reset,
        inits: vec![0],
        groundtruth: gt,
        frames: None,
        heatmaps: None,
    }
}

#[test]
fn eval_of_a_perfect_run() {
    let tmp = TempDir::new().unwrap();
    for (protocol, tag) in [("reset", Protocol::Reset), ("ope", Protocol::Ope)] {
        let p = tmp.path().join(format!("perfect_{protocol}.json"));
        let rec = RunRecord { protocol: tag, ..perfect_record("p", 40) };
        fs::write(&p, serde_json::to_string(&rec).unwrap()).unwrap();
        let out = tmp.path().join(format!("{protocol}.json"));
        ok(&["eval", s(&p), "--protocol", protocol, "--out", s(&out)]);
        let rep: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        if protocol == "reset" {
            assert_eq!(rep["accuracy"], 1.0);
            assert_eq!(rep["robustness"], 0.0);
            assert_eq!(rep["eao"], 1.0);
        } else {
            assert!((rep["auc"].as_f64().unwrap() - 100.0 / 101.0).abs() < 1e-12);
            assert_eq!(rep["precision"], 1.0);
        }
    }
}

#[test]
fn eval_is_reproducible_and_matches_library() {
    let tmp = TempDir::new().unwrap();
    let cfg = short(tmp.path());
    let set = simulate(tmp.path(), "set", &cfg, 21, 3);
    let mut runs = Vec::new();
    for (k, mu) in ["0", "0.8", "1"].iter().enumerate() {
        let c = write_config(tmp.path(), &format!("t{k}.txt"), &[&format!("tracker.mu={mu}"), "sim.length=30"]);
        let out = tmp.path().join(format!("run{k}.json"));
        let seq = set.join(format!("seq_{k:03}"));
        ok(&["track", "--seq", s(&seq), "--config", s(&c), "--out", s(&out)]);
        runs.push(out);
    }
    let args = |out: &Path| -> Vec<String> {
        let mut a: Vec<String> = vec!["eval".into()];
        a.extend(runs.iter().map(|r| s(r).to_string()));
        a.extend(["--out".into(), s(out).to_string()]);
        a
    };
    let (a, b) = (tmp.path().join("a.json"), tmp.path().join("b.json"));
    for out in [&a, &b] {
        let argv = args(out);
        ok(&argv.iter().map(String::as_str).collect::<Vec<_>>());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let records: Vec<RunRecord> = runs.iter().map(|r| read_record(r)).collect();
    let lib = report(&records, Protocol::Reset, &ResetConfig::default()).unwrap();
    let cli: Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    let lib_json = serde_json::to_value(&lib).unwrap();
    for (k, v) in lib_json.as_object().unwrap() {
        assert_eq!(&cli[k], v, "{k}");
    }
    let file = serde_json::to_value(build_report(&records, Protocol::Reset, None).unwrap()).unwrap();
    assert_eq!(file, cli);
    assert_eq!(cli["runs"].as_array().unwrap().len(), 3);
}

#[test]
fn eval_rejects_malformed_runs() {
    let tmp = TempDir::new().unwrap();
    let garbage = tmp.path().join("g.json");
    fs::write(&garbage, "{\"sequence\": 3}").unwrap();
    assert_eq!(code(&["eval", s(&garbage), "--out", s(&tmp.path().join("r.json"))]), 4);
    let mut rec = perfect_record("p", 10);
    rec.overlaps.pop();
    let short = tmp.path().join("s.json");
    fs::write(&short, serde_json::to_string(&rec).unwrap()).unwrap();
    assert_eq!(code(&["eval", s(&short), "--out", s(&tmp.path().join("r.json"))]), 4);
    assert_eq!(code(&["eval", s(&tmp.path().join("missing.json")), "--out", s(&tmp.path().join("r.json"))]), 4);
}

#[test]
fn ablate_mu_sweep() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", &["sim.length=20"]);
    let set = simulate(tmp.path(), "set", &cfg, 8, 2);
    let out = tmp.path().join("ab.csv");
    ok(&["ablate", "--seq", s(&set), "--sweep", "tracker.mu=0:1:0.1", "--config", s(&cfg), "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with(ABLATION_HEADER));
    assert_eq!(&header[..ABLATION_HEADER.len()], "param,value,A,R,eao,auc");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[0][1], "0");
    assert_eq!(rows[10][1], "1");
    for c in 2..6 {
        let col: Vec<f64> = rows.iter().map(|r| r[c].parse().unwrap()).collect();
        let last: f64 = rows[10][c + 4].parse().unwrap();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        assert!((last - mean).abs() < 1e-5, "column {c}: {last} vs {mean}");
    }
}

#[test]
fn ablate_rejects_malformed_sweeps() {
    let tmp = TempDir::new().unwrap();
    let cfg = short(tmp.path());
    let seq = simulate(tmp.path(), "seq", &cfg, 1, 1);
    let out = tmp.path().join("ab.csv");
    for bad in ["tracker.mu", "tracker.mu=1:0:0.1", "tracker.nope=1,2", "tracker.mu=0,5"] {
        assert_eq!(code(&["ablate", "--seq", s(&seq), "--sweep", bad, "--out", s(&out)]), 2, "{bad}");
    }
    assert!(!out.exists());
}

#[test]
fn calibrate_needs_three_sequences() {
    let tmp = TempDir::new().unwrap();
    let cfg = short(tmp.path());
    let set = simulate(tmp.path(), "set", &cfg, 1, 2);
    assert_eq!(code(&["calibrate", "--seq", s(&set), "--out", s(&tmp.path().join("w.json"))]), 2);
}

#[test]
fn calibrate_is_deterministic_and_on_the_simplex() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", &["sim.length=15"]);
    let set = simulate(tmp.path(), "set", &cfg, 30, 3);
    let (a, b) = (tmp.path().join("a.json"), tmp.path().join("b.json"));
    for out in [&a, &b] {
        ok(&["calibrate", "--seq", s(&set), "--config", s(&cfg), "--out", s(out), "--step", "0.5", "--seed", "3"]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let w: Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    for family in ["alpha", "beta"] {
        let v: Vec<f64> = w[family].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(v.len(), 3);
        assert!(v.iter().all(|&x| x >= 0.0));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{family}: {v:?}");
    }
    assert_eq!(w["seed"], 3);
    assert_eq!(code(&["calibrate", "--seq", s(&set), "--out", s(&a), "--step", "0.3"]), 2);
}

#[test]
fn calibration_finds_the_informative_layer() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", &["sim.length=60", "sim.motion_sigma=8", "features.layer_gains=0,1,0"]);
    let set = simulate(tmp.path(), "set", &cfg, 0, 6);
    let seqs = load_sequences(&[set]).unwrap();
    let base = load_config(Some(&cfg)).unwrap();
    let (alpha, eao) = search(&seqs, &base, Family::Alpha, Objective::Eao, 10).unwrap();
    assert!(alpha[1] >= 0.8 - 1e-12, "alpha {alpha:?} eao {eao}");
}

#[test]
fn image_mode_round_trip() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", &["sim.length=8"]);
    let seq = tmp.path().join("img");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&seq), "--mode", "image", "--seed", "4"]);
    assert!(seq.join("00000000.pgm").is_file());
    assert!(seq.join("00000007.pgm").is_file());
    assert!(!seq.join("scene.jsonl").exists());
    let out = tmp.path().join("r.json");
    ok(&["track", "--seq", s(&seq), "--out", s(&out), "--protocol", "ope"]);
    let rec = read_record(&out);
    assert_eq!(rec.boxes.len(), 8);
    assert!(rec.boxes.iter().all(|b| b.iter().all(|v| v.is_finite())));
}
