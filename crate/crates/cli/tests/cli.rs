use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn dedtwin(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dedtwin"))
        .arg("--out")
        .arg(out)
        .args(args)
        .current_dir(root())
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&dedtwin(tmp.path(), &[])), 2);
    assert_eq!(code(&dedtwin(tmp.path(), &["generate"])), 2);
    assert_eq!(code(&dedtwin(tmp.path(), &["train", "--model", "nope", "--dataset", "x.csv"])), 2);
}

#[test]
fn missing_segment_field_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write(
        tmp.path(),
        "bad.json",
        r#"{ "name": "bad", "layers": 1, "segments": [ { "length_mm": 40, "ts": 10, "ep": 100, "wfs": 2 } ] }"#,
    );
    let o = dedtwin(&tmp.path().join("out"), &["generate", "--protocol", &p]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("segments[0]") && msg.contains("`lp`"), "{msg}");
}

#[test]
fn malformed_config_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "plant.json", "{\n  \"seed\": 3,\n  \"dt\": \"fast\"\n}");
    let o = dedtwin(
        &tmp.path().join("out"),
        &["--config", &cfg, "generate", "--protocol", "configs/protocols/bead1.json"],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn generate_is_deterministic_and_writes_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str| {
        let out = tmp.path().join(dir);
        let o = dedtwin(&out, &["--seed", "4", "generate", "--protocol", "configs/protocols/bead4.json"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(std::fs::read(a.join("bead4.csv")).unwrap(), std::fs::read(b.join("bead4.csv")).unwrap());
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seed"], 4);
    assert_eq!(m["outputs"], serde_json::json!(["bead4.csv"]));
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    let header = std::fs::read_to_string(a.join("bead4.csv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "t,lp[W],ts[mm_s],ep[W],wfs[m_min],mpw[mm],mpl[mm],mpt[C],n,bw[mm]");
}

#[test]
fn identify_ranks_structures_and_flags_unidentifiable_records() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dedtwin(tmp.path(), &["generate", "--protocol", "configs/protocols/bead4.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let record = tmp.path().join("bead4.csv").to_string_lossy().into_owned();
    let out = tmp.path().join("all");
    let o = dedtwin(&out, &["identify", "--record", &record, "--all"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ranked = json(&out.join("comparison.json"));
    assert_eq!(ranked.as_array().unwrap().len(), 4);
    assert!(ranked[0]["validation_bf"].as_f64().unwrap() > 80.0);

    let before = std::fs::read(&record).unwrap();
    let out = tmp.path().join("first");
    let o = dedtwin(&out, &["identify", "--record", &record, "--structure", "first-order"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&record).unwrap(), before, "inputs are never rewritten");
    let k = json(&out.join("model.json"))["parameters"]["k_gain"].as_f64().unwrap();
    let truth = json(&root().join("configs/plant.json"))["true_g_lp"]["k_gain"].as_f64().unwrap();
    assert!((k - truth).abs() <= 0.1 * truth, "K {k} vs plant {truth}");

    let flat = write(
        tmp.path(),
        "flat.json",
        r#"{ "name": "flat", "layers": 1, "segments": [ { "length_mm": 60, "lp": 3000, "ts": 10, "ep": 100, "wfs": 2 } ] }"#,
    );
    let o = dedtwin(tmp.path(), &["generate", "--protocol", &flat, "--noise-free"]);
    assert_eq!(code(&o), 0);
    let flat_record = tmp.path().join("flat.csv").to_string_lossy().into_owned();
    let o = dedtwin(&tmp.path().join("flat"), &["identify", "--record", &flat_record, "--structure", "first-order"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn rsm_recovers_a_cubic_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = String::from("mpw[mm],mpl[mm],n,bw[mm]\n");
    for i in 0..120 {
        let (a, b, c) = ((i % 7) as f64 * 0.3 + 4.0, (i % 11) as f64 * 0.2 + 6.0, (i % 5 + 1) as f64);
        let y = 0.5 + a - 0.2 * b + 0.01 * a * a * b - 0.003 * c * c * c + 0.02 * a * c;
        text.push_str(&format!("{a},{b},{c},{y}\n"));
    }
    let d = write(tmp.path(), "cubic.csv", &text);
    let out = tmp.path().join("out");
    let o = dedtwin(&out, &["train", "--model", "rsm", "--dataset", &d]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r2 = json(&out.join("report.json"))["validation"]["r2"].as_f64().unwrap();
    assert!((r2 - 1.0).abs() < 1e-9, "{r2}");
}

#[test]
fn ablation_writes_one_row_per_subset() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = String::from("mpw[mm],mpl[mm],mpt[C],n,bw[mm]\n");
    for i in 0..150 {
        let (a, b, t, n) = (4.0 + (i % 13) as f64 * 0.1, 6.0 + (i % 7) as f64 * 0.3, 1500.0 + (i % 17) as f64 * 10.0, (i % 5 + 1) as f64);
        text.push_str(&format!("{a},{b},{t},{n},{}\n", a + 0.2 * b - 0.05 * n));
    }
    let d = write(tmp.path(), "f2.csv", &text);
    let out = tmp.path().join("out");
    let o = dedtwin(&out, &["train", "--model", "ablation", "--dataset", &d, "--epochs", "5", "--hidden", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("table2.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "model,rmse,mae,r2");
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn vision_keeps_one_row_per_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dedtwin(tmp.path(), &["vision", "--frames", "data/frames"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("geometry.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let frames = std::fs::read_dir(root().join("data/frames"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(rows.len(), frames);
    // frame_000 holds the a = 40, b = 20 px ellipse.
    let (mpw, mpl): (f64, f64) = (rows[0][1].parse().unwrap(), rows[0][2].parse().unwrap());
    assert!((mpw - 40.0).abs() <= 1.0 && (mpl - 80.0).abs() <= 1.0, "{mpw} {mpl}");
}

#[test]
fn vision_rejects_an_empty_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = dedtwin(&tmp.path().join("out"), &["vision", "--frames", empty.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn vision_flags_unreadable_frames_without_dropping_them() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = tmp.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    std::fs::copy(root().join("data/frames/frame_000.pgm"), frames.join("a.pgm")).unwrap();
    std::fs::write(frames.join("b.pgm"), b"P5\n2 2\n255\n\x00").unwrap();
    let out = tmp.path().join("out");
    let o = dedtwin(&out, &["vision", "--frames", frames.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: frame 1"));
    let csv = std::fs::read_to_string(out.join("geometry.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("0,") && rows[0].split(',').nth(3) == Some("1"));
    assert_eq!(rows[1].split(',').nth(3), Some("0"));
}

#[test]
fn control_runs_with_the_published_gains() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dedtwin(
        tmp.path(),
        &["generate", "--protocol", "configs/protocols/wall5.json", "--protocol", "configs/protocols/wall8.json"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rec = |n: &str| tmp.path().join(n).to_string_lossy().into_owned();
    let out = tmp.path().join("control");
    let o = dedtwin(
        &out,
        &[
            "--config", "configs/loop.json", "control", "--records", &rec("wall5.csv"), "--records", &rec("wall8.csv"),
            "--gains-from", "configs/table4.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = std::fs::read_to_string(out.join("trace_property-controlled.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "t,setpoint,controlled,mpw[mm],bw[mm],lp[W],n,error");
    assert_eq!(trace.lines().count(), 1 + 1100);
    let cmp = json(&out.join("comparison.json"));
    assert_eq!(cmp["scenarios"].as_array().unwrap().len(), 2);
}
