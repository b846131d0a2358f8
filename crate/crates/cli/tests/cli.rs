use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdp"))
        .args(args)
        .output()
        .expect("run rdp")
}

fn json(out: &Output) -> Value {
    let v: Value = serde_json::from_slice(&out.stdout).expect("json on stdout");
    assert_eq!(v["schema_version"], 1, "{v}");
    v
}

/// Header and rows of an emitted CSV after checking the version line.
fn csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# schema_version=1"));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .filter(|l| !l.starts_with('{'))
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    (header, rows)
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

const BINARY: &[&str] = &["--source", "binary:p=0.1", "--distortion", "hamming"];

fn solve(d: &str, p: &str, perception: &str) -> Value {
    let mut args = vec!["solve-rdp"];
    args.extend_from_slice(BINARY);
    args.extend_from_slice(&["--perception", perception, "--D", d, "--P", p, "--pi-sweeps", "20"]);
    let out = rdp(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    json(&out)
}

fn write_image(path: &Path, w: usize, h: usize) {
    let mut text = format!("P2\n{w} {h}\n255\n");
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| (60 + 3 * r + 2 * c + (r * c) % 5).to_string()).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

#[test]
fn solve_rdp_binary_tv() {
    let v = solve("0.05", "1", "tv");
    assert!((v["rate"].as_f64().unwrap() - 0.126568).abs() < 1e-4, "{v}");
    assert_eq!(v["converged"], true);
    for key in ["achieved_D", "achieved_P", "iterations", "residual"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn huge_perception_budget_is_rate_distortion() {
    let v = solve("0.05", "1e6", "w2");
    // H_b(0.1) - H_b(0.05)
    assert!((v["rate"].as_f64().unwrap() - 0.126_567_730_045_575_6).abs() < 1e-4, "{v}");
}

#[test]
fn bits_are_added_next_to_nats() {
    let mut args = vec!["solve-rdp"];
    args.extend_from_slice(BINARY);
    args.extend_from_slice(&["--perception", "tv", "--D", "0.05", "--P", "1", "--bits"]);
    let v = json(&rdp(&args));
    let nats = v["rate"].as_f64().unwrap();
    assert!((v["rate_bits"].as_f64().unwrap() - nats / std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn malformed_source_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("p.json");
    fs::write(&src, "{\"probs\": [0.5, 0.6]").unwrap();
    let out_path = dir.path().join("out.json");
    let out = rdp(&[
        "solve-rdp",
        "--source",
        &format!("file={}", src.display()),
        "--perception",
        "tv",
        "--D",
        "0.1",
        "--P",
        "0.1",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_path.exists());
}

#[test]
fn file_source_and_cost() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("p.json");
    fs::write(&src, r#"{"support": [0, 1], "probs": [0.1, 0.9]}"#).unwrap();
    let cost = dir.path().join("d.json");
    fs::write(&cost, r#"{"rows": 2, "cols": 2, "entries": [[0, 1], [1, 0]]}"#).unwrap();
    let out = rdp(&[
        "solve-rdp",
        "--source",
        &format!("file={}", src.display()),
        "--distortion",
        &format!("file={}", cost.display()),
        "--perception",
        "tv",
        "--D",
        "0.05",
        "--P",
        "1",
    ]);
    assert!(out.status.success());
    assert!((json(&out)["rate"].as_f64().unwrap() - 0.126568).abs() < 1e-4);
}

#[test]
fn non_convergence_exits_two() {
    let mut args = vec!["solve-rdp"];
    args.extend_from_slice(BINARY);
    args.extend_from_slice(&["--perception", "tv", "--D", "0.05", "--P", "0.02", "--max-iter", "3"]);
    let out = rdp(&args);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["converged"], false);
}

#[test]
fn single_point_sweep_matches_solve() {
    let mut args = vec!["sweep"];
    args.extend_from_slice(BINARY);
    args.extend_from_slice(&["--perception", "tv", "--D-grid", "0.05:0.05:1", "--P-grid", "0.02:0.02:1"]);
    args.extend_from_slice(&["--pi-sweeps", "20"]);
    let out = rdp(&args);
    assert!(out.status.success());
    let (header, rows) = csv(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(header, ["D", "P", "rate", "achieved_D", "achieved_P", "converged"]);
    assert_eq!(rows.len(), 1);
    let direct = solve("0.05", "0.02", "tv");
    assert_eq!(num(&rows[0][2]), direct["rate"].as_f64().unwrap());
}

#[test]
fn sweep_is_monotone_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let mut args = vec!["sweep"];
        args.extend_from_slice(BINARY);
        args.extend_from_slice(&["--perception", "tv", "--D-grid", "0.01:0.09:5", "--P-grid", "0:0.1:4"]);
        args.extend_from_slice(&["--pi-sweeps", "20", "--max-iter", "5000", "--out", path.to_str().unwrap()]);
        let out = rdp(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read_to_string(path).unwrap()
    };
    let text = run("a.csv");
    assert_eq!(text, run("b.csv"));
    let (_, rows) = csv(&text);
    assert_eq!(rows.len(), 20);
    let rate: Vec<Vec<f64>> = rows.chunks(4).map(|c| c.iter().map(|r| num(&r[2])).collect()).collect();
    // Row-major: D outer, P inner.
    assert_eq!(num(&rows[1][0]), 0.01);
    assert_eq!(num(&rows[1][1]), 0.1 / 3.0);
    for i in 0..5 {
        for j in 0..4 {
            if j + 1 < 4 {
                assert!(rate[i][j + 1] <= rate[i][j] + 1e-6);
            }
            if i + 1 < 5 {
                assert!(rate[i + 1][j] <= rate[i][j] + 1e-6);
            }
        }
    }
}

#[test]
fn transition_f_matches_the_binary_formula() {
    let mut args = vec!["transition", "--mode", "f"];
    args.extend_from_slice(BINARY);
    args.extend_from_slice(&["--perception", "tv", "--D-grid", "0.01:0.09:5", "--pi-sweeps", "20"]);
    args.extend_from_slice(&["--max-iter", "5000"]);
    let out = rdp(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = csv(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(header, ["D", "P", "rate"]);
    for r in rows {
        let (d, p) = (num(&r[0]), num(&r[1]));
        assert!((p - d * 0.8 / (1.0 - 2.0 * d)).abs() < 1e-3, "D={d} P={p}");
    }
}

#[test]
fn transition_h_at_zero_perception() {
    let mut args = vec!["transition", "--mode", "h"];
    args.extend_from_slice(BINARY);
    args.extend_from_slice(&["--perception", "tv", "--P-grid", "0:0.1:3"]);
    let out = rdp(&args);
    assert!(out.status.success());
    let (_, rows) = csv(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(num(&rows[0][1]), 0.0);
    assert!((num(&rows[0][0]) - 0.18).abs() < 1e-9);
    // Past P = p the zero-rate distortion is the source mass 0.1.
    assert!((num(&rows[2][0]) - 0.1).abs() < 1e-9);
}

#[test]
fn detect_on_flat_samples_returns_first_point() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    fs::write(&path, "# schema_version=1\nP,D\n0.0,0.3\n0.1,0.3\n0.2,0.3\n").unwrap();
    let out = rdp(&["transition", "--mode", "detect", "--samples", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let last = text.lines().last().unwrap();
    let t: Value = serde_json::from_str(last).unwrap();
    assert_eq!(t["schema_version"], 1);
    assert_eq!(t["P"], 0.0);
    assert_eq!(t["D"], 0.3);
}

#[test]
fn detect_without_plateau_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    fs::write(&path, "P,D\n0.0,0.5\n0.1,0.4\n0.2,0.3\n").unwrap();
    let out = rdp(&["transition", "--mode", "detect", "--samples", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn solve_drp_endpoints() {
    let drp = |r: &str, p: &str| {
        let mut args = vec!["solve-drp"];
        args.extend_from_slice(BINARY);
        args.extend_from_slice(&["--perception", "tv", "--R", r, "--P", p, "--max-iter", "5000"]);
        let out = rdp(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        json(&out)
    };
    let zero = drp("0", "0.2");
    assert!((zero["distortion"].as_f64().unwrap() - 0.1).abs() < 1e-9, "{zero}");
    let full = drp("0.4", "0.2");
    assert!(full["distortion"].as_f64().unwrap() <= 1e-6, "{full}");
}

#[test]
fn rdh_without_distortion_marks_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.pgm");
    write_image(&img, 12, 10);
    let out = rdp(&["rdh", "--image", img.to_str().unwrap(), "--D", "0", "--P", "10", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["embedding_rate_nats"], 0.0);
    assert_eq!(v["embedding_rate_bits"], 0.0);
    assert_eq!(v["psnr"], "inf");
}

#[test]
fn rdh_marked_image_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.pgm");
    write_image(&img, 12, 10);
    let mark = |name: &str| {
        let path = dir.path().join(name);
        let out = rdp(&[
            "rdh",
            "--image",
            img.to_str().unwrap(),
            "--D",
            "4",
            "--P",
            "4",
            "--eps",
            "0.1",
            "--seed",
            "11",
            "--emit-marked",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v = json(&out);
        assert!(v["embedding_rate_nats"].as_f64().unwrap() > 0.0);
        assert!(v["psnr"].as_f64().unwrap().is_finite());
        fs::read(path).unwrap()
    };
    let a = mark("a.pgm");
    assert!(a.starts_with(b"P5"));
    assert_eq!(a, mark("b.pgm"));
}

#[test]
fn rdh_marking_needs_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.pgm");
    write_image(&img, 4, 4);
    let target = dir.path().join("m.pgm");
    let out = rdp(&[
        "rdh",
        "--image",
        img.to_str().unwrap(),
        "--D",
        "4",
        "--P",
        "4",
        "--emit-marked",
        target.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!target.exists());
}

#[test]
fn rdh_rejects_a_broken_image() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.pgm");
    fs::write(&img, "P2\n4 4\n255\n1 2 3\n").unwrap();
    let out = rdp(&["rdh", "--image", img.to_str().unwrap(), "--D", "1", "--P", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
}
