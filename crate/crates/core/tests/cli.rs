//! Black-box tests of the `persogen` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use persogen::catalog::PixelImage;

fn persogen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_persogen"))
        .args(args)
        .env_remove(persogen::cli::SEED_ENV)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    assert_eq!(persogen(&[]).status.code(), Some(2));
    assert_eq!(persogen(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        persogen(&["synth", "--users", "many"]).status.code(),
        Some(2)
    );
    assert_eq!(
        persogen(&["--preset", "cluster", "synth"]).status.code(),
        Some(2)
    );
    assert_eq!(persogen(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = persogen(&["prepare", "--data", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let o = persogen(&["synth", "--out", p(dir.path()), "--loyalty", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "seed = 3\n# fine\ngrpo.gamma = 0.5\n").unwrap();
    let o = persogen(&["--config", p(&conf), "synth", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(":3"), "{err}");
    assert!(err.contains("grpo.gamma"), "{err}");
}

#[test]
fn synth_is_seeded_and_prepare_splits_8_1_1() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = persogen(&["synth", "--out", p(&out), "--users", "10", "--seed", seed]);
        assert!(o.status.success());
        out
    };
    let a = run("a", "3");
    let b = run("b", "3");
    let c = run("c", "4");
    for f in ["catalog.jsonl", "codebook.json", "interactions.jsonl"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(a.join("interactions.jsonl")).unwrap(),
        fs::read(c.join("interactions.jsonl")).unwrap()
    );

    let o = persogen(&["prepare", "--data", p(&a)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "samples 100 train 80 val 10 test 10");
    for (name, n) in [("train", 80), ("val", 10), ("test", 10)] {
        let text = fs::read_to_string(a.join(format!("{name}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), n, "{name}");
    }
}

#[test]
fn seed_precedence_env_then_flag() {
    let dir = tempfile::tempdir().unwrap();
    let synth = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_persogen"));
        cmd.args(["synth", "--users", "4", "--out", p(&out)])
            .env_remove(persogen::cli::SEED_ENV);
        if let Some(e) = env {
            cmd.env(persogen::cli::SEED_ENV, e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read(out.join("interactions.jsonl")).unwrap()
    };
    let flag9 = synth("f9", None, Some("9"));
    assert_eq!(synth("e9", Some("9"), None), flag9);
    assert_eq!(synth("e1f9", Some("1"), Some("9")), flag9);
    assert_ne!(synth("e1", Some("1"), None), flag9);
}

#[test]
fn score_prints_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let img = |seed: u64| {
        let v: Vec<f64> = (0..32 * 32)
            .map(|i| ((i as u64 * 37 + seed * 11) % 97) as f64 / 96.0)
            .collect();
        PixelImage::from_gray(32, 32, &v).unwrap().to_rgb8()
    };
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    img(1).save(&a).unwrap();
    img(2).save(&b).unwrap();
    let o = persogen(&["score", p(&a), p(&a), "--text", "a red poster"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let rows: Vec<(&str, f64)> = out
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k, v.parse().unwrap())
        })
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r.0).collect();
    assert_eq!(
        names,
        ["CTS", "CIS", "DIS", "LPIPS", "SSIM", "MS-SSIM", "NIMA"]
    );
    let get = |k: &str| rows.iter().find(|r| r.0 == k).unwrap().1;
    assert!((get("CIS") - 100.0).abs() < 1e-9);
    assert_eq!(get("LPIPS"), 0.0);
    assert_eq!(get("SSIM"), 100.0);

    let o = persogen(&["score", p(&a), p(&b)]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains("CTS"));
}

#[test]
fn monitor_replays_a_curve() {
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("curve.csv");
    let mut csv = String::from("step,mean,std,kl,loss\n");
    for s in 1..=100u64 {
        let mean = 80.0 - (s as f64 - 80.0).abs();
        let std = if s <= 90 { 1.0 } else { 0.05 };
        csv.push_str(&format!("{s},{mean},{std},0,0\n"));
    }
    fs::write(&curve, csv).unwrap();
    let o = persogen(&["monitor", p(&curve)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "hack_step,selected\n91,80\n");

    fs::write(&curve, "step,mean\n1,2\n").unwrap();
    assert_eq!(persogen(&["monitor", p(&curve)]).status.code(), Some(1));
}
