use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use deeprank::dataset::Dataset;
use deeprank::net::{io, MultiscaleConfig};
use serde_json::Value;

const SMALL: [&str; 6] = [
    "--set=gen.num_categories=4",
    "--set=gen.images_per_category=12",
    "--set=gen.eval_per_category=6",
    "--set=eval.pool_size=20",
    "--set=eval.k=10",
    "--set=train.log_interval=5",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deeprank"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).args(SMALL).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str) {
    ok(&["gen-data", "--out", s(dir), "--seed", seed]);
}

#[test]
fn gen_data_round_trips_and_is_seeded() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    gen(&a, "5");
    gen(&b, "5");
    gen(&c, "6");
    let train = Dataset::load(&a.join("train.manifest.jsonl")).unwrap();
    let eval = Dataset::load(&a.join("eval.manifest.jsonl")).unwrap();
    assert_eq!((train.len(), eval.len()), (48, 24));
    let blob = |d: &Path| std::fs::read(d.join("train.blob")).unwrap();
    assert_eq!(blob(&a), blob(&b));
    assert_ne!(blob(&a), blob(&c));
    let m = read_json(&a.join("run.json"));
    assert_eq!(m["seed"], 5);
    assert_eq!(m["sources"]["gen.seed"], "flag");
    assert_eq!(m["sources"]["gen.num_categories"], "flag");
    assert_eq!(m["sources"]["gen.spread"], "default");
    assert!(m["version"].is_string() && m["config_hash"].is_string());
}

#[test]
fn default_gen_data_loads() {
    let t = tempfile::tempdir().unwrap();
    let out = bin().args(["gen-data", "--out", s(t.path())]).output().unwrap();
    assert!(out.status.success());
    let train = Dataset::load(&t.path().join("train.manifest.jsonl")).unwrap();
    assert_eq!(train.len(), 500);
    assert_eq!(train.shape().len(), 3 * 32 * 32);
}

#[test]
fn invalid_shape_fails_with_message() {
    let t = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--out", s(t.path()), "--set", "gen.shape=[3,0,32]"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape.height"));
    let out = run(&["gen-data", "--out", s(t.path()), "--set", "gen.bogus=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));
}

#[test]
fn train_is_deterministic_and_eval_reports_both_metrics() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "1");
    let (r1, r2) = (t.path().join("r1"), t.path().join("r2"));
    for r in [&r1, &r2] {
        ok(&["train", "--data", s(&data), "--out", s(r), "--workers", "1", "--seed", "7", "--budget", "240"]);
    }
    let ckpt = |r: &Path| std::fs::read(r.join("model.ckpt")).unwrap();
    assert_eq!(ckpt(&r1), ckpt(&r2));
    let m = read_json(&r1.join("run.json"));
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["train"]["budget"], 240);

    let e = t.path().join("e");
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&r1.join("model.ckpt")), "--out", s(&e), "--csv", "--k", "30"]);
    let report = read_json(&e.join("eval.json"));
    assert!(report["precision"].as_f64().unwrap() >= 0.0);
    assert!(report["score_at_top_k"].is_i64());
    assert_eq!(report["K"], 30);
    assert!(e.join("triplets.csv").is_file());
    assert!(e.join("run.json").is_file());

    // Replaying the manifest reproduces the config hash.
    let out = bin()
        .args(["--config", s(&r1.join("run.json")), "show-config"])
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with(&format!("# config hash {}", m["config_hash"].as_str().unwrap())));
}

#[test]
fn eval_defaults_to_k_30_and_missing_checkpoint_fails() {
    let out = bin().arg("show-config").output().unwrap();
    assert!(String::from_utf8(out.stdout).unwrap().contains("eval.k = 30  # default"));
    let t = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--data", s(t.path()), "--checkpoint", s(&t.path().join("none.ckpt")), "--out", s(t.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no checkpoint"));
}

#[test]
fn pretrain_phase_precedes_ranking_phase() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "2");
    let r = t.path().join("r");
    ok(&["train", "--data", s(&data), "--out", s(&r), "--budget", "80", "--pretrain", "--set", "pretrain.epochs=2"]);
    let phases: Vec<String> = std::fs::read_to_string(r.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["phase"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(&phases[..2], ["pretrain", "pretrain"]);
    assert!(phases.len() > 2 && phases[2..].iter().all(|p| p == "rank"));
}

#[test]
fn interrupted_run_leaves_loadable_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "3");
    let r = t.path().join("r");
    let mut child = bin()
        .args(["train", "--data", s(&data), "--out", s(&r), "--budget", "100000000"])
        .args(SMALL)
        .args(["--set", "run.checkpoint_every=1"])
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let ckpt = r.join("checkpoint.ckpt");
    let start = Instant::now();
    while !ckpt.exists() {
        assert!(start.elapsed() < Duration::from_secs(120), "no periodic checkpoint appeared");
        std::thread::sleep(Duration::from_millis(50));
    }
    std::thread::sleep(Duration::from_millis(300));
    child.kill().unwrap();
    child.wait().unwrap();
    let (net, params) = io::load_checkpoint(&ckpt).unwrap();
    assert_eq!(net.config(), &MultiscaleConfig::desk_scale());
    assert!(params.is_finite());
    assert!(!r.join("model.ckpt").exists());
}

#[test]
fn sampler_stats_sweep_tracks_ratio_and_labels_mode() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "4");
    for (flag, mode) in [(None, "weighted"), (Some("--uniform"), "uniform")] {
        let out = t.path().join(mode);
        let mut args = vec!["sampler-stats", "--data", s(&data), "--out", s(&out), "--sweep"];
        args.extend(flag);
        args.extend(["--set", "stats.sweep_budget=80", "--set", "stats.triplets=5000"]);
        ok(&args);
        let report = read_json(&out.join("sampler_stats.json"));
        assert_eq!(report["mode"], mode);
        assert!(report["buffers"].as_array().unwrap().len() == 4);
        let mut rdr = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 5);
        for row in rows {
            assert_eq!(&row[0], mode);
            let (ratio, frac): (f64, f64) = (row[1].parse().unwrap(), row[2].parse().unwrap());
            assert!((ratio - frac).abs() <= 0.02, "{mode} ratio {ratio} gave {frac}");
            assert!(row[3].parse::<f64>().is_ok() && row[4].parse::<i64>().is_ok());
        }
    }
}

#[test]
fn export_filters_writes_one_grid_per_path() {
    let t = tempfile::tempdir().unwrap();
    let net = deeprank::net::Network::new(MultiscaleConfig::desk_scale()).unwrap();
    let ckpt = t.path().join("init.ckpt");
    io::save_checkpoint(&ckpt, &net, &net.init_params(1)).unwrap();
    let out = t.path().join("f");
    ok(&["export-filters", "--checkpoint", s(&ckpt), "--out", s(&out)]);
    for p in 0..net.paths().len() {
        let file = std::fs::File::open(out.join(format!("path{p}_filters.png"))).unwrap();
        let reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().unwrap();
        let info = reader.info();
        let grids = deeprank::cli::filter_grids(&net, &net.init_params(1));
        assert_eq!((info.width as usize, info.height as usize), (grids[p].width, grids[p].height));
        let ((kernels, _, _), _) = net.first_conv(&net.init_params(1), p).unwrap();
        assert_eq!(grids[p].kernels, kernels);
    }
    assert!(out.join("run.json").is_file());
}
