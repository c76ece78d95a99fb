use std::fs;
use std::path::Path;
use std::process::Command;

use ept_core::cli::{self, Checkpoint, CompareReport, EvalReport, KdeSource, MetricName, PlotKind, RunSummary};
use ept_core::io;
use ept_core::nets::Mlp;
use ept_core::ratio_fit::Fitter;
use ept_core::transport::TransportConfig;
use serde_json::{json, Value};

fn small_config(dataset: &str) -> Value {
    json!({
        "dataset": {"name": dataset, "n": 200, "seed": 0},
        "reference": {"n": 200},
        "divergence": "chi2",
        "objective": {"variant": "lsdr", "alpha": 0.5, "T": 2, "batch": 100, "lr": 1e-3},
        "transport": {"s": 0.01, "K": 10},
        "net": {"widths": [16, 16]},
        "seed": 0,
        "snapshot_every": 5
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn ept(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ept"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn train(root: &Path, cfg: &Value) -> std::path::PathBuf {
    let config = write_config(root, "config.json", cfg);
    let run = root.join("run");
    let (code, _) = ept(&["train", "--config", config.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(code, 0);
    run
}

#[test]
fn train_writes_every_output() {
    let root = tempfile::tempdir().unwrap();
    let run = train(root.path(), &small_config("8gaussians"));
    for f in [cli::CONFIG_FILE, cli::CHECKPOINT_FILE, cli::DIAGNOSTICS_FILE, cli::RUN_FILE] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let summary: RunSummary = io::read_json(&run.join(cli::RUN_FILE)).unwrap();
    assert_eq!(summary.status, "complete");
    assert_eq!(summary.iterations, 10);
    assert_eq!(summary.particles, 200);
    let iters: Vec<usize> = cli::list_snapshots(&run).unwrap().into_iter().map(|(i, _)| i).collect();
    assert_eq!(iters, vec![0, 5, 10]);
    let diag = fs::read_to_string(run.join(cli::DIAGNOSTICS_FILE)).unwrap();
    assert_eq!(diag.lines().count(), 11);
    assert!(diag.starts_with("iter,"));
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let root = tempfile::tempdir().unwrap();
    let run = root.path().join("run");
    let mut unknown = small_config("8gaussians");
    unknown["bogus"] = json!(1);
    let mut bad_step = small_config("8gaussians");
    bad_step["transport"]["s"] = json!(-0.1);
    let mut bad_batch = small_config("8gaussians");
    bad_batch["objective"]["batch"] = json!(500);
    let mut bad_name = small_config("nope");
    bad_name["dataset"]["n"] = json!(10);
    for (i, cfg) in [unknown, bad_step, bad_batch, bad_name].iter().enumerate() {
        let path = write_config(root.path(), &format!("bad{i}.json"), cfg);
        let (code, _) = ept(&["train", "--config", path.to_str().unwrap(), "--out", run.to_str().unwrap()]);
        assert_eq!(code, 2, "config {i}");
        assert!(!run.exists(), "config {i} wrote outputs");
    }
    let (code, _) = ept(&["train", "--bogus-flag"]);
    assert_eq!(code, 2);
}

#[test]
fn evaluate_initial_snapshot_matches_recorded_initial_value() {
    let root = tempfile::tempdir().unwrap();
    let run = train(root.path(), &small_config("8gaussians"));
    let last = cli::cmd_evaluate(&run, MetricName::Mmd2, None, None, None).unwrap();
    assert_eq!(last.iteration, 10);
    let first = cli::cmd_evaluate(&run, MetricName::Mmd2, Some(0), None, None).unwrap();
    assert_eq!(Some(first.report.value), first.initial_value);
    assert_eq!(first.initial_value, last.initial_value);
    assert_eq!(first.report.bandwidth, last.report.bandwidth);
    let written: EvalReport = io::read_json(&run.join("eval_mmd2_000010.json")).unwrap();
    assert_eq!(written, last);

    let w2 = cli::cmd_evaluate(&run, MetricName::W2, None, None, None).unwrap();
    assert!(w2.report.value > 0.0 && w2.report.bandwidth.is_none());
    let (code, _) = ept(&["evaluate", run.to_str().unwrap(), "--metric", "w2", "--n", "2001"]);
    assert_eq!(code, 2);
    let (code, _) = ept(&["evaluate", run.to_str().unwrap(), "--iter", "7"]);
    assert_ne!(code, 0);
}

#[test]
fn plots_write_svg_and_data() {
    let root = tempfile::tempdir().unwrap();
    let run = train(root.path(), &small_config("8gaussians"));

    let (svg, csv) = cli::cmd_plot(&run, PlotKind::Scatter, None, KdeSource::Particles).unwrap();
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 201);
    assert_eq!(fs::read_to_string(&svg).unwrap().matches("<circle").count(), 200);

    let (_, csv) = cli::cmd_plot(&run, PlotKind::KdeHeatmap, None, KdeSource::Target).unwrap();
    assert!(csv.ends_with("kde_target.csv"));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 10_001);

    let (svg, csv) = cli::cmd_plot(&run, PlotKind::Diagnostics, None, KdeSource::Particles).unwrap();
    assert!(fs::read_to_string(svg).unwrap().contains("fit_loss"));
    assert_eq!(
        fs::read_to_string(csv).unwrap(),
        fs::read_to_string(run.join(cli::DIAGNOSTICS_FILE)).unwrap()
    );

    let (code, stdout) = ept(&["plot", run.to_str().unwrap(), "--kind", "surface-ratio"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("surface_ratio.svg"));
}

#[test]
fn surface_of_zero_network_is_flat_zero() {
    let root = tempfile::tempdir().unwrap();
    let run = train(root.path(), &small_config("8gaussians"));
    let path = run.join(cli::CHECKPOINT_FILE);
    let mut ckpt: Checkpoint = io::read_json(&path).unwrap();
    let mut fitter: Fitter = serde_json::from_value(ckpt.record.provider_state.clone()).unwrap();
    let widths = fitter.net.mlp.widths().to_vec();
    fitter.net.mlp = Mlp::zeros(&widths).unwrap();
    ckpt.record.provider_state = serde_json::to_value(&fitter).unwrap();
    io::write_json(&path, &ckpt).unwrap();

    let (_, csv) = cli::cmd_plot(&run, PlotKind::SurfaceRatio, None, KdeSource::Particles).unwrap();
    let text = fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x0,x1,value"));
    let values: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 10_000);
    assert!(values.iter().all(|&v| v == 0.0));
}

#[test]
fn plot_without_checkpoint_fails() {
    let root = tempfile::tempdir().unwrap();
    let run = train(root.path(), &small_config("8gaussians"));
    fs::remove_file(run.join(cli::CHECKPOINT_FILE)).unwrap();
    assert!(cli::cmd_plot(&run, PlotKind::SurfaceRatio, None, KdeSource::Particles).is_err());
}

#[test]
fn compare_shares_data_and_records_failures() {
    let root = tempfile::tempdir().unwrap();
    let mut base = small_config("moons");
    base["snapshot_every"] = json!(0);
    let cc = json!({"base": base, "methods": ["ept-chi2", "mmd-flow", "svgd"], "eval_n": 200});
    let path = write_config(root.path(), "compare.json", &cc);
    let out = root.path().join("cmp");
    let (code, stdout) = ept(&["compare", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(stdout.starts_with("method,status"));

    let report: CompareReport = io::read_json(&out.join("compare.json")).unwrap();
    assert_eq!(report.rows.len(), 3);
    let hash = &report.rows[0].target_hash;
    assert!(report.rows.iter().all(|r| &r.target_hash == hash));
    let (ok, failed): (Vec<_>, Vec<_>) = report.rows.iter().partition(|r| r.status == "complete");
    assert_eq!(ok.len(), 2);
    assert_eq!(ok[0].initial_mmd2, ok[1].initial_mmd2);
    assert!(ok.iter().all(|r| r.final_mmd2.unwrap() < r.initial_mmd2.unwrap()));
    assert_eq!(failed[0].method, "svgd");
    assert!(failed[0].error.as_deref().unwrap().contains("analytic"));
    assert_eq!(fs::read_to_string(out.join("compare.csv")).unwrap(), report.to_csv());

    let one = write_config(root.path(), "one.json", &json!({"base": small_config("moons"), "methods": ["svgd"]}));
    let (code, _) = ept(&["compare", "--config", one.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn presets_print_and_validate() {
    let (code, stdout) = ept(&["presets"]);
    assert_eq!(code, 0);
    let all: serde_json::Map<String, Value> = serde_json::from_str(&stdout).unwrap();
    assert_eq!(all.len(), cli::PRESET_NAMES.len());
    for name in cli::PRESET_NAMES {
        let cfg: TransportConfig = serde_json::from_value(all[name].clone()).unwrap();
        cfg.validate().unwrap();
    }
    let (code, _) = ept(&["presets", "--name", "nope"]);
    assert_eq!(code, 2);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let root = tempfile::tempdir().unwrap();
    let cfg: TransportConfig = serde_json::from_value(small_config("moons")).unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let partial = cli::cmd_train(&cfg, &a, false, Some(4)).unwrap();
    assert_eq!((partial.status.as_str(), partial.iterations), ("partial", 4));
    cli::cmd_train(&cfg, &a, true, None).unwrap();
    cli::cmd_train(&cfg, &b, false, None).unwrap();
    for f in [cli::DIAGNOSTICS_FILE, cli::CHECKPOINT_FILE, cli::RUN_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let mut other = cfg.clone();
    other.seed = 1;
    assert!(cli::cmd_train(&other, &a, true, None).is_err());
}

#[test]
fn seed_override_changes_the_run() {
    let root = tempfile::tempdir().unwrap();
    let path = write_config(root.path(), "c.json", &small_config("moons"));
    let cfg = cli::load_config(&path, Some(7)).unwrap();
    assert_eq!(cfg.seed, 7);
    assert!(cli::load_config(&root.path().join("missing.json"), None).is_err());
}
