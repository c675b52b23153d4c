use std::process::Command;

use deta::episodes::{generate_synthetic_episode, save_episode_file, EpisodeShape, SyntheticNoiseConfig};
use deta::harness::{
    emit_report, report_from_json, report_to_json, run_benchmark, write_report_csv, Ablation, BenchmarkConfig,
    ReportFormat, CSV_COLUMNS,
};
use deta::{AdaptedState, TaskEpisode};

fn small_config() -> BenchmarkConfig {
    let mut cfg = BenchmarkConfig {
        episodes_per_cell: 4,
        noise_ratios: vec![0.0, 0.3],
        ablations: vec![Ablation::Full, Ablation::NoCora, Ablation::None],
        ..Default::default()
    };
    cfg.adaptation.iterations = 5;
    cfg.shape.dim = 16;
    cfg
}

fn csv_bytes(cfg: &BenchmarkConfig) -> Vec<u8> {
    let mut out = Vec::new();
    write_report_csv(&run_benchmark(cfg).unwrap(), &mut out).unwrap();
    out
}

#[test]
fn csv_is_byte_identical_across_runs() {
    let cfg = small_config();
    let a = csv_bytes(&cfg);
    assert_eq!(a, csv_bytes(&cfg));
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(lines.count(), 6);
    let other = BenchmarkConfig {
        master_seed: 8,
        ..small_config()
    };
    assert_ne!(text.into_bytes(), csv_bytes(&other));
}

#[test]
fn json_report_round_trips() {
    let report = run_benchmark(&small_config()).unwrap();
    let back = report_from_json(&report_to_json(&report).unwrap()).unwrap();
    assert_eq!(back, report);
    assert_eq!(report.episodes.len(), 2 * 3 * 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    emit_report(&report, ReportFormat::Json, &path).unwrap();
    assert_eq!(report_from_json(&std::fs::read_to_string(&path).unwrap()).unwrap(), report);
}

#[test]
fn baseline_column_ignores_ablations() {
    let report = run_benchmark(&small_config()).unwrap();
    for ratio in [0.0, 0.3] {
        let b: Vec<f64> = [Ablation::Full, Ablation::NoCora, Ablation::None]
            .iter()
            .map(|&a| report.cell(ratio, a).unwrap().baseline_mean)
            .collect();
        assert!(b.windows(2).all(|w| w[0] == w[1]));
        let none = report.cell(ratio, Ablation::None).unwrap();
        assert_eq!(none.deta_mean, none.baseline_mean);
    }
}

#[test]
fn confidence_interval_shrinks_with_root_n() {
    let run = |n: usize| {
        let cfg = BenchmarkConfig {
            episodes_per_cell: n,
            noise_ratios: vec![0.5],
            ablations: vec![Ablation::None],
            ..Default::default()
        };
        run_benchmark(&cfg).unwrap().cells[0].baseline_ci95
    };
    let ratio = run(100) / run(400);
    assert!((ratio - 2.0).abs() <= 0.4, "ci ratio {ratio}");
}

fn deta() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deta"))
}

#[test]
fn cli_bench_writes_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let status = deta()
            .args(["bench", "--episodes", "2", "--noise-ratios", "0.3", "--iterations", "3", "--dim", "12"])
            .args(["--ablation", "full,no-ma"])
            .arg("--out")
            .arg(&path)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(path).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
}

#[test]
fn cli_config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    for bad in [
        vec!["--noise-ratios", "1.5"],
        vec!["--ablation", "no-such-thing"],
        vec!["--noise-type", "weird"],
        vec!["--tau", "0"],
        vec!["--gamma", "1.0"],
    ] {
        let o = deta().arg("bench").args(&bad).arg("--out").arg(&out).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{bad:?}");
    }
}

#[test]
fn cli_adapt_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let ep_path = dir.path().join("ep.json");
    let noise = SyntheticNoiseConfig {
        label_noise_ratio: 0.3,
        ..Default::default()
    };
    let shape = EpisodeShape {
        dim: 12,
        k_regions: 4,
        ..Default::default()
    };
    let ep: TaskEpisode = generate_synthetic_episode(&shape, &noise, 1).unwrap();
    save_episode_file(&ep, &ep_path).unwrap();

    let state_path = dir.path().join("state.json");
    let o = deta()
        .args(["adapt", "--iterations", "4", "--jitter", "0.01", "--episode"])
        .arg(&ep_path)
        .arg("--out")
        .arg(&state_path)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let state = AdaptedState::from_json(&std::fs::read_to_string(&state_path).unwrap()).unwrap();
    assert_eq!(state.accumulator.iteration, 4);
    assert_eq!(state.loss_trace.len(), 4);

    let trace_path = dir.path().join("w.csv");
    let o = deta()
        .args(["weights", "--iterations", "3", "--episode"])
        .arg(&ep_path)
        .arg("--out")
        .arg(&trace_path)
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = std::fs::read_to_string(&trace_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "iteration,sample_id,region_slot,phi,psi,lambda,omega");
    assert_eq!(lines.count(), 3 * 50 * 2);

    // Asking for more regions than stored is a configuration error.
    let o = deta()
        .args(["weights", "--k-regions", "5", "--episode"])
        .arg(&ep_path)
        .arg("--out")
        .arg(&trace_path)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    let o = deta()
        .args(["adapt", "--episode"])
        .arg(dir.path().join("missing.json"))
        .arg("--out")
        .arg(&state_path)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cli_divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.csv");
    let o = deta()
        .args(["bench", "--episodes", "2", "--noise-ratios", "0.3", "--iterations", "5", "--dim", "12"])
        .args(["--lr", "1e300", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    // The report is still written, with the failures counted.
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 2);
}
