//! End-to-end tests of the moesim binary: exit codes, reproducibility, and
//! the sweep's expected monotonicities.

use std::path::Path;
use std::process::{Command, Output};

fn moesim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moesim"))
        .args(args)
        .current_dir(dir)
        .env_remove("MOESIM_OUT_DIR")
        .output()
        .unwrap()
}

const HARDWARE: &str = r#"
[hardware]
link_bandwidth = 12.5e9
link_latency = 1e-4
attention_time_prefill = 4e-3
attention_time_decode = 1.5e-3
expert_compute_prefill = { high = 2e-3, low = 1.5e-3 }
expert_compute_decode = { high = 2e-4, low = 1.5e-4 }
vram_budget = 3221225472
resident_reservation = 1073741824
"#;

const SYNTH: &str = r#"
[trace.synthesize]
num_layers = 8
num_experts = 8
routing_topk = 2
high_bytes = 104857600
low_bytes = 50331648
num_prompt_tokens = 32
num_decode_steps = 8
skew_alpha = 1.2
heavy_hitter_fraction = 0.2
predictor_fidelity = 0.8
rng_seed = 7
"#;

#[test]
fn gen_trace_is_reproducible_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "gen-trace", "--layers", "4", "--experts", "4", "--topk", "2", "--tokens", "12",
        "--decode-steps", "3", "--seed", "7", "--out", "a.jsonl",
    ];
    let out = moesim(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut args_b = args;
    args_b[args.len() - 1] = "b.jsonl";
    assert!(moesim(&args_b, dir.path()).status.success());

    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b.jsonl")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical trace files");

    let trace = moesim::traces::load_trace(&dir.path().join("a.jsonl")).unwrap();
    assert_eq!(trace.model.num_layers, 4);
    assert_eq!(trace.num_prompt_tokens(), 12);
}

#[test]
fn gen_trace_rejects_bad_fidelity_with_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = moesim(
        &["gen-trace", "--fidelity", "1.5", "--out", "x.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("predictor_fidelity"), "{stderr}");
    assert!(!dir.path().join("x.jsonl").exists());
}

#[test]
fn run_missing_trace_file_exits_two_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!("[trace]\npath = \"nowhere/missing.jsonl\"\n{HARDWARE}\n[[simulation]]\npolicy = \"cache\"\n");
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    let out = moesim(&["run", "--config", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing.jsonl"), "{stderr}");
}

#[test]
fn run_config_parse_error_exits_one_citing_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[trace\n").unwrap();
    let out = moesim(&["run", "--config", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 1"), "{stderr}");
}

#[test]
fn run_ladder_reports_monotone_tpot_and_unit_speedup_for_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let ladder = r#"
[[simulation]]
policy = "load_on_demand"
[[simulation]]
policy = "cache"
[[simulation]]
policy = "cache_prefetch"
[[simulation]]
policy = "cache_dyquant_4_2"
[[simulation]]
policy = "cache_dyquant_prefetch_4_2"
[[simulation]]
policy = "cache_dyquant_prefetch_4_0"
"#;
    let config = format!("{SYNTH}{HARDWARE}{ladder}[output]\nformat = \"json\"\n");
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    let out = moesim(&["run", "--config", "run.toml", "--out-dir", "out"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap())
            .unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    let tpots: Vec<f64> = rows.iter().map(|r| r["tpot"].as_f64().unwrap()).collect();
    for pair in tpots.windows(2) {
        assert!(pair[1] <= pair[0], "ladder TPOT not monotone: {tpots:?}");
    }
    assert_eq!(rows[0]["speedup_tpot"].as_f64().unwrap(), 1.0);

    // Single-row run: speedup column is exactly 1.
    let single = format!("{SYNTH}{HARDWARE}\n[[simulation]]\npolicy = \"cache\"\n");
    std::fs::write(dir.path().join("single.toml"), single).unwrap();
    let out = moesim(&["run", "--config", "single.toml", "--out-dir", "single"], dir.path());
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("single/report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["rows"][0]["speedup_ttft"].as_f64().unwrap(), 1.0);
    assert_eq!(report["rows"][0]["speedup_tpot"].as_f64().unwrap(), 1.0);
}

#[test]
fn sweep_lambda_grid_mass_nondecreasing_and_capacity_grid_hits_nondecreasing() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!(
        "{SYNTH}{HARDWARE}\n[[simulation]]\npolicy = \"cache_dyquant_prefetch_4_0\"\n\n\
         [sweep]\nlambda = [0.0, 0.5, 1.0]\ncapacity_bytes = [524288000, 2147483648, 4294967296]\n\
         \n[output]\nformat = \"both\"\n"
    );
    std::fs::write(dir.path().join("sweep.toml"), config).unwrap();
    let out = moesim(&["sweep", "--config", "sweep.toml", "--out-dir", "out"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/sweep.json")).unwrap())
            .unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 9);

    // Retained gate mass is non-decreasing along the lambda axis at fixed
    // capacity, and exactly 1 at lambda=1.
    for capacity_idx in 0..3 {
        let mut last = -1.0;
        for lambda_idx in 0..3 {
            let row = &rows[lambda_idx * 3 + capacity_idx];
            let mass = row["retained_gate_mass"].as_f64().unwrap();
            assert!(mass >= last, "mass not monotone in lambda");
            last = mass;
        }
        assert_eq!(last, 1.0);
    }

    // Cache hit rate is non-decreasing along the capacity axis at fixed
    // lambda (LRU with more room never hits less on this trace).
    for lambda_idx in 0..3 {
        let mut last = -1.0;
        for capacity_idx in 0..3 {
            let row = &rows[lambda_idx * 3 + capacity_idx];
            assert_eq!(
                row["capacity_bytes"].as_u64().unwrap(),
                [524288000u64, 2147483648, 4294967296][capacity_idx]
            );
            let hits = row["cache_hit_rate"].as_f64().unwrap();
            assert!(hits >= last, "hit rate not monotone in capacity");
            last = hits;
        }
    }

    // Re-running the sweep reproduces the files byte for byte.
    let out2 = moesim(&["sweep", "--config", "sweep.toml", "--out-dir", "out2"], dir.path());
    assert!(out2.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("out/sweep.json")).unwrap(),
        std::fs::read(dir.path().join("out2/sweep.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(dir.path().join("out/sweep.csv")).unwrap(),
        std::fs::read(dir.path().join("out2/sweep.csv")).unwrap()
    );
}

#[test]
fn sweep_with_empty_grid_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!(
        "{SYNTH}{HARDWARE}\n[[simulation]]\npolicy = \"cache\"\n\n[sweep]\nlambda = []\n"
    );
    std::fs::write(dir.path().join("sweep.toml"), config).unwrap();
    let out = moesim(&["sweep", "--config", "sweep.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
}

#[test]
fn dump_timeline_writes_header_and_events() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!("{SYNTH}{HARDWARE}\n[[simulation]]\npolicy = \"cache_prefetch\"\n");
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    let out = moesim(
        &["dump-timeline", "--config", "run.toml", "--row", "0", "--out", "tl.jsonl"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let content = std::fs::read_to_string(dir.path().join("tl.jsonl")).unwrap();
    let mut lines = content.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["kind"], "timeline_header");
    assert_eq!(header["label"], "cache_prefetch");
    let first: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(first["kind"], "attention_compute");
    assert!(content.lines().count() > 100);

    // Out-of-range row index is a validation error.
    let out = moesim(
        &["dump-timeline", "--config", "run.toml", "--row", "5", "--out", "x.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn out_dir_env_variable_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!("{SYNTH}{HARDWARE}\n[[simulation]]\npolicy = \"cache\"\n");
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_moesim"))
        .args(["run", "--config", "run.toml"])
        .current_dir(dir.path())
        .env("MOESIM_OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from_env/report.json").exists());
}
