use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use splitsim::cli::AggregateRow;
use splitsim::memory_reducer::DeviceChain;
use splitsim::model_graph::ModelGraph;
use splitsim::sim_engine::report::read_round_rows;
use splitsim::sim_engine::{FleetSpec, Summary};

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn toy() -> String {
    manifest().join("tests/fixtures/toy_scenario.toml").display().to_string()
}

fn golden() -> String {
    manifest().join("scenarios/golden.toml").display().to_string()
}

fn splitsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitsim"))
        .args(args)
        .env("SPLITSIM_LOG", "error")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_into(dir: &Path, scenario: &str, extra: &[&str]) -> Output {
    let dir = dir.display().to_string();
    let mut args = vec!["run", "--scenario", scenario, "--out", &dir];
    args.extend_from_slice(extra);
    splitsim(&args)
}

fn csv_data_lines(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn golden_run_writes_reports_matching_the_frozen_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_into(tmp.path(), &golden(), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["rounds.csv", "round_devices.csv", "summary.toml"] {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }
    let got: Summary = toml::from_str(&std::fs::read_to_string(tmp.path().join("summary.toml")).unwrap()).unwrap();
    let frozen_path = manifest().join("tests/fixtures/golden_smartsplit_seed1.toml");
    let want: Summary = toml::from_str(&std::fs::read_to_string(frozen_path).unwrap()).unwrap();
    assert_eq!(got, want);
}

#[test]
fn missing_scenario_is_a_config_error_naming_the_path() {
    let out = splitsim(&["run", "--scenario", "/nonexistent/scenario.toml"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/nonexistent/scenario.toml"), "{}", stderr(&out));
}

#[test]
fn bad_overrides_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_into(tmp.path(), &toy(), &["--set", "policy.k=0"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("policy.k"), "{}", stderr(&out));
    let out = run_into(tmp.path(), &toy(), &["--set", "policy.no_such_key=1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("policy.no_such_key"), "{}", stderr(&out));
    let out = run_into(tmp.path(), &toy(), &["--set", "policy=nonsense"]);
    assert_eq!(code(&out), 2);
    // nothing half-written on a config error
    assert!(!tmp.path().join("rounds.csv").exists());
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(code(&splitsim(&["frobnicate"])), 2);
}

#[test]
fn policy_override_touches_only_policy_dependent_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert_eq!(code(&run_into(&a, &toy(), &[])), 0);
    assert_eq!(code(&run_into(&b, &toy(), &["--set", "policy=splitfl_static"])), 0);
    let (ra, rb) = (read_round_rows(&a.join("rounds.csv")).unwrap(), read_round_rows(&b.join("rounds.csv")).unwrap());
    assert_eq!(ra.len(), rb.len());
    assert!(ra.iter().zip(&rb).all(|(x, y)| x.round == y.round));
    assert!(ra.iter().all(|r| r.policy == "smartsplit"));
    assert!(rb.iter().all(|r| r.policy == "splitfl_static"));
    assert_ne!(ra, rb);

    // the static baseline has no edge scheduler, so its knobs leave the output untouched
    let out = run_into(&c, &toy(), &["--set", "policy=splitfl_static", "--set", "policy.epsilon=0.9", "--set", "policy.sigma_prune=0.1"]);
    assert_eq!(code(&out), 0);
    for f in ["rounds.csv", "round_devices.csv"] {
        assert_eq!(std::fs::read(b.join(f)).unwrap(), std::fs::read(c.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn every_device_dropping_out_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(toy()).unwrap();
    let starved = text
        .lines()
        .map(|l| if l.starts_with("memory_budget_bytes") { "memory_budget_bytes = 1e3" } else { l })
        .collect::<Vec<_>>()
        .join("\n");
    let path = manifest().join("tests/fixtures/toy8.toml");
    let starved = starved.replace("\"toy8.toml\"", &format!("{:?}", path.display().to_string()));
    let scenario = tmp.path().join("starved.toml");
    std::fs::write(&scenario, starved).unwrap();
    let out = run_into(&tmp.path().join("out"), &scenario.display().to_string(), &["--set", "policy=fedavg"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn plan_memory_boundaries() {
    let table = |budget: f64| {
        splitsim(&["plan-memory", "--model", "builtin:alexnet", "--cut", "6", "--batch", "4", "--budget", &budget.to_string()])
    };
    let strategies = |o: &Output| -> Vec<String> {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .skip(1)
            .filter(|l| !l.starts_with("total"))
            .map(|l| l.split(',').nth(2).unwrap().to_string())
            .collect()
    };
    let roomy = table(1e15);
    assert_eq!(code(&roomy), 0);
    let rows = strategies(&roomy);
    assert!(!rows.is_empty() && rows.iter().all(|s| s == "speed"), "{rows:?}");

    let graph = ModelGraph::builtin("alexnet").unwrap();
    let floor = DeviceChain::new(&graph, 6, 4, None).unwrap().min_feasible_memory();
    let tight = table(floor);
    assert_eq!(code(&tight), 0, "{}", stderr(&tight));
    let rows = strategies(&tight);
    assert!(rows.iter().all(|s| s == "memory"), "{rows:?}");

    let below = table(floor - 1.0);
    assert_eq!(code(&below), 4);
    assert!(stderr(&below).contains("layer"), "{}", stderr(&below));
}

fn quantile_oracle(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[test]
fn sweep_cells_aggregate_and_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("sweep");
    let out = out_dir.display().to_string();
    let args = ["sweep", "--scenario", &toy(), "--policies", "smartsplit,r_smd", "--seeds", "4,5", "--jobs", "2", "--out", &out];
    let first = splitsim(&args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));

    let mut agg: Vec<AggregateRow> = csv::Reader::from_path(out_dir.join("aggregate.csv"))
        .unwrap()
        .deserialize()
        .map(Result::unwrap)
        .collect();
    assert_eq!(agg.len(), 4);
    let cells: Vec<&str> = agg.iter().map(|r| r.cell.as_str()).collect();
    assert_eq!(cells, ["smartsplit_seed4", "smartsplit_seed5", "r_smd_seed4", "r_smd_seed5"]);
    let mut snapshot = Vec::new();
    for row in &agg {
        let dir = out_dir.join(&row.cell);
        let lines = csv_data_lines(&dir.join("rounds.csv"));
        assert_eq!(lines.len(), 3);
        let t: Vec<f64> = lines.iter().map(|l| l[3].parse().unwrap()).collect();
        assert_eq!(row.median_t_system_s, quantile_oracle(t.clone(), 0.5));
        assert_eq!(row.mean_t_system_s, t.iter().sum::<f64>() / t.len() as f64);
        assert_eq!(row.status, "ok");
        snapshot.push(std::fs::read(dir.join("rounds.csv")).unwrap());
    }

    // same cell names, same bytes on a rerun
    assert_eq!(code(&splitsim(&args)), 0);
    for (row, before) in agg.iter().zip(&snapshot) {
        assert_eq!(&std::fs::read(out_dir.join(&row.cell).join("rounds.csv")).unwrap(), before);
    }

    let dirs: Vec<String> = agg.iter().map(|r| out_dir.join(&r.cell).display().to_string()).collect();
    let mut report_args = vec!["report"];
    report_args.extend(dirs.iter().map(String::as_str));
    let rep = splitsim(&report_args);
    assert_eq!(code(&rep), 0, "{}", stderr(&rep));
    let mut reported: Vec<AggregateRow> = csv::Reader::from_reader(rep.stdout.as_slice())
        .deserialize()
        .map(Result::unwrap)
        .collect();
    let key = |r: &AggregateRow| r.cell.clone();
    agg.sort_by_key(key);
    reported.sort_by_key(key);
    assert_eq!(agg, reported);
}

#[test]
fn report_rejects_foreign_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("rounds.csv");
    std::fs::write(&path, "x,y\n1,2\n").unwrap();
    let out = splitsim(&["report", &path.display().to_string()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn fleet_gen_writes_a_loadable_fleet() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("fleet.toml");
    let out = splitsim(&["fleet-gen", "--scenario", &toy(), "--out", &path.display().to_string()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let spec = FleetSpec::load(&path).unwrap();
    assert_eq!(spec.num_devices(), 6);
    assert!(spec.devices.iter().all(|d| d.class_histogram.is_some()));
}

#[test]
fn trace_mec_writes_one_line_per_round() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_into(tmp.path(), &toy(), &["--trace-mec"]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(tmp.path().join("mec_trace.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["round"], 1);
    assert_eq!(lines[2]["round"], 3);
}

#[test]
fn select_prints_assignment_and_exhaustive_is_no_worse() {
    let objective = |o: &Output| -> f64 {
        let text = String::from_utf8_lossy(&o.stdout).into_owned();
        let line = text.lines().find(|l| l.starts_with("objective,")).unwrap().to_string();
        line["objective,".len()..].parse().unwrap()
    };
    let bo = splitsim(&["select", "--scenario", &toy()]);
    let exact = splitsim(&["select", "--scenario", &toy(), "--exhaustive"]);
    assert_eq!((code(&bo), code(&exact)), (0, 0));
    assert!(objective(&exact) <= objective(&bo));
    let rows = String::from_utf8_lossy(&exact.stdout).lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).count();
    assert_eq!(rows, 3);
}
