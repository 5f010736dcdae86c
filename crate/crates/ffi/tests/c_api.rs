use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use splitsim::memory_reducer::DeviceChain;
use splitsim::model_graph::ModelGraph;
use splitsim_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(splitsim_last_error()) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn load_model(name: &str) -> *mut SplitsimModel {
    let mut model = ptr::null_mut();
    let status = unsafe { splitsim_model_load(cstr(name).as_ptr(), &mut model) };
    assert_eq!(status, SplitsimStatus::Ok, "{}", last_error());
    assert!(!model.is_null());
    model
}

#[test]
fn model_queries_match_the_library() {
    let model = load_model("alexnet");
    let graph = ModelGraph::builtin("alexnet").unwrap();
    let mut layers = 0usize;
    let mut train = 0.0;
    let mut infer = 0.0;
    let mut device = 0.0;
    unsafe {
        assert_eq!(splitsim_model_num_layers(model, &mut layers), SplitsimStatus::Ok);
        assert_eq!(splitsim_model_training_memory(model, 4, &mut train), SplitsimStatus::Ok);
        assert_eq!(splitsim_model_inference_memory(model, 4, &mut infer), SplitsimStatus::Ok);
        assert_eq!(splitsim_model_device_memory(model, 3, 4, &mut device), SplitsimStatus::Ok);
    }
    assert_eq!(layers, graph.num_layers());
    assert_eq!(train, graph.training_memory(4));
    assert_eq!(infer, graph.inference_memory(4));
    assert_eq!(device, graph.device_side_memory(3, 4).unwrap());
    assert!(last_error().is_empty());
    unsafe { splitsim_model_free(model) };
}

#[test]
fn model_loads_from_a_file() {
    let path = fixture("toy8.toml");
    let model = load_model(path.to_str().unwrap());
    let mut layers = 0usize;
    assert_eq!(unsafe { splitsim_model_num_layers(model, &mut layers) }, SplitsimStatus::Ok);
    assert_eq!(layers, 8);
    unsafe { splitsim_model_free(model) };
}

#[test]
fn missing_model_reports_io_and_the_path() {
    let mut model = ptr::null_mut();
    let status = unsafe { splitsim_model_load(cstr("/nonexistent/net.toml").as_ptr(), &mut model) };
    assert_eq!(status, SplitsimStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("/nonexistent/net.toml"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut out = 0.0;
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(splitsim_model_load(ptr::null(), &mut model), SplitsimStatus::NullArgument);
        assert!(last_error().contains("reference"));
        assert_eq!(
            splitsim_model_training_memory(ptr::null(), 1, &mut out),
            SplitsimStatus::NullArgument
        );
        let m = load_model("lenet5");
        assert_eq!(splitsim_model_training_memory(m, 1, ptr::null_mut()), SplitsimStatus::NullArgument);
        splitsim_model_free(m);
        splitsim_model_free(ptr::null_mut());
        splitsim_scenario_free(ptr::null_mut());
        assert_eq!(
            splitsim_scenario_set(ptr::null_mut(), cstr("seed=1").as_ptr()),
            SplitsimStatus::NullArgument
        );
    }
}

#[test]
fn invalid_utf8_is_reported() {
    let bytes = CString::new(vec![0xff, 0xfe]).unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { splitsim_model_load(bytes.as_ptr(), &mut model) };
    assert_eq!(status, SplitsimStatus::InvalidUtf8);
}

#[test]
fn cut_out_of_range_is_a_range_error() {
    let model = load_model("lenet5");
    let mut out = 0.0;
    let status = unsafe { splitsim_model_device_memory(model, 999, 1, &mut out) };
    assert_eq!(status, SplitsimStatus::Range);
    assert!(!last_error().is_empty());
    unsafe { splitsim_model_free(model) };
}

#[test]
fn plan_memory_follows_the_budget() {
    let model = load_model("alexnet");
    let graph = ModelGraph::builtin("alexnet").unwrap();
    let chain = DeviceChain::new(&graph, 6, 4, None).unwrap();
    let floor = chain.min_feasible_memory();

    let mut roomy = SplitsimPlan::default();
    let mut tight = SplitsimPlan::default();
    unsafe {
        assert_eq!(splitsim_plan_memory(model, 6, 4, 1e15, 0, &mut roomy), SplitsimStatus::Ok);
        assert_eq!(splitsim_plan_memory(model, 6, 4, floor, 0, &mut tight), SplitsimStatus::Ok);
    }
    assert_eq!(roomy.num_memory_centric, 0);
    assert_eq!(tight.num_memory_centric, tight.num_segments);
    assert!(tight.peak_memory_bytes <= floor);
    assert!(tight.extra_forward_flops >= roomy.extra_forward_flops);

    let mut plan = SplitsimPlan::default();
    let status = unsafe { splitsim_plan_memory(model, 6, 4, floor - 1.0, 0, &mut plan) };
    assert_eq!(status, SplitsimStatus::InfeasiblePlan);
    assert!(last_error().contains("layer"));
    unsafe { splitsim_model_free(model) };
}

#[test]
fn kld_and_stat() {
    let p = [0.5, 0.5];
    let q = [0.25, 0.75];
    let mut out = f64::NAN;
    assert_eq!(unsafe { splitsim_kld(p.as_ptr(), q.as_ptr(), 2, &mut out) }, SplitsimStatus::Ok);
    let expect = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    assert!((out - expect).abs() < 1e-12);

    let bad = [0.5, 0.2];
    assert_eq!(unsafe { splitsim_kld(bad.as_ptr(), q.as_ptr(), 2, &mut out) }, SplitsimStatus::Domain);
    assert_eq!(unsafe { splitsim_kld(ptr::null(), q.as_ptr(), 2, &mut out) }, SplitsimStatus::NullArgument);

    let losses = [1.0, 2.0, 3.0];
    assert_eq!(unsafe { splitsim_stat(losses.as_ptr(), 3, &mut out) }, SplitsimStatus::Ok);
    let lib = splitsim::device_profile::statistical_utility_of(losses).unwrap();
    assert_eq!(out, lib);
}

#[test]
fn scenario_runs_and_overrides_apply() {
    let path = cstr(fixture("toy_scenario.toml").to_str().unwrap());
    let mut scenario = ptr::null_mut();
    unsafe {
        assert_eq!(splitsim_scenario_load(path.as_ptr(), &mut scenario), SplitsimStatus::Ok);
        assert_eq!(splitsim_scenario_set(scenario, cstr("rounds=2").as_ptr()), SplitsimStatus::Ok);
        assert_eq!(splitsim_scenario_set(scenario, cstr("no.such.key=1").as_ptr()), SplitsimStatus::Config);
        assert!(last_error().contains("no.such.key"));
        assert_eq!(splitsim_scenario_set(scenario, cstr("policy.k=0").as_ptr()), SplitsimStatus::Ok);
        let mut summary = SplitsimSummary::default();
        assert_eq!(splitsim_scenario_run(scenario, ptr::null(), &mut summary), SplitsimStatus::Config);
        assert_eq!(splitsim_scenario_set(scenario, cstr("policy.k=3").as_ptr()), SplitsimStatus::Ok);

        let dir = std::env::temp_dir().join(format!("splitsim-ffi-{}", std::process::id()));
        let dir_c = cstr(dir.to_str().unwrap());
        let mut first = SplitsimSummary::default();
        let mut second = SplitsimSummary::default();
        assert_eq!(splitsim_scenario_run(scenario, dir_c.as_ptr(), &mut first), SplitsimStatus::Ok, "{}", last_error());
        assert_eq!(splitsim_scenario_run(scenario, ptr::null(), &mut second), SplitsimStatus::Ok);
        assert_eq!(first, second);
        assert_eq!(first.rounds, 2);
        assert_eq!(first.seed, 3);
        assert!(first.total_comm_bytes > 0);
        assert!(first.median_t_system_s > 0.0);
        assert!(std::fs::read_dir(&dir).unwrap().next().is_some());
        let _ = std::fs::remove_dir_all(&dir);
        splitsim_scenario_free(scenario);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(splitsim_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
