//! C interface to the splitsim planning library.
//!
//! Every function returns a [`SplitsimStatus`]. On failure the message is kept
//! per thread and can be read with [`splitsim_last_error`]. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use splitsim::device_profile::{kld, statistical_utility_of};
use splitsim::memory_reducer::{DeviceChain, Strategy};
use splitsim::model_graph::ModelGraph;
use splitsim::sim_engine::{report, run_simulation, ScenarioConfig, Summary};
use splitsim::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitsimStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Range = 3,
    Domain = 4,
    InfeasiblePlan = 5,
    NoFeasibleAssignment = 6,
    SizeGuard = 7,
    AllDropout = 8,
    Config = 9,
    Io = 10,
    Parse = 11,
    Panic = 12,
}

impl From<&Error> for SplitsimStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Range(_) => SplitsimStatus::Range,
            Error::Domain(_) => SplitsimStatus::Domain,
            Error::InfeasiblePlan { .. } => SplitsimStatus::InfeasiblePlan,
            Error::NoFeasibleAssignment(_) => SplitsimStatus::NoFeasibleAssignment,
            Error::SizeGuard(_) => SplitsimStatus::SizeGuard,
            Error::AllDropout { .. } => SplitsimStatus::AllDropout,
            Error::Config { .. } => SplitsimStatus::Config,
            Error::Io { .. } => SplitsimStatus::Io,
            Error::Parse { .. } => SplitsimStatus::Parse,
        }
    }
}

/// A model layer graph.
pub struct SplitsimModel(ModelGraph);

/// A scenario configuration, adjustable before it is run.
pub struct SplitsimScenario(ScenarioConfig);

/// Outcome of a recomputation plan.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplitsimPlan {
    /// Parameters, optimizer state and the plan's activation peak, in bytes.
    pub peak_memory_bytes: f64,
    pub extra_forward_flops: u64,
    pub num_segments: usize,
    pub num_memory_centric: usize,
}

/// Whole-run statistics of a simulated scenario.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplitsimSummary {
    pub seed: u64,
    pub rounds: usize,
    pub mean_t_system_s: f64,
    pub median_t_system_s: f64,
    pub p95_t_system_s: f64,
    pub total_time_s: f64,
    pub total_comm_bytes: u64,
    pub total_dropouts: usize,
    pub final_active_samples: u64,
    pub mean_peak_memory_bytes: f64,
    pub max_peak_memory_bytes: f64,
}

impl From<&Summary> for SplitsimSummary {
    fn from(s: &Summary) -> Self {
        SplitsimSummary {
            seed: s.seed,
            rounds: s.rounds,
            mean_t_system_s: s.mean_t_system_s,
            median_t_system_s: s.median_t_system_s,
            p95_t_system_s: s.p95_t_system_s,
            total_time_s: s.total_time_s,
            total_comm_bytes: s.total_comm_bytes,
            total_dropouts: s.total_dropouts,
            final_active_samples: s.final_active_samples,
            mean_peak_memory_bytes: s.mean_peak_memory_bytes,
            max_peak_memory_bytes: s.max_peak_memory_bytes,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(SplitsimStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(SplitsimStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SplitsimStatus::NullArgument, format!("`{what}` is null"))
}

/// Runs `f`, turning errors and panics into a status plus the thread's last
/// error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SplitsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            SplitsimStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&message);
            SplitsimStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(SplitsimStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Message of the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn splitsim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn splitsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a bundled profile (`"alexnet"`) or a profile file path.
///
/// # Safety
/// `reference` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn splitsim_model_load(reference: *const c_char, out: *mut *mut SplitsimModel) -> SplitsimStatus {
    guard(|| {
        let reference = str_arg(reference, "reference")?;
        let graph = match ModelGraph::builtin(reference) {
            Some(g) => g,
            None => ModelGraph::resolve(reference, Path::new("."))?,
        };
        write_out(out, Box::into_raw(Box::new(SplitsimModel(graph))), "out")
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`splitsim_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn splitsim_model_free(model: *mut SplitsimModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_ref<'a>(model: *const SplitsimModel) -> Result<&'a ModelGraph, Failure> {
    model.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn splitsim_model_num_layers(model: *const SplitsimModel, out: *mut usize) -> SplitsimStatus {
    guard(|| write_out(out, model_ref(model)?.num_layers(), "out"))
}

/// Bytes to train the whole model on one device at `batch`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn splitsim_model_training_memory(
    model: *const SplitsimModel,
    batch: u32,
    out: *mut f64,
) -> SplitsimStatus {
    guard(|| write_out(out, model_ref(model)?.training_memory(batch), "out"))
}

/// Bytes to run inference with the whole model at `batch`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn splitsim_model_inference_memory(
    model: *const SplitsimModel,
    batch: u32,
    out: *mut f64,
) -> SplitsimStatus {
    guard(|| write_out(out, model_ref(model)?.inference_memory(batch), "out"))
}

/// Training bytes of layers `1..=cut`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn splitsim_model_device_memory(
    model: *const SplitsimModel,
    cut: usize,
    batch: u32,
    out: *mut f64,
) -> SplitsimStatus {
    guard(|| write_out(out, model_ref(model)?.device_side_memory(cut, batch)?, "out"))
}

/// Cost-aware recomputation plan for layers `1..=cut` under `budget_bytes`.
/// `segment_size` 0 picks the default segmentation.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn splitsim_plan_memory(
    model: *const SplitsimModel,
    cut: usize,
    batch: u32,
    budget_bytes: f64,
    segment_size: usize,
    out: *mut SplitsimPlan,
) -> SplitsimStatus {
    guard(|| {
        let graph = model_ref(model)?;
        let chain = DeviceChain::new(graph, cut, batch, (segment_size > 0).then_some(segment_size))?;
        let plan = chain.plan(budget_bytes)?;
        let summary = SplitsimPlan {
            peak_memory_bytes: chain.param_state_bytes + plan.peak_memory_bytes as f64,
            extra_forward_flops: plan.extra_forward_flops,
            num_segments: plan.segments.len(),
            num_memory_centric: plan
                .segments
                .iter()
                .filter(|s| s.strategy == Strategy::MemoryCentric)
                .count(),
        };
        write_out(out, summary, "out")
    })
}

/// Kullback-Leibler divergence of two distributions of length `len`.
///
/// # Safety
/// `p` and `q` must point to `len` readable doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn splitsim_kld(p: *const f64, q: *const f64, len: usize, out: *mut f64) -> SplitsimStatus {
    guard(|| {
        let (p, q) = (slice_arg(p, len, "p")?, slice_arg(q, len, "q")?);
        write_out(out, kld(p, q)?, "out")
    })
}

/// Statistical utility of a set of per-sample losses.
///
/// # Safety
/// `losses` must point to `len` readable doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn splitsim_stat(losses: *const f64, len: usize, out: *mut f64) -> SplitsimStatus {
    guard(|| {
        let losses = slice_arg(losses, len, "losses")?;
        write_out(out, statistical_utility_of(losses.iter().copied())?, "out")
    })
}

/// Loads a scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn splitsim_scenario_load(path: *const c_char, out: *mut *mut SplitsimScenario) -> SplitsimStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let config = ScenarioConfig::load(Path::new(path))?;
        write_out(out, Box::into_raw(Box::new(SplitsimScenario(config))), "out")
    })
}

/// Applies one `dotted.key=value` override.
///
/// # Safety
/// `scenario` must be a live handle and `assignment` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn splitsim_scenario_set(scenario: *mut SplitsimScenario, assignment: *const c_char) -> SplitsimStatus {
    guard(|| {
        let scenario = scenario.as_mut().ok_or_else(|| null("scenario"))?;
        let assignment = str_arg(assignment, "assignment")?;
        scenario.0.apply_override(assignment)?;
        Ok(())
    })
}

/// Simulates the scenario. With a non-null `out_dir` the round reports are
/// also written there.
///
/// # Safety
/// `scenario` must be a live handle, `out_dir` null or a NUL-terminated
/// string, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn splitsim_scenario_run(
    scenario: *const SplitsimScenario,
    out_dir: *const c_char,
    out: *mut SplitsimSummary,
) -> SplitsimStatus {
    guard(|| {
        let config = scenario.as_ref().ok_or_else(|| null("scenario"))?.0.clone();
        let dir = if out_dir.is_null() {
            None
        } else {
            Some(str_arg(out_dir, "out_dir")?)
        };
        config.validate()?;
        let output = run_simulation(config)?;
        if let Some(dir) = dir {
            report::write_run(Path::new(dir), &output.rounds, &output.summary)?;
        }
        write_out(out, SplitsimSummary::from(&output.summary), "out")
    })
}

/// Releases a scenario. Null is ignored.
///
/// # Safety
/// `scenario` must come from [`splitsim_scenario_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn splitsim_scenario_free(scenario: *mut SplitsimScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}
