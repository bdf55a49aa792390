//! C ABI over `vitopt`.
//!
//! Every function returns a [`VitoptStatus`]. On failure a description is
//! available from [`vitopt_last_error_message`] on the same thread. Objects
//! are opaque handles created by `*_init`/`*_load`/`*_synthetic`/... and
//! released with the matching `*_free`. Results are written through out
//! pointers; output handles are only written on success. No function
//! unwinds across the boundary: panics are caught and reported as
//! [`VitoptStatus::Panic`].
//!
//! Handles are not synchronized. A handle may be read from several threads
//! at once, but freeing it while another call uses it is undefined.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use vitopt::checkpoint::{load_checkpoint, save_checkpoint};
use vitopt::data::{load_cifar10, synthetic_dataset, Dataset};
use vitopt::harness::{emit_report, ReportFormat};
use vitopt::model::{ModelConfig, VitModel};
use vitopt::pattern::LayerPattern;
use vitopt::pipeline::{run_pipeline, PipelineConfig};
use vitopt::precision::{to_fp16, PrecisionPolicy};
use vitopt::profiler::{profile, ActivationStats, CalibrationSet};
use vitopt::pruner::{estimate_peak, prune_step, prune_to_budget, PruneOptions, DEFAULT_MIN_CHANNELS};
use vitopt::quantizer::{quantize_model, ActivationScaling};
use vitopt::tensor::Tensor;
use vitopt::Error;

/// Result codes. Values 1 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VitoptStatus {
    Ok = 0,
    /// Invalid configuration, unknown layer, or an operation not allowed in
    /// the model's precision state.
    ConfigError = 1,
    /// Malformed input data, checkpoint or tensor shape, or an I/O failure.
    DataError = 2,
    BudgetInfeasible = 3,
    InternalError = 4,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct VitoptModel {
    inner: VitModel,
}

/// Opaque dataset handle.
pub struct VitoptDataset {
    inner: Dataset,
}

/// Opaque handle holding activation statistics and the calibration samples
/// they were gathered from.
pub struct VitoptStats {
    stats: ActivationStats,
    calib: CalibrationSet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(VitoptStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            1 => VitoptStatus::ConfigError,
            2 => VitoptStatus::DataError,
            3 => VitoptStatus::BudgetInfeasible,
            _ => VitoptStatus::InternalError,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(VitoptStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VitoptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            VitoptStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| payload.downcast_ref::<&str>().copied())
                .unwrap_or("unknown panic");
            set_last_error(&format!("panic: {msg}"));
            VitoptStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    out.write(value);
    Ok(())
}

/// Moves `value` into a new handle written to `out`.
unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    write_out(out, Box::into_raw(Box::new(value)), "out")
}

/// Message for the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn vitopt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vitopt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a randomly initialized model from a preset name ("vit-toy" or
/// "vit-huge").
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_model_init(preset: *const c_char, seed: u64, out: *mut *mut VitoptModel) -> VitoptStatus {
    guard(|| {
        let config = ModelConfig::preset(str_arg(preset, "preset")?)?;
        let m = VitModel::init(config, seed)?;
        put(out, VitoptModel { inner: m })
    })
}

/// Loads an EFLX checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_model_load(path: *const c_char, out: *mut *mut VitoptModel) -> VitoptStatus {
    guard(|| {
        let m = load_checkpoint(&PathBuf::from(str_arg(path, "path")?))?;
        put(out, VitoptModel { inner: m })
    })
}

/// Writes `model` as an EFLX checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vitopt_model_save(model: *const VitoptModel, path: *const c_char) -> VitoptStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        save_checkpoint(&m.inner, &PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vitopt_model_free(model: *mut VitoptModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of stored parameters.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_model_param_count(model: *const VitoptModel, out: *mut u64) -> VitoptStatus {
    guard(|| write_out(out, ref_arg(model, "model")?.inner.count_params(), "out"))
}

/// Bytes of all parameter tensors at their current dtypes.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_model_weight_bytes(model: *const VitoptModel, out: *mut u64) -> VitoptStatus {
    guard(|| write_out(out, ref_arg(model, "model")?.inner.weight_bytes(), "out"))
}

/// Analytic peak memory estimate (weights plus live activations) at `batch`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_model_peak_bytes(model: *const VitoptModel, batch: usize, out: *mut u64) -> VitoptStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        write_out(out, estimate_peak(&m.inner, batch).peak_estimate(), "out")
    })
}

/// Number of output classes.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_model_num_classes(model: *const VitoptModel, out: *mut usize) -> VitoptStatus {
    guard(|| write_out(out, ref_arg(model, "model")?.inner.config.num_classes, "out"))
}

/// Runs a forward pass over `batch` images laid out as `[batch, channels,
/// size, size]` and writes `batch * num_classes` logits.
///
/// # Safety
/// `images` must point to `images_len` floats and `logits` to `logits_len`
/// writable floats.
#[no_mangle]
pub unsafe extern "C" fn vitopt_model_forward(
    model: *const VitoptModel,
    images: *const f32,
    images_len: usize,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> VitoptStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.inner;
        if images.is_null() || logits.is_null() {
            return Err(invalid("images or logits is null"));
        }
        let c = &m.config;
        let per = c.num_channels * c.image_size * c.image_size;
        if batch == 0 || images_len != batch * per {
            return Err(invalid(format!("expected {batch} x {per} image values, got {images_len}")));
        }
        if logits_len != batch * c.num_classes {
            return Err(invalid(format!("logits buffer holds {logits_len}, need {}", batch * c.num_classes)));
        }
        let pixels = std::slice::from_raw_parts(images, images_len).to_vec();
        let t = Tensor::from_f32(vec![batch, c.num_channels, c.image_size, c.image_size], pixels)?;
        let y = m.forward(&t, None)?;
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(y.as_f32()?);
        Ok(())
    })
}

/// Deterministic synthetic CIFAR-shaped dataset.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_dataset_synthetic(n: usize, seed: u64, out: *mut *mut VitoptDataset) -> VitoptStatus {
    guard(|| {
        let d = synthetic_dataset(n, seed)?;
        put(out, VitoptDataset { inner: d })
    })
}

/// Loads the CIFAR-10 binary test batch from a directory or file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_dataset_load_cifar10(path: *const c_char, out: *mut *mut VitoptDataset) -> VitoptStatus {
    guard(|| {
        let d = load_cifar10(&PathBuf::from(str_arg(path, "path")?))?;
        put(out, VitoptDataset { inner: d })
    })
}

/// Number of samples.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_dataset_len(dataset: *const VitoptDataset, out: *mut usize) -> VitoptStatus {
    guard(|| write_out(out, ref_arg(dataset, "dataset")?.inner.len(), "out"))
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vitopt_dataset_free(dataset: *mut VitoptDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Draws `calib_samples` samples from `dataset` and profiles every linear of
/// `model` on them.
///
/// # Safety
/// `model` and `dataset` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_profile(
    model: *const VitoptModel,
    dataset: *const VitoptDataset,
    calib_samples: usize,
    seed: u64,
    out: *mut *mut VitoptStats,
) -> VitoptStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.inner;
        let d = &ref_arg(dataset, "dataset")?.inner;
        let calib = CalibrationSet::sample_from(d, calib_samples, seed)?;
        let stats = profile(m, &calib, &[LayerPattern::new("**")])?;
        put(out, VitoptStats { stats, calib })
    })
}

/// Statistics as a JSON string; free it with [`vitopt_string_free`].
///
/// # Safety
/// `stats` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_stats_to_json(stats: *const VitoptStats, out: *mut *mut c_char) -> VitoptStatus {
    guard(|| {
        let s = ref_arg(stats, "stats")?;
        let json = CString::new(s.stats.to_json()).map_err(|e| Failure(VitoptStatus::InternalError, e.to_string()))?;
        write_out(out, json.into_raw(), "out")
    })
}

/// Releases a statistics handle. Null is ignored.
///
/// # Safety
/// `stats` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vitopt_stats_free(stats: *mut VitoptStats) {
    if !stats.is_null() {
        drop(Box::from_raw(stats));
    }
}

/// One pruning step removing `floor(percentile * C)` channels per MLP.
///
/// # Safety
/// `model` and `stats` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_prune_step(
    model: *const VitoptModel,
    stats: *const VitoptStats,
    percentile: f64,
    out: *mut *mut VitoptModel,
) -> VitoptStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.inner;
        let s = ref_arg(stats, "stats")?;
        let (pruned, _) = prune_step(m, &s.stats, percentile, DEFAULT_MIN_CHANNELS)?;
        put(out, VitoptModel { inner: pruned })
    })
}

/// Prunes until the analytic peak at `batch` is at most `budget_bytes`.
/// `steps_out` may be null.
///
/// # Safety
/// `model` and `stats` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_prune_to_budget(
    model: *const VitoptModel,
    stats: *const VitoptStats,
    budget_bytes: u64,
    percentile: f64,
    batch: usize,
    out: *mut *mut VitoptModel,
    steps_out: *mut usize,
) -> VitoptStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.inner;
        let s = ref_arg(stats, "stats")?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let opts = PruneOptions {
            percentile,
            min_channels: DEFAULT_MIN_CHANNELS,
            batch,
        };
        let outcome = prune_to_budget(m, &s.stats, budget_bytes, opts, None)?;
        if !steps_out.is_null() {
            steps_out.write(outcome.steps());
        }
        put(out, VitoptModel { inner: outcome.model })
    })
}

/// Converts every linear to FP16.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_to_fp16(model: *const VitoptModel, out: *mut *mut VitoptModel) -> VitoptStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.inner;
        let h = to_fp16(m, &PrecisionPolicy::default())?;
        put(out, VitoptModel { inner: h })
    })
}

/// Quantizes every linear to INT8 with static activation scaling. `stats`
/// must have been gathered from this same model.
///
/// # Safety
/// `model` and `stats` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_quantize(
    model: *const VitoptModel,
    stats: *const VitoptStats,
    out: *mut *mut VitoptModel,
) -> VitoptStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.inner;
        let s = ref_arg(stats, "stats")?;
        let all = [LayerPattern::new("**")];
        let (q, _) = quantize_model(m, &s.stats, &s.calib, &all, ActivationScaling::Static)?;
        put(out, VitoptModel { inner: q })
    })
}

/// Runs the full pipeline from a TOML config, writes artifacts into
/// `out_dir`, and returns the report JSON; free it with [`vitopt_string_free`].
///
/// # Safety
/// `config_toml` and `out_dir` must be NUL-terminated strings; `report_json`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitopt_pipeline_run(
    config_toml: *const c_char,
    out_dir: *const c_char,
    report_json: *mut *mut c_char,
) -> VitoptStatus {
    guard(|| {
        let config = PipelineConfig::from_toml(str_arg(config_toml, "config_toml")?)?;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        if report_json.is_null() {
            return Err(invalid("report_json is null"));
        }
        let outcome = run_pipeline(&config, &dir)?;
        let json = emit_report(&outcome.report, ReportFormat::Json);
        let c = CString::new(json).map_err(|e| Failure(VitoptStatus::InternalError, e.to_string()))?;
        report_json.write(c.into_raw());
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vitopt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[cfg(test)]
mod tests {
    use std::ptr;

    use super::*;

    #[test]
    fn panics_become_status() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, VitoptStatus::Panic);
        let msg = unsafe { CStr::from_ptr(vitopt_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "panic: boom");
    }

    #[test]
    fn null_pointers_are_rejected() {
        let status = unsafe { vitopt_model_init(ptr::null(), 0, ptr::null_mut()) };
        assert_eq!(status, VitoptStatus::InvalidArgument);
    }
}
