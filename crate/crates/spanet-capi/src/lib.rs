//! C ABI over the `spanet` library.
//!
//! Conventions:
//!
//! * Every fallible call returns a [`SpanetStatus`]; `SPANET_STATUS_OK` (0)
//!   means success.
//! * Objects are created behind opaque handles (`SpanetProfile`,
//!   `SpanetSpam`, `SpanetModel`) and released with the matching `_free`
//!   function. `_free(NULL)` is a no-op; handles must not be used after
//!   being freed.
//! * On failure, a human-readable description is available from
//!   [`spanet_last_error_message`]. The returned pointer is thread-local and
//!   valid until the next `spanet_*` call on the same thread.
//! * Buffers are caller-allocated; length arguments are element counts, and
//!   mismatches are rejected (never truncated).
//! * Panics are caught at the boundary and reported as
//!   `SPANET_STATUS_PANIC`; they never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use spanet::backbone::{build_model, Model};
use spanet::profiler::{
    band_abs_mean, export_aggregate, export_profile, simulate_campaign, CampaignKind,
    FrequencyProfile,
};
use spanet::rng::SeedStream;
use spanet::spam::{spam_forward, SpamParams, SrfMode};
use spanet::tensor::FeatureMap;
use spanet::Error;

/// Result code for every fallible API call.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanetStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument or configuration was rejected (wrong length, bad JSON,
    /// invalid dimensions, unsupported flag combination).
    InvalidArgument = 2,
    /// A file could not be read or written, or stored bytes were malformed.
    Io = 3,
    /// A numerical procedure failed (eigensolver non-convergence,
    /// degenerate graph).
    Numeric = 4,
    /// An internal panic was caught at the boundary.
    Panic = 5,
}

/// Patch-graph family for frequency-response campaigns.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanetGraph {
    /// Window-connectivity grid graph, profiled with convolution supports.
    Grid = 0,
    /// Complete graph, profiled with attention supports.
    Complete = 1,
}

/// Spectral-mask layout for the SPAM mixer.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanetMaskMode {
    /// One mask plane per channel.
    Depthwise = 0,
    /// One mask plane shared by all channels of a head.
    Single = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> =
        RefCell::new(CString::new("").expect("empty string has no NUL"));
}

fn set_error(msg: String) {
    let sanitized = CString::new(msg.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error message unavailable").expect("no NUL"));
    LAST_ERROR.with(|e| *e.borrow_mut() = sanitized);
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new("").expect("empty string has no NUL"));
}

fn status_of(e: &Error) -> SpanetStatus {
    match e {
        Error::Io(_) | Error::MalformedContainer { .. } => SpanetStatus::Io,
        Error::NoConvergence { .. } | Error::IsolatedNode { .. } | Error::NonDeterministicLoss { .. } => {
            SpanetStatus::Numeric
        }
        _ => SpanetStatus::InvalidArgument,
    }
}

fn fail(status: SpanetStatus, msg: String) -> SpanetStatus {
    set_error(msg);
    status
}

fn fail_err(e: Error) -> SpanetStatus {
    let status = status_of(&e);
    set_error(e.to_string());
    status
}

/// Run `f` with panics converted to `SPANET_STATUS_PANIC`, clearing the
/// error slot first so stale messages never outlive a successful call.
fn guarded(f: impl FnOnce() -> SpanetStatus) -> SpanetStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            fail(SpanetStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn read_c_str(ptr: *const c_char, what: &str) -> Result<String, SpanetStatus> {
    if ptr.is_null() {
        return Err(fail(
            SpanetStatus::NullArgument,
            format!("{what} pointer is null"),
        ));
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(s.to_string()),
        Err(e) => Err(fail(
            SpanetStatus::InvalidArgument,
            format!("{what} is not valid UTF-8: {e}"),
        )),
    }
}

/// Library version as a static NUL-terminated string; never null.
#[no_mangle]
pub extern "C" fn spanet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Description of the most recent failure on this thread; empty after a
/// successful call. Valid until the next `spanet_*` call on this thread.
#[no_mangle]
pub extern "C" fn spanet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Frequency-response campaigns
// ---------------------------------------------------------------------------

/// Opaque campaign result: per-trial spectra plus binned aggregate.
pub struct SpanetProfile {
    inner: FrequencyProfile,
}

/// Run a randomized frequency-response campaign on `patch x patch` graphs.
///
/// For `SPANET_GRAPH_GRID`, `kernel` is the odd convolution window size; for
/// `SPANET_GRAPH_COMPLETE` it must be 0. On success `*out` owns the result
/// and must be released with `spanet_profile_free`.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn spanet_profile_run(
    graph: SpanetGraph,
    kernel: usize,
    trials: usize,
    patch: usize,
    seed: u64,
    out: *mut *mut SpanetProfile,
) -> SpanetStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SpanetStatus::NullArgument, "out pointer is null".into());
        }
        let kind = match graph {
            SpanetGraph::Grid => {
                if kernel == 0 || kernel % 2 == 0 {
                    return fail(
                        SpanetStatus::InvalidArgument,
                        format!("grid campaigns need an odd kernel size, got {kernel}"),
                    );
                }
                CampaignKind::Conv { m: kernel }
            }
            SpanetGraph::Complete => {
                if kernel != 0 {
                    return fail(
                        SpanetStatus::InvalidArgument,
                        "complete-graph campaigns take kernel = 0".into(),
                    );
                }
                CampaignKind::Attention
            }
        };
        if patch < 2 {
            return fail(
                SpanetStatus::InvalidArgument,
                format!("patch must be at least 2, got {patch}"),
            );
        }
        match simulate_campaign(kind, trials, (patch, patch), seed) {
            Ok(profile) => {
                let handle = Box::new(SpanetProfile { inner: profile });
                unsafe { *out = Box::into_raw(handle) };
                SpanetStatus::Ok
            }
            Err(e) => fail_err(e),
        }
    })
}

/// Number of trials recorded in the profile.
///
/// # Safety
/// `profile` must be a live handle from `spanet_profile_run`; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn spanet_profile_trial_count(
    profile: *const SpanetProfile,
    out: *mut usize,
) -> SpanetStatus {
    guarded(|| {
        if profile.is_null() || out.is_null() {
            return fail(SpanetStatus::NullArgument, "null handle or out".into());
        }
        unsafe { *out = (*profile).inner.trials.len() };
        SpanetStatus::Ok
    })
}

/// Mean absolute response over eigenvalues in `[lo, hi]`, pooled across all
/// trials; 0 when the band is empty.
///
/// # Safety
/// `profile` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spanet_profile_band_mean(
    profile: *const SpanetProfile,
    lo: f64,
    hi: f64,
    out: *mut f64,
) -> SpanetStatus {
    guarded(|| {
        if profile.is_null() || out.is_null() {
            return fail(SpanetStatus::NullArgument, "null handle or out".into());
        }
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return fail(
                SpanetStatus::InvalidArgument,
                format!("band [{lo}, {hi}] is not a finite interval"),
            );
        }
        unsafe { *out = band_abs_mean(&(*profile).inner, lo, hi) };
        SpanetStatus::Ok
    })
}

/// Write per-trial rows (`trial,lambda,phi`) as CSV.
///
/// # Safety
/// `profile` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spanet_profile_export_trials(
    profile: *const SpanetProfile,
    path: *const c_char,
) -> SpanetStatus {
    guarded(|| {
        if profile.is_null() {
            return fail(SpanetStatus::NullArgument, "null profile handle".into());
        }
        let path = match unsafe { read_c_str(path, "path") } {
            Ok(p) => PathBuf::from(p),
            Err(status) => return status,
        };
        match export_profile(unsafe { &(*profile).inner }, &path) {
            Ok(()) => SpanetStatus::Ok,
            Err(e) => fail_err(e),
        }
    })
}

/// Write the binned aggregate (`bin_lo,bin_hi,mean_abs,std_abs,count`) as CSV.
///
/// # Safety
/// `profile` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spanet_profile_export_aggregate(
    profile: *const SpanetProfile,
    path: *const c_char,
) -> SpanetStatus {
    guarded(|| {
        if profile.is_null() {
            return fail(SpanetStatus::NullArgument, "null profile handle".into());
        }
        let path = match unsafe { read_c_str(path, "path") } {
            Ok(p) => PathBuf::from(p),
            Err(status) => return status,
        };
        match export_aggregate(unsafe { &(*profile).inner }, &path) {
            Ok(()) => SpanetStatus::Ok,
            Err(e) => fail_err(e),
        }
    })
}

/// Release a profile handle. Passing null is a no-op.
///
/// # Safety
/// `profile` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spanet_profile_free(profile: *mut SpanetProfile) {
    if !profile.is_null() {
        drop(unsafe { Box::from_raw(profile) });
    }
}

// ---------------------------------------------------------------------------
// SPAM token mixer
// ---------------------------------------------------------------------------

/// Opaque SPAM mixer: parameters fixed at creation for one resolution.
pub struct SpanetSpam {
    params: SpamParams,
    dim: usize,
    height: usize,
    width: usize,
}

/// Create a seeded SPAM mixer for `dim`-channel maps of `height x width`.
/// `dim` must be divisible by 4 (one spectral head per kernel size). On
/// success `*out` owns the mixer; release with `spanet_spam_free`.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn spanet_spam_new(
    dim: usize,
    height: usize,
    width: usize,
    mask_mode: SpanetMaskMode,
    biases: i32,
    seed: u64,
    out: *mut *mut SpanetSpam,
) -> SpanetStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SpanetStatus::NullArgument, "out pointer is null".into());
        }
        let mode = match mask_mode {
            SpanetMaskMode::Depthwise => SrfMode::Depthwise,
            SpanetMaskMode::Single => SrfMode::Single,
        };
        let stream = SeedStream::new(seed).split("capi/spam");
        match SpamParams::random(dim, height, width, mode, biases != 0, &stream) {
            Ok(params) => {
                let handle = Box::new(SpanetSpam {
                    params,
                    dim,
                    height,
                    width,
                });
                unsafe { *out = Box::into_raw(handle) };
                SpanetStatus::Ok
            }
            Err(e) => fail_err(e),
        }
    })
}

/// Number of learnable scalars in the mixer.
///
/// # Safety
/// `spam` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spanet_spam_param_count(
    spam: *const SpanetSpam,
    out: *mut usize,
) -> SpanetStatus {
    guarded(|| {
        if spam.is_null() || out.is_null() {
            return fail(SpanetStatus::NullArgument, "null handle or out".into());
        }
        let h = unsafe { &*spam };
        let mut count = 0usize;
        h.params.visit(&mut |_, slice| count += slice.len());
        unsafe { *out = count };
        SpanetStatus::Ok
    })
}

/// Apply the mixer. `input` and `output` are `dim * height * width` doubles
/// in channel-major order (channel, then row, then column); both length
/// arguments must equal that product.
///
/// # Safety
/// `spam` must be a live handle; `input` must hold `input_len` readable
/// doubles and `output` `output_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn spanet_spam_forward(
    spam: *const SpanetSpam,
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> SpanetStatus {
    guarded(|| {
        if spam.is_null() || input.is_null() || output.is_null() {
            return fail(SpanetStatus::NullArgument, "null handle or buffer".into());
        }
        let h = unsafe { &*spam };
        let expected = h.dim * h.height * h.width;
        if input_len != expected || output_len != expected {
            return fail(
                SpanetStatus::InvalidArgument,
                format!(
                    "buffers must hold {expected} doubles ({}x{}x{}), got input {input_len} / output {output_len}",
                    h.dim, h.height, h.width
                ),
            );
        }
        let data = unsafe { std::slice::from_raw_parts(input, input_len) }.to_vec();
        let x = match FeatureMap::new(h.dim, h.height, h.width, data) {
            Ok(x) => x,
            Err(e) => return fail_err(e),
        };
        match spam_forward(&x, &h.params) {
            Ok(y) => {
                unsafe {
                    std::slice::from_raw_parts_mut(output, output_len).copy_from_slice(y.data())
                };
                SpanetStatus::Ok
            }
            Err(e) => fail_err(e),
        }
    })
}

/// Release a mixer handle. Passing null is a no-op.
///
/// # Safety
/// `spam` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spanet_spam_free(spam: *mut SpanetSpam) {
    if !spam.is_null() {
        drop(unsafe { Box::from_raw(spam) });
    }
}

// ---------------------------------------------------------------------------
// Backbone models
// ---------------------------------------------------------------------------

/// Opaque backbone: four downsampling stages plus classifier head.
pub struct SpanetModel {
    inner: Model,
}

/// Build a model from a JSON architecture config (same schema as the CLI's
/// `model --config` file). On success `*out` owns the model; release with
/// `spanet_model_free`.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string; `out` must point to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn spanet_model_build(
    config_json: *const c_char,
    out: *mut *mut SpanetModel,
) -> SpanetStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SpanetStatus::NullArgument, "out pointer is null".into());
        }
        let text = match unsafe { read_c_str(config_json, "config_json") } {
            Ok(t) => t,
            Err(status) => return status,
        };
        let config: spanet::backbone::StageConfig = match serde_json::from_str(&text) {
            Ok(c) => c,
            Err(e) => {
                return fail(
                    SpanetStatus::InvalidArgument,
                    format!("config JSON rejected: {e}"),
                )
            }
        };
        if let Err(e) = config.validate() {
            return fail_err(e);
        }
        match build_model(&config) {
            Ok(model) => {
                let handle = Box::new(SpanetModel { inner: model });
                unsafe { *out = Box::into_raw(handle) };
                SpanetStatus::Ok
            }
            Err(e) => fail_err(e),
        }
    })
}

/// Number of learnable scalars, classifier head included.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spanet_model_param_count(
    model: *const SpanetModel,
    out: *mut usize,
) -> SpanetStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(SpanetStatus::NullArgument, "null handle or out".into());
        }
        let m = unsafe { &*model };
        let mut count = 0usize;
        m.inner.visit(&mut |_, slice| count += slice.len());
        unsafe { *out = count };
        SpanetStatus::Ok
    })
}

/// Side length of the square input image the model expects.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spanet_model_input_size(
    model: *const SpanetModel,
    out: *mut usize,
) -> SpanetStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(SpanetStatus::NullArgument, "null handle or out".into());
        }
        unsafe { *out = (*model).inner.config.input_size };
        SpanetStatus::Ok
    })
}

/// Classifier output width.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spanet_model_num_classes(
    model: *const SpanetModel,
    out: *mut usize,
) -> SpanetStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(SpanetStatus::NullArgument, "null handle or out".into());
        }
        unsafe { *out = (*model).inner.config.num_classes };
        SpanetStatus::Ok
    })
}

/// Classify one image. `image` holds `3 * side * side` doubles
/// (channel-major); `logits` receives `num_classes` doubles.
///
/// # Safety
/// `model` must be a live handle; `image` must hold `image_len` readable
/// doubles and `logits` `logits_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn spanet_model_forward(
    model: *const SpanetModel,
    image: *const f64,
    image_len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> SpanetStatus {
    guarded(|| {
        if model.is_null() || image.is_null() || logits.is_null() {
            return fail(SpanetStatus::NullArgument, "null handle or buffer".into());
        }
        let m = unsafe { &*model };
        let side = m.inner.config.input_size;
        let expected = 3 * side * side;
        if image_len != expected {
            return fail(
                SpanetStatus::InvalidArgument,
                format!("image must hold {expected} doubles (3x{side}x{side}), got {image_len}"),
            );
        }
        if logits_len != m.inner.config.num_classes {
            return fail(
                SpanetStatus::InvalidArgument,
                format!(
                    "logits must hold {} doubles, got {logits_len}",
                    m.inner.config.num_classes
                ),
            );
        }
        let data = unsafe { std::slice::from_raw_parts(image, image_len) }.to_vec();
        let x = match FeatureMap::new(3, side, side, data) {
            Ok(x) => x,
            Err(e) => return fail_err(e),
        };
        match m.inner.forward(&x) {
            Ok(outp) => {
                unsafe {
                    std::slice::from_raw_parts_mut(logits, logits_len)
                        .copy_from_slice(&outp.logits)
                };
                SpanetStatus::Ok
            }
            Err(e) => fail_err(e),
        }
    })
}

/// Release a model handle. Passing null is a no-op.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spanet_model_free(model: *mut SpanetModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}
