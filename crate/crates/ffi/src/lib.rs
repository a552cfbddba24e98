//! C interface to `lora-mini`.
//!
//! Every entry point returns an [`LmStatus`]; on failure a description is
//! available from [`lm_last_error`] on the same thread. Matrices cross the
//! boundary as row-major `double` buffers. Handles are opaque and must be
//! released with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lora_mini::accountant::{self, BudgetMethod};
use lora_mini::adapters::{AdaptedLinear, AdapterSpec};
use lora_mini::io::{load_checkpoint, save_checkpoint, Checkpoint, Entry};
use lora_mini::model::TargetMode;
use lora_mini::{Error, Matrix, RngState};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Panic = 7,
}

/// Values accepted for `method` arguments.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmMethod {
    Lora = 0,
    LoraMini = 1,
    Fft = 2,
}

/// Values accepted for `target` arguments.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmTarget {
    DenseOnly = 0,
    DenseAndAttention = 1,
    All = 2,
}

/// A base weight with one attached adapter.
pub struct LmAdapter {
    layer: AdaptedLinear,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: LmStatus, msg: impl Into<String>) -> LmStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &Error) -> LmStatus {
    match e {
        Error::Shape { .. } => LmStatus::Shape,
        Error::Argument(_) | Error::Config(_) => LmStatus::Config,
        Error::Io { .. } => LmStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => LmStatus::Format,
        Error::Diverged { .. } | Error::UndefinedMetric(_) => LmStatus::Numeric,
    }
}

fn guard(f: impl FnOnce() -> Result<(), LmStatus>) -> LmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LmStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(LmStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn lift<T>(r: lora_mini::Result<T>) -> Result<T, LmStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), LmStatus> {
    if p.is_null() {
        Err(fail(LmStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must point to `rows * cols` readable doubles.
unsafe fn read_matrix(
    p: *const f64,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<Matrix, LmStatus> {
    non_null(p, what)?;
    let n = rows.checked_mul(cols).filter(|&n| n > 0).ok_or_else(|| {
        fail(
            LmStatus::Shape,
            format!("{what}: invalid shape {rows}x{cols}"),
        )
    })?;
    let data = std::slice::from_raw_parts(p, n).to_vec();
    lift(Matrix::from_vec(rows, cols, data))
}

/// # Safety
/// `out` must point to `out_len` writable doubles.
unsafe fn write_matrix(m: &Matrix, out: *mut f64, out_len: usize) -> Result<(), LmStatus> {
    non_null(out, "output buffer")?;
    if out_len != m.len() {
        return Err(fail(
            LmStatus::Shape,
            format!(
                "output buffer holds {out_len} values, result has {} ({}x{})",
                m.len(),
                m.rows(),
                m.cols()
            ),
        ));
    }
    ptr::copy_nonoverlapping(m.as_slice().as_ptr(), out, out_len);
    Ok(())
}

/// # Safety
/// `s` must be a valid NUL-terminated string.
unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, LmStatus> {
    non_null(s, what)?;
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(LmStatus::Config, format!("{what} is not valid UTF-8")))
}

fn method_of(v: u32) -> Result<LmMethod, LmStatus> {
    Ok(match v {
        0 => LmMethod::Lora,
        1 => LmMethod::LoraMini,
        2 => LmMethod::Fft,
        _ => return Err(fail(LmStatus::Config, format!("unknown method {v}"))),
    })
}

fn target_of(v: u32) -> Result<TargetMode, LmStatus> {
    Ok(match v {
        0 => TargetMode::DenseOnly,
        1 => TargetMode::DenseAndAttention,
        2 => TargetMode::All,
        _ => return Err(fail(LmStatus::Config, format!("unknown target {v}"))),
    })
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates an adapter over a `d x k` base weight (`bias` may be NULL for a
/// zero bias of length `k`). `method` is an [`LmMethod`]; `a` and `b` are
/// ignored for LoRA. Factors are drawn deterministically from `seed`; with
/// `zero_init_b` the up factor starts at zero so the update is initially zero.
///
/// # Safety
/// `weight` must point to `d * k` doubles, `bias` to `k` doubles or be NULL,
/// and `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn lm_adapter_new(
    weight: *const f64,
    bias: *const f64,
    d: usize,
    k: usize,
    method: u32,
    r: usize,
    a: usize,
    b: usize,
    scale: f64,
    zero_init_b: bool,
    seed: u64,
    out: *mut *mut LmAdapter,
) -> LmStatus {
    guard(|| {
        non_null(out, "out")?;
        let w = read_matrix(weight, d, k, "weight")?;
        let bias = if bias.is_null() {
            Matrix::zeros(1, k)
        } else {
            read_matrix(bias, 1, k, "bias")?
        };
        let spec = match method_of(method)? {
            LmMethod::Lora => AdapterSpec::lora(r),
            LmMethod::LoraMini => AdapterSpec::lora_mini(r, a, b),
            LmMethod::Fft => return Err(fail(LmStatus::Config, "fft is not an adapter method")),
        }
        .with_scale(scale)
        .with_zero_init_b(zero_init_b);
        let mut layer = lift(AdaptedLinear::new("layer", w, bias))?;
        lift(layer.attach(&spec, &RngState::new(seed, "adapters")))?;
        *out = Box::into_raw(Box::new(LmAdapter { layer }));
        Ok(())
    })
}

/// Releases a handle. NULL is accepted.
///
/// # Safety
/// `handle` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lm_adapter_free(handle: *mut LmAdapter) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// `rows x k` output of `x·(W + ΔW) + bias` for a `rows x d` input.
///
/// # Safety
/// `handle` must be live, `x` must hold `rows * d` doubles and `out` must
/// hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lm_adapter_forward(
    handle: *const LmAdapter,
    x: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> LmStatus {
    guard(|| {
        non_null(handle, "handle")?;
        let layer = &(*handle).layer;
        let x = read_matrix(x, rows, layer.dims().0, "x")?;
        write_matrix(&lift(layer.forward(&x))?, out, out_len)
    })
}

/// Writes the `d x k` adapter update.
///
/// # Safety
/// `handle` must be live and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lm_adapter_delta_weight(
    handle: *const LmAdapter,
    out: *mut f64,
    out_len: usize,
) -> LmStatus {
    guard(|| {
        non_null(handle, "handle")?;
        let adapter = (*handle)
            .layer
            .adapter()
            .ok_or_else(|| fail(LmStatus::Config, "no adapter attached"))?;
        write_matrix(&adapter.delta_weight(), out, out_len)
    })
}

/// Writes `W + ΔW` without modifying the handle.
///
/// # Safety
/// `handle` must be live and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lm_adapter_merged_weight(
    handle: *const LmAdapter,
    out: *mut f64,
    out_len: usize,
) -> LmStatus {
    guard(|| {
        non_null(handle, "handle")?;
        let layer = &(*handle).layer;
        let adapter = layer
            .adapter()
            .ok_or_else(|| fail(LmStatus::Config, "no adapter attached"))?;
        write_matrix(&lift(adapter.merge(layer.weight()))?, out, out_len)
    })
}

/// # Safety
/// `handle` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lm_adapter_trainable_param_count(
    handle: *const LmAdapter,
    out: *mut usize,
) -> LmStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(out, "out")?;
        *out = (*handle).layer.trainable_param_count();
        Ok(())
    })
}

/// Saves the adapter as a 32-bit checkpoint at `path`.
///
/// # Safety
/// `handle` must be live and `path` a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn lm_adapter_save(
    handle: *const LmAdapter,
    path: *const c_char,
) -> LmStatus {
    guard(|| {
        non_null(handle, "handle")?;
        let path = read_str(path, "path")?;
        lift(save_checkpoint(
            &Checkpoint::from_linear(&(*handle).layer),
            Path::new(path),
        ))
    })
}

/// Loads a single-adapter checkpoint and attaches it to a `d x k` base
/// weight (`bias` may be NULL).
///
/// # Safety
/// As for [`lm_adapter_new`]; `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn lm_adapter_load(
    path: *const c_char,
    weight: *const f64,
    bias: *const f64,
    d: usize,
    k: usize,
    out: *mut *mut LmAdapter,
) -> LmStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = read_str(path, "path")?;
        let w = read_matrix(weight, d, k, "weight")?;
        let bias = if bias.is_null() {
            Matrix::zeros(1, k)
        } else {
            read_matrix(bias, 1, k, "bias")?
        };
        let ckpt = lift(load_checkpoint(Path::new(path)))?;
        let adapter = match ckpt.entries.as_slice() {
            [Entry::Adapter(a)] => a.clone(),
            other => {
                return Err(fail(
                    LmStatus::Format,
                    format!(
                        "expected exactly one adapter entry, found {} entries",
                        other.len()
                    ),
                ))
            }
        };
        let mut layer = lift(AdaptedLinear::new(adapter.base_ref().to_string(), w, bias))?;
        lift(layer.set_adapter(adapter))?;
        *out = Box::into_raw(Box::new(LmAdapter { layer }));
        Ok(())
    })
}

/// Trainable parameter count for a built-in topology fixture (`"roberta"`,
/// `"bert-stsb"`, `"t5-base"`, ...). `method` is an [`LmMethod`], `target` an
/// [`LmTarget`].
///
/// # Safety
/// `fixture` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lm_budget(
    fixture: *const c_char,
    method: u32,
    target: u32,
    r: u64,
    a: u64,
    b: u64,
    out: *mut u64,
) -> LmStatus {
    guard(|| {
        non_null(out, "out")?;
        let topo = lift(accountant::topology(read_str(fixture, "fixture")?))?;
        let method = match method_of(method)? {
            LmMethod::Lora => BudgetMethod::Lora,
            LmMethod::LoraMini => BudgetMethod::LoraMini,
            LmMethod::Fft => BudgetMethod::Fft,
        };
        let report = lift(accountant::budget(
            &topo,
            method,
            target_of(target)?,
            r,
            Some(a),
            Some(b),
        ))?;
        *out = report.trainable_total;
        Ok(())
    })
}
