//! C ABI over `beam_moe`.
//!
//! Datasets and trained models are exposed as opaque handles created by
//! `bm_*_load` and released with `bm_*_free`. Every fallible call returns a
//! [`BmStatus`]; on failure a message is kept per thread and can be fetched
//! with [`bm_last_error_message`]. Status values 2, 3 and 4 match the exit
//! codes of the `beam-moe` binary. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use beam_moe::array_channel::{build_dft_codebook, optimal_beam_index, ArrayGeometry, ChannelState};
use beam_moe::checkpoint::Checkpoint;
use beam_moe::dataset::Dataset;
use beam_moe::moe::BeamModel;
use beam_moe::Error;
use num_complex::Complex64;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad argument, shape mismatch or invalid value.
    InvalidArgument = 2,
    /// File missing, unreadable or malformed.
    Io = 3,
    /// A computation produced a non-finite value.
    Numeric = 4,
    /// Caller buffer too small. Query sizes with `bm_model_num_beams`,
    /// `bm_model_num_experts` or `bm_dataset_input_dim`.
    BufferTooSmall = 5,
    /// Internal bug. The handle involved should be considered unusable.
    Panic = 6,
}

/// Opaque dataset handle.
pub struct BmDataset {
    inner: Dataset,
}

/// Opaque handle to a model restored from a checkpoint.
pub struct BmModel {
    inner: BeamModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(BmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            3 => BmStatus::Io,
            4 => BmStatus::Numeric,
            _ => BmStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_owned());
            set_error(format!("internal panic: {msg}"));
            BmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(BmStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(BmStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = unsafe { CStr::from_ptr(path) }
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

unsafe fn input_slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null("input"));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

/// Copies `values` into `(buf, cap)` when it fits. `buf` may be null to
/// query the length only.
unsafe fn write_buffer(values: &[f64], buf: *mut f64, cap: usize) -> Result<(), Failure> {
    if buf.is_null() {
        return Ok(());
    }
    if cap < values.len() {
        return Err(Failure(
            BmStatus::BufferTooSmall,
            format!("buffer holds {cap} values, {} needed", values.len()),
        ));
    }
    unsafe { std::ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len()) };
    Ok(())
}

fn split_input<'a>(model: &BeamModel, x: &'a [f64]) -> Result<Vec<&'a [f64]>, Failure> {
    let dims = model.modality_dims();
    let total: usize = dims.iter().sum();
    if x.len() != total {
        return Err(invalid(format!(
            "input has {} values, model expects {total} (modality dims {dims:?})",
            x.len()
        )));
    }
    let mut parts = Vec::with_capacity(dims.len());
    let mut at = 0;
    for &d in dims {
        parts.push(&x[at..at + d]);
        at += d;
    }
    Ok(parts)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call or [`bm_clear_error`] on the same
/// thread.
#[no_mangle]
pub extern "C" fn bm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn bm_clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Loads a dataset file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_dataset_load(path: *const c_char, out: *mut *mut BmDataset) -> BmStatus {
    guard(|| {
        let slot = unsafe { self::out(out, "out") }?;
        *slot = std::ptr::null_mut();
        let ds = Dataset::load(&unsafe { path_arg(path) }?)?;
        *slot = Box::into_raw(Box::new(BmDataset { inner: ds }));
        Ok(())
    })
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `ds` must come from [`bm_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bm_dataset_free(ds: *mut BmDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// # Safety
/// `ds` must be a live handle and `len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_dataset_len(ds: *const BmDataset, len: *mut usize) -> BmStatus {
    guard(|| {
        let ds = unsafe { handle(ds, "dataset") }?;
        *unsafe { out(len, "len") }? = ds.inner.len();
        Ok(())
    })
}

/// Total input width: the sum of all modality dimensions.
///
/// # Safety
/// `ds` must be a live handle and `dim` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_dataset_input_dim(ds: *const BmDataset, dim: *mut usize) -> BmStatus {
    guard(|| {
        let ds = unsafe { handle(ds, "dataset") }?;
        *unsafe { out(dim, "dim") }? = ds.inner.modality_dims().iter().sum();
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and `num_beams` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_dataset_num_beams(ds: *const BmDataset, num_beams: *mut usize) -> BmStatus {
    guard(|| {
        let ds = unsafe { handle(ds, "dataset") }?;
        *unsafe { out(num_beams, "num_beams") }? = ds.inner.header().num_beams;
        Ok(())
    })
}

/// Copies sample `index`'s modality inputs, concatenated in modality order,
/// into `input` (capacity `cap`) and its beam label into `label`. Either
/// output may be null.
///
/// # Safety
/// `ds` must be a live handle; non-null outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bm_dataset_sample(
    ds: *const BmDataset,
    index: usize,
    input: *mut f64,
    cap: usize,
    label: *mut usize,
) -> BmStatus {
    guard(|| {
        let ds = unsafe { handle(ds, "dataset") }?;
        let s = ds.inner.samples().get(index).ok_or_else(|| {
            invalid(format!("sample index {index} out of range (len {})", ds.inner.len()))
        })?;
        let flat: Vec<f64> = s.modalities.concat();
        unsafe { write_buffer(&flat, input, cap) }?;
        if let Some(l) = unsafe { label.as_mut() } {
            *l = s.label;
        }
        Ok(())
    })
}

/// Loads a checkpoint. On success `*out` owns a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_model_load(path: *const c_char, out: *mut *mut BmModel) -> BmStatus {
    guard(|| {
        let slot = unsafe { self::out(out, "out") }?;
        *slot = std::ptr::null_mut();
        let ck = Checkpoint::load(&unsafe { path_arg(path) }?)?;
        *slot = Box::into_raw(Box::new(BmModel { inner: ck.run.model }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`bm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bm_model_free(model: *mut BmModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle and `num_beams` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_model_num_beams(model: *const BmModel, num_beams: *mut usize) -> BmStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        *unsafe { out(num_beams, "num_beams") }? = m.inner.num_beams();
        Ok(())
    })
}

/// Input width the model expects: the sum of its modality dimensions.
///
/// # Safety
/// `model` must be a live handle and `dim` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_model_input_dim(model: *const BmModel, dim: *mut usize) -> BmStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        *unsafe { out(dim, "dim") }? = m.inner.modality_dims().iter().sum();
        Ok(())
    })
}

/// Number of fusion weights the model produces: the expert count for a
/// mixture model, 0 for every other kind.
///
/// # Safety
/// `model` must be a live handle and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_model_num_experts(model: *const BmModel, count: *mut usize) -> BmStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        *unsafe { out(count, "count") }? = if m.inner.gating().is_some() {
            m.inner.experts().len()
        } else {
            0
        };
        Ok(())
    })
}

/// Runs the model on one concatenated input. Writes the `num_beams` logits
/// into `logits` (capacity `cap`) and the predicted beam into `beam`; either
/// output may be null.
///
/// # Safety
/// `model` must be a live handle, `input` valid for `input_len` reads, and
/// non-null outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bm_model_predict(
    model: *const BmModel,
    input: *const f64,
    input_len: usize,
    logits: *mut f64,
    cap: usize,
    beam: *mut usize,
) -> BmStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        let x = split_input(&m.inner, unsafe { input_slice(input, input_len) }?)?;
        let p = m.inner.predict(&x)?;
        if p.logits.iter().any(|v| !v.is_finite()) {
            return Err(Failure(BmStatus::Numeric, "model produced non-finite logits".into()));
        }
        unsafe { write_buffer(&p.logits, logits, cap) }?;
        if let Some(b) = unsafe { beam.as_mut() } {
            *b = p.beam;
        }
        Ok(())
    })
}

/// Fusion weights of a mixture model for one input, one per expert.
///
/// # Safety
/// As for [`bm_model_predict`]; `weights` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn bm_model_gating_weights(
    model: *const BmModel,
    input: *const f64,
    input_len: usize,
    weights: *mut f64,
    cap: usize,
) -> BmStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        if weights.is_null() {
            return Err(null("weights"));
        }
        let x = split_input(&m.inner, unsafe { input_slice(input, input_len) }?)?;
        let w = m.inner.gating_forward(&x)?;
        unsafe { write_buffer(w.as_slice(), weights, cap) }
    })
}

/// Exhaustive-search beam for a channel `h = re + j*im` of `num_antennas`
/// entries over the `num_beams`-point DFT codebook of a half-wavelength array.
///
/// # Safety
/// `re` and `im` must each be valid for `num_antennas` reads; `beam` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_optimal_beam(
    re: *const f64,
    im: *const f64,
    num_antennas: usize,
    num_beams: usize,
    beam: *mut usize,
) -> BmStatus {
    guard(|| {
        let slot = unsafe { out(beam, "beam") }?;
        if num_antennas == 0 {
            return Err(invalid("num_antennas must be >= 1"));
        }
        let re = unsafe { input_slice(re, num_antennas) }?;
        let im = unsafe { input_slice(im, num_antennas) }?;
        let h: Vec<Complex64> = re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect();
        let codebook = build_dft_codebook(&ArrayGeometry::half_wavelength(num_antennas)?, num_beams)?;
        *slot = optimal_beam_index(&ChannelState::from_vector(h)?, &codebook)?;
        Ok(())
    })
}
