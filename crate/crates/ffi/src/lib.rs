//! C ABI over the cosformer library.
//!
//! Every fallible function returns a [`CosStatus`]. On failure the message is
//! kept per thread and can be read with [`cos_last_error`]. Panics never cross
//! the boundary; they surface as [`CosStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cosformer::continual::checkpoint::{self, Checkpoint};
use cosformer::harness::{compute_metrics, silhouette, AccuracyMatrix};
use cosformer::model::{Conditioning, DEFAULT_MAX_LEN};
use cosformer::numerics::Tensor;
use cosformer::synthdata::{make_stream, write_bags, StreamConfig};
use cosformer::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CosStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Contract = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque handle to a model restored from a checkpoint.
pub struct CosModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Failure(CosStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Contract(_) => CosStatus::Contract,
            Error::NonFinite { .. } | Error::Divergence(_) | Error::Generation(_) => CosStatus::Numeric,
            Error::Io { .. } => CosStatus::Io,
            Error::Format { .. } | Error::Json(_) => CosStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: CosStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CosStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CosStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside cosformer");
            CosStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(CosStatus::NullPointer, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(CosStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(CosStatus::NullPointer, format!("{name} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(CosStatus::NullPointer, format!("{name} is null")))
}

unsafe fn model_arg<'a>(model: *const CosModel) -> Result<&'a CosModel, Failure> {
    model
        .as_ref()
        .ok_or_else(|| Failure(CosStatus::NullPointer, "model is null".into()))
}

/// Copies `bytes` plus a NUL terminator into `buf`; `needed` receives the
/// required capacity including the terminator.
unsafe fn write_str(bytes: &[u8], buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Failure> {
    if let Some(n) = needed.as_mut() {
        *n = bytes.len() + 1;
    }
    if cap < bytes.len() + 1 {
        return fail(CosStatus::BufferTooSmall, format!("need {} bytes", bytes.len() + 1));
    }
    if buf.is_null() {
        return fail(CosStatus::NullPointer, "buf is null");
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Copies the calling thread's last error message into `buf`.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn cos_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> CosStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match write_str(msg.as_bytes(), buf, cap, needed) {
        Ok(()) => CosStatus::Ok,
        Err(Failure(s, _)) => s,
    }
}

/// Loads a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cos_model_load(path: *const c_char, out: *mut *mut CosModel) -> CosStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let checkpoint = checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(CosModel { checkpoint }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`cos_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cos_model_free(model: *mut CosModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Patch feature width the model expects.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cos_model_feature_dim(model: *const CosModel, out: *mut usize) -> CosStatus {
    guard(|| {
        *out_arg(out, "out")? = model_arg(model)?.checkpoint.model.config.d_f;
        Ok(())
    })
}

/// Number of tasks the model has learned.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cos_model_task_count(model: *const CosModel, out: *mut usize) -> CosStatus {
    guard(|| {
        *out_arg(out, "out")? = model_arg(model)?.checkpoint.model.task_count();
        Ok(())
    })
}

/// Vocabulary size, special tokens included.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cos_model_vocab_size(model: *const CosModel, out: *mut usize) -> CosStatus {
    guard(|| {
        *out_arg(out, "out")? = model_arg(model)?.checkpoint.model.vocab.len();
        Ok(())
    })
}

/// Writes the word with token id `id` into `buf` as a C string.
///
/// # Safety
/// `model` must be a live handle; `buf` must be valid for `cap` bytes;
/// `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn cos_model_word(
    model: *const CosModel,
    id: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> CosStatus {
    guard(|| {
        let vocab = &model_arg(model)?.checkpoint.model.vocab;
        let word = match vocab.word(id) {
            Some(w) => w,
            None => return fail(CosStatus::InvalidArgument, format!("no token {id}")),
        };
        write_str(word.as_bytes(), buf, cap, needed)
    })
}

unsafe fn bag_arg(model: &CosModel, patches: *const f64, rows: usize, cols: usize) -> Result<Tensor, Failure> {
    let d_f = model.checkpoint.model.config.d_f;
    if rows == 0 || cols != d_f {
        return fail(
            CosStatus::InvalidArgument,
            format!("bag must be non-empty with {d_f} columns, got {rows}x{cols}"),
        );
    }
    let data = slice_arg(patches, rows * cols, "patches")?.to_vec();
    Ok(Tensor::new(rows, cols, data)?)
}

fn condition(model: &CosModel, task: i64) -> Result<Conditioning, Failure> {
    if task < 0 {
        return Ok(Conditioning::task_agnostic());
    }
    let task = task as usize;
    if task >= model.checkpoint.model.task_count() {
        return fail(CosStatus::InvalidArgument, format!("unknown task {task}"));
    }
    Ok(model.checkpoint.train.conditioning(task))
}

/// Predicts the label of a bag given as `rows x cols` row-major patches.
///
/// A non-negative `task` predicts within that task; a negative `task`
/// predicts over every class learned so far. Up to `cap` token ids are
/// written to `tokens`; `len` receives the full count and `truncated` is
/// set when decoding hit its length limit.
///
/// # Safety
/// `patches` must hold `rows * cols` values; `tokens` must be valid for
/// `cap` entries; `len` must be writable; `truncated` may be null.
#[no_mangle]
pub unsafe extern "C" fn cos_model_predict(
    model: *const CosModel,
    patches: *const f64,
    rows: usize,
    cols: usize,
    task: i64,
    tokens: *mut usize,
    cap: usize,
    len: *mut usize,
    truncated: *mut bool,
) -> CosStatus {
    guard(|| {
        let m = model_arg(model)?;
        let len = out_arg(len, "len")?;
        let bag = bag_arg(m, patches, rows, cols)?;
        let cond = condition(m, task)?;
        let decoded = m.checkpoint.model.predict(&bag, &cond, DEFAULT_MAX_LEN)?;
        *len = decoded.tokens.len();
        if let Some(t) = truncated.as_mut() {
            *t = decoded.truncated;
        }
        if cap < decoded.tokens.len() {
            return fail(CosStatus::BufferTooSmall, format!("need {} tokens", decoded.tokens.len()));
        }
        if !decoded.tokens.is_empty() {
            if tokens.is_null() {
                return fail(CosStatus::NullPointer, "tokens is null");
            }
            ptr::copy_nonoverlapping(decoded.tokens.as_ptr(), tokens, decoded.tokens.len());
        }
        Ok(())
    })
}

/// Writes the bag's head-input representation. `len` receives its width.
///
/// # Safety
/// As for [`cos_model_predict`], with `out` valid for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn cos_model_embedding(
    model: *const CosModel,
    patches: *const f64,
    rows: usize,
    cols: usize,
    task: i64,
    out: *mut f64,
    cap: usize,
    len: *mut usize,
) -> CosStatus {
    guard(|| {
        let m = model_arg(model)?;
        let len = out_arg(len, "len")?;
        let bag = bag_arg(m, patches, rows, cols)?;
        let cond = condition(m, task)?;
        let values = m.checkpoint.model.embedding(&bag, &cond)?;
        *len = values.len();
        if cap < values.len() {
            return fail(CosStatus::BufferTooSmall, format!("need {} values", values.len()));
        }
        if out.is_null() {
            return fail(CosStatus::NullPointer, "out is null");
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
        Ok(())
    })
}

/// Mean silhouette of `n` points of width `dim` (row-major) under `labels`.
///
/// # Safety
/// `points` must hold `n * dim` values and `labels` `n` entries.
#[no_mangle]
pub unsafe extern "C" fn cos_silhouette(
    points: *const f64,
    n: usize,
    dim: usize,
    labels: *const usize,
    out: *mut f64,
) -> CosStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if dim == 0 {
            return fail(CosStatus::InvalidArgument, "dim must be positive");
        }
        let flat = slice_arg(points, n * dim, "points")?;
        let labels = slice_arg(labels, n, "labels")?;
        let rows: Vec<Vec<f64>> = flat.chunks(dim).map(<[f64]>::to_vec).collect();
        *out = silhouette(&rows, labels)?;
        Ok(())
    })
}

/// Average accuracy and forgetting from a `stages x stages` row-major
/// accuracy matrix; entries above the diagonal are ignored. `forgetting`
/// receives `stages - 1` values.
///
/// # Safety
/// `matrix` must hold `stages * stages` values; `forgetting` must be valid
/// for `stages - 1` values when `stages > 1`.
#[no_mangle]
pub unsafe extern "C" fn cos_metrics(
    matrix: *const f64,
    stages: usize,
    average: *mut f64,
    forgetting: *mut f64,
) -> CosStatus {
    guard(|| {
        let average = out_arg(average, "average")?;
        let flat = slice_arg(matrix, stages * stages, "matrix")?;
        let rows = (0..stages).map(|s| flat[s * stages..=s * stages + s].to_vec()).collect();
        let metrics = compute_metrics(&AccuracyMatrix::from_rows(rows)?)?;
        *average = metrics.average_accuracy;
        if !metrics.forgetting.is_empty() {
            if forgetting.is_null() {
                return fail(CosStatus::NullPointer, "forgetting is null");
            }
            ptr::copy_nonoverlapping(metrics.forgetting.as_ptr(), forgetting, metrics.forgetting.len());
        }
        Ok(())
    })
}

/// Generates a synthetic stream into `out_dir`. `config_json` holds a
/// stream configuration; null or missing fields take their defaults.
///
/// # Safety
/// Both strings must be NUL-terminated when non-null.
#[no_mangle]
pub unsafe extern "C" fn cos_stream_generate(config_json: *const c_char, out_dir: *const c_char) -> CosStatus {
    guard(|| {
        let config: StreamConfig = if config_json.is_null() {
            StreamConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .or_else(|e| fail(CosStatus::InvalidArgument, e.to_string()))?
        };
        if let Err(e) = config.validate() {
            return fail(CosStatus::InvalidArgument, e.to_string());
        }
        let out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        write_bags(&make_stream(&config)?, &out)?;
        Ok(())
    })
}
