//! C interface: opaque model and bag handles, status codes and a per-thread
//! last-error message.
//!
//! Every function returns a [`MecStatus`]; on failure,
//! [`mec_last_error_message`] describes what went wrong. Handles are owned by
//! the caller and released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mecformer::data::{read_bag_file, FeatureBag, TaskSpec};
use mecformer::ecn::TaskIndicator;
use mecformer::eval::{penalized_overall, silhouette};
use mecformer::model::{read_checkpoint, Mecformer};
use mecformer::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Contract = 6,
    Incompatible = 7,
    Shape = 8,
    BufferTooSmall = 9,
    Panic = 10,
    Other = 11,
}

/// A loaded checkpoint together with the task spec it was trained with.
pub struct MecModel {
    model: Mecformer,
    spec: TaskSpec,
}

/// A feature bag read from disk.
pub struct MecBag {
    bag: FeatureBag,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> MecStatus {
    match e {
        Error::Io { .. } => MecStatus::Io,
        Error::Format { .. } | Error::RawFormat(_) | Error::Json(_) => MecStatus::Format,
        Error::Config(_) => MecStatus::Config,
        Error::Contract(_) => MecStatus::Contract,
        Error::Incompatible(_) => MecStatus::Incompatible,
        Error::Shape { .. } => MecStatus::Shape,
        _ => MecStatus::Other,
    }
}

struct Failure(MecStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> MecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MecStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MecStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(MecStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    non_null(p, what)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MecStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn write_string(s: &str, buf: *mut c_char, cap: usize, len: *mut usize) -> Result<(), Failure> {
    non_null(len, "length output")?;
    *len = s.len();
    if buf.is_null() || cap <= s.len() {
        return Err(Failure(
            MecStatus::BufferTooSmall,
            format!("{} bytes plus terminator needed, buffer holds {cap}", s.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mec_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mec_model_load(path: *const c_char, out: *mut *mut MecModel) -> MecStatus {
    guard(|| {
        non_null(out, "output handle")?;
        let path = path_arg(path, "path")?;
        let ckpt = read_checkpoint(path)?;
        let spec = TaskSpec::from_json(&ckpt.metadata).map_err(|e| {
            Failure(
                MecStatus::Incompatible,
                format!("checkpoint carries no valid task spec: {e}"),
            )
        })?;
        let model = ckpt.into_model()?;
        *out = Box::into_raw(Box::new(MecModel { model, spec }));
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must come from [`mec_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mec_model_free(model: *mut MecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature width and task count of a model.
///
/// # Safety
/// `model` must be a live handle; outputs may be null when not wanted.
#[no_mangle]
pub unsafe extern "C" fn mec_model_shape(model: *const MecModel, d_f: *mut usize, tasks: *mut usize) -> MecStatus {
    guard(|| {
        non_null(model, "model")?;
        let c = (*model).model.config();
        if !d_f.is_null() {
            *d_f = c.d_f;
        }
        if !tasks.is_null() {
            *tasks = c.tasks;
        }
        Ok(())
    })
}

/// Greedily decodes a bag of `n_patches × d_f` row-major features for task
/// `task` (zero-based). The term is written NUL-terminated to `term`; `*len`
/// receives its byte length even when the buffer is too small.
///
/// # Safety
/// `features` must hold `n_patches * d_f` floats; `term` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn mec_model_generate(
    model: *const MecModel,
    features: *const f32,
    n_patches: usize,
    d_f: usize,
    task: usize,
    term: *mut c_char,
    cap: usize,
    len: *mut usize,
    truncated: *mut bool,
) -> MecStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(features, "features")?;
        let m = &*model;
        let count = n_patches
            .checked_mul(d_f)
            .ok_or_else(|| Failure(MecStatus::Shape, "feature count overflows".into()))?;
        if count == 0 {
            return Err(Failure(MecStatus::Shape, "empty bag".into()));
        }
        let data: Vec<f64> = std::slice::from_raw_parts(features, count)
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let x = Tensor::new(vec![n_patches, d_f], data)?;
        let indicator = TaskIndicator::new(task, m.spec.task_count())?;
        let g = m.model.generate(&x, indicator)?;
        let text = m.spec.detokenize(&g.tokens)?;
        if !truncated.is_null() {
            *truncated = g.truncated;
        }
        write_string(&text, term, cap, len)
    })
}

/// Reads a bag file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mec_bag_read(path: *const c_char, out: *mut *mut MecBag) -> MecStatus {
    guard(|| {
        non_null(out, "output handle")?;
        let bag = read_bag_file(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(MecBag { bag }));
        Ok(())
    })
}

/// # Safety
/// `bag` must come from [`mec_bag_read`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mec_bag_free(bag: *mut MecBag) {
    if !bag.is_null() {
        drop(Box::from_raw(bag));
    }
}

/// Shape, task and a borrowed pointer to the row-major features, valid while
/// the handle lives.
///
/// # Safety
/// `bag` must be a live handle; outputs may be null when not wanted.
#[no_mangle]
pub unsafe extern "C" fn mec_bag_info(
    bag: *const MecBag,
    n_patches: *mut usize,
    d_f: *mut usize,
    task: *mut usize,
    features: *mut *const f32,
) -> MecStatus {
    guard(|| {
        non_null(bag, "bag")?;
        let b = &(*bag).bag;
        if !n_patches.is_null() {
            *n_patches = b.patches();
        }
        if !d_f.is_null() {
            *d_f = b.d_f();
        }
        if !task.is_null() {
            *task = b.task_id;
        }
        if !features.is_null() {
            *features = b.features().as_ptr();
        }
        Ok(())
    })
}

/// Label term of a bag, written like [`mec_model_generate`]'s term.
///
/// # Safety
/// `bag` must be a live handle; `term` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn mec_bag_label(bag: *const MecBag, term: *mut c_char, cap: usize, len: *mut usize) -> MecStatus {
    guard(|| {
        non_null(bag, "bag")?;
        write_string(&(*bag).bag.label_term, term, cap, len)
    })
}

/// `Σ m_i / (n_c + n_ood)` over `n_c` per-category values.
///
/// # Safety
/// `per_category` must hold `n_c` doubles.
#[no_mangle]
pub unsafe extern "C" fn mec_penalized_overall(
    per_category: *const f64,
    n_c: usize,
    n_ood: usize,
    out: *mut f64,
) -> MecStatus {
    guard(|| {
        non_null(out, "output")?;
        let m: &[f64] = if n_c == 0 {
            &[]
        } else {
            non_null(per_category, "per_category")?;
            std::slice::from_raw_parts(per_category, n_c)
        };
        *out = penalized_overall(m, n_ood)?;
        Ok(())
    })
}

/// Mean silhouette of `count` row-major points of width `dim`.
///
/// # Safety
/// `points` must hold `count * dim` doubles and `labels` `count` values.
#[no_mangle]
pub unsafe extern "C" fn mec_silhouette(
    points: *const f64,
    count: usize,
    dim: usize,
    labels: *const usize,
    out: *mut f64,
) -> MecStatus {
    guard(|| {
        non_null(out, "output")?;
        non_null(points, "points")?;
        non_null(labels, "labels")?;
        let total = count
            .checked_mul(dim)
            .ok_or_else(|| Failure(MecStatus::Shape, "point count overflows".into()))?;
        let flat = std::slice::from_raw_parts(points, total);
        let rows: Vec<Vec<f64>> = if dim == 0 {
            vec![Vec::new(); count]
        } else {
            flat.chunks(dim).map(<[f64]>::to_vec).collect()
        };
        *out = silhouette(&rows, std::slice::from_raw_parts(labels, count))?;
        Ok(())
    })
}
