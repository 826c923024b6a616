//! C ABI for fusiongan.
//!
//! Every fallible call returns an [`FgStatus`]; on failure a message for the
//! calling thread is available from [`fg_last_error`]. Images cross the
//! boundary as planar `3 x res x res` arrays of doubles in `[0, 1]`.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fusiongan::data::{generate_holdout, generate_sets, load_image_dirs, save_sets, IdentitySet};
use fusiongan::engine::Tensor;
use fusiongan::eval::{modified_oks, DetectedPoint, LandmarkSet, PENALTY_PX, SIGMA_FRAC};
use fusiongan::nets::{Checkpoint, Generator};
use fusiongan::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numerical = 4,
    Panic = 5,
}

/// A landmark as seen by C callers.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FgPoint {
    pub x: f64,
    pub y: f64,
    pub present: bool,
}

/// Loaded generator.
pub struct FgModel {
    generator: Generator,
    res: usize,
    iteration: u64,
}

/// In-memory collection of identity sets.
pub struct FgDataset {
    sets: Vec<IdentitySet>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FgStatus {
    match e {
        Error::Io { .. } | Error::Data { .. } | Error::Load(_) => FgStatus::Io,
        Error::NonFinite { .. } => FgStatus::Numerical,
        _ => FgStatus::InvalidArgument,
    }
}

struct Failure(FgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(FgStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(FgStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic for [`fg_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            FgStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn image_arg(p: *const f64, len: usize, res: usize, what: &str) -> Result<Tensor, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let want = 3 * res * res;
    if len != want {
        return Err(invalid(format!("{what} has {len} values, expected {want} (3 x {res} x {res})")));
    }
    let data = std::slice::from_raw_parts(p, len).to_vec();
    Ok(Tensor::new(vec![3, res, res], data)?)
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message for the most recent failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint and returns its generator in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_model_load(path: *const c_char, out: *mut *mut FgModel) -> FgStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(&path)?;
        let model = FgModel {
            res: ck.net.res,
            iteration: ck.iteration,
            generator: ck.generator,
        };
        write_out(out, Box::into_raw(Box::new(model)), "out")
    })
}

/// Image side length the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a handle from [`fg_model_load`].
#[no_mangle]
pub unsafe extern "C" fn fg_model_resolution(model: *const FgModel) -> usize {
    model.as_ref().map_or(0, |m| m.res)
}

/// Training iteration stored in the checkpoint, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a handle from [`fg_model_load`].
#[no_mangle]
pub unsafe extern "C" fn fg_model_iteration(model: *const FgModel) -> u64 {
    model.as_ref().map_or(0, |m| m.iteration)
}

/// Fuses the identity of `x` with the shape of `y`. All three buffers hold
/// `len = 3 * res * res` doubles.
///
/// # Safety
/// `model` must come from [`fg_model_load`]; `x`, `y` and `out` must each point
/// to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fg_model_fuse(
    model: *const FgModel,
    x: *const f64,
    y: *const f64,
    len: usize,
    out: *mut f64,
) -> FgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let xt = image_arg(x, len, m.res, "x")?;
        let yt = image_arg(y, len, m.res, "y")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let fused = m.generator.forward(&xt, &yt)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(fused.data());
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`fg_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fg_model_free(model: *mut FgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Renders a synthetic dataset. With `holdout` set, the same identities are
/// rendered with instances disjoint from the training ones.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_dataset_generate(
    n_sets: usize,
    n_per_set: usize,
    res: usize,
    seed: u64,
    holdout: bool,
    out: *mut *mut FgDataset,
) -> FgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let sets = if holdout {
            generate_holdout(n_sets, n_per_set, res, seed)?
        } else {
            generate_sets(n_sets, n_per_set, res, seed)?
        };
        write_out(out, Box::into_raw(Box::new(FgDataset { sets })), "out")
    })
}

/// Loads a dataset directory (one sub-directory of PNGs per set).
///
/// # Safety
/// `root` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_dataset_load(root: *const c_char, out: *mut *mut FgDataset) -> FgStatus {
    guard(|| {
        let root = path_arg(root, "root")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let sets = load_image_dirs(&root)?;
        write_out(out, Box::into_raw(Box::new(FgDataset { sets })), "out")
    })
}

/// Writes the dataset as PNGs plus per-set `specs.json`.
///
/// # Safety
/// `ds` must come from a dataset constructor; `root` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fg_dataset_save(ds: *const FgDataset, root: *const c_char) -> FgStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let root = path_arg(root, "root")?;
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        save_sets(&ds.sets, &root)?;
        Ok(())
    })
}

/// Number of sets, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fg_dataset_num_sets(ds: *const FgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.sets.len())
}

/// Number of images in set `set`, or 0 when out of range.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fg_dataset_set_len(ds: *const FgDataset, set: usize) -> usize {
    ds.as_ref().and_then(|d| d.sets.get(set)).map_or(0, IdentitySet::len)
}

/// Image side length, or 0 for a null or empty dataset.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fg_dataset_resolution(ds: *const FgDataset) -> usize {
    ds.as_ref().and_then(|d| d.sets.first()).and_then(IdentitySet::resolution).unwrap_or(0)
}

/// Copies image `index` of set `set` into `out` (`len = 3 * res * res`).
///
/// # Safety
/// `ds` must be a live dataset handle and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fg_dataset_image(ds: *const FgDataset, set: usize, index: usize, out: *mut f64, len: usize) -> FgStatus {
    guard(|| {
        let d = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let s = d.sets.get(set).ok_or_else(|| invalid(format!("set {set} out of range ({})", d.sets.len())))?;
        let inst = s
            .instances
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range ({})", s.len())))?;
        let data = inst.image.data();
        if len != data.len() {
            return Err(invalid(format!("buffer holds {len} values, image has {}", data.len())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(data);
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a dataset handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fg_dataset_free(ds: *mut FgDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Keypoint similarity between `k` reference and `k` generated landmarks on a
/// `res x res` image, with the default tolerance and missed-point penalty.
///
/// # Safety
/// `reference` and `generated` must each point to `k` points; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fg_modified_oks(
    reference: *const FgPoint,
    generated: *const FgPoint,
    k: usize,
    res: usize,
    out: *mut f64,
) -> FgStatus {
    guard(|| {
        if reference.is_null() || generated.is_null() {
            return Err(null("landmark array"));
        }
        let to_set = |p: *const FgPoint| LandmarkSet {
            points: std::slice::from_raw_parts(p, k)
                .iter()
                .enumerate()
                .map(|(i, q)| DetectedPoint {
                    name: format!("p{i}"),
                    x: q.x,
                    y: q.y,
                    present: q.present,
                })
                .collect(),
            res,
        };
        let score = modified_oks(&to_set(reference), &to_set(generated), SIGMA_FRAC, PENALTY_PX)?;
        write_out(out, score, "out")
    })
}
