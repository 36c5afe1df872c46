//! C API for the splatrig library.
//!
//! Every function returns an [`SrStatus`]. On failure the message is kept in
//! thread-local storage and can be read with [`sr_last_error`]. Objects are
//! opaque handles released by their matching `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use splatrig::dataset::{Dataset, Split};
use splatrig::deform::PriorMode;
use splatrig::error::Error;
use splatrig::imgbuf::{Image, Mask};
use splatrig::metrics;
use splatrig::mesh::MorphableMesh;
use splatrig::scene::Camera;
use splatrig::synth::{generate, SynthConfig};
use splatrig::train::{checkpoint, Model, TrainConfig, TrainState};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrStatus {
    Ok = 0,
    Io = 1,
    Load = 2,
    Schema = 3,
    Shape = 4,
    Argument = 5,
    Usage = 6,
    Init = 7,
    Training = 8,
    NullPointer = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrPriorMode {
    Learnable = 0,
    Fixed = 1,
    None = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrSplit {
    Train = 0,
    Setting1 = 1,
    Setting2 = 2,
}

/// Aggregate metrics of one evaluated split.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SrEvalSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_masked: f64,
    pub ssim_masked: f64,
    pub frames: usize,
}

/// A loaded dataset directory.
pub struct SrDataset {
    inner: Dataset,
}

/// A trained model loaded from a checkpoint.
pub struct SrModel {
    model: Model,
    mesh: MorphableMesh,
    cameras: Vec<Camera>,
    iteration: u64,
}

/// Training state bound to the dataset it was created from.
pub struct SrTrainer {
    state: TrainState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SrStatus {
    match e {
        Error::Io { .. } => SrStatus::Io,
        Error::Load { .. } => SrStatus::Load,
        Error::Schema(_) => SrStatus::Schema,
        Error::Shape(_) => SrStatus::Shape,
        Error::Argument(_) => SrStatus::Argument,
        Error::Usage(_) => SrStatus::Usage,
        Error::Init(_) => SrStatus::Init,
        Error::Training(_) => SrStatus::Training,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SrStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            SrStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            SrStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Error::Argument(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn prior(m: SrPriorMode) -> PriorMode {
    match m {
        SrPriorMode::Learnable => PriorMode::Learnable,
        SrPriorMode::Fixed => PriorMode::Fixed,
        SrPriorMode::None => PriorMode::None,
    }
}

fn split(s: SrSplit) -> Split {
    match s {
        SrSplit::Train => Split::Train,
        SrSplit::Setting1 => Split::Setting1,
        SrSplit::Setting2 => Split::Setting2,
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes a synthetic dataset to `out_dir`. Zero width/height keep the default size.
#[no_mangle]
pub unsafe extern "C" fn sr_synth(out_dir: *const c_char, seed: u64, width: usize, height: usize) -> SrStatus {
    guard(|| {
        let out = path_arg(out_dir, "out_dir")?;
        let mut cfg = SynthConfig { seed, ..Default::default() };
        if width > 0 && height > 0 {
            cfg.width = width;
            cfg.height = height;
        }
        generate(&cfg, &out)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sr_dataset_open(path: *const c_char, out: *mut *mut SrDataset) -> SrStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        let out = deref_mut(out, "out")?;
        *out = ptr::null_mut();
        let ds = Dataset::load(&p)?;
        *out = Box::into_raw(Box::new(SrDataset { inner: ds }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sr_dataset_free(ds: *mut SrDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

#[no_mangle]
pub unsafe extern "C" fn sr_dataset_frame_count(ds: *const SrDataset, out: *mut usize) -> SrStatus {
    guard(|| {
        *deref_mut(out, "out")? = deref(ds, "dataset")?.inner.frame_count();
        Ok(())
    })
}

/// Creates a trainer with default settings apart from the given fields.
#[no_mangle]
pub unsafe extern "C" fn sr_trainer_new(
    ds: *const SrDataset,
    mode: SrPriorMode,
    seed: u64,
    iterations: u64,
    out: *mut *mut SrTrainer,
) -> SrStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        let out = deref_mut(out, "out")?;
        *out = ptr::null_mut();
        let mut cfg = TrainConfig { prior_mode: prior(mode), seed, iterations, ..Default::default() };
        cfg.densify_until = cfg.densify_until.min(iterations);
        let state = TrainState::new(&ds.inner, cfg)?;
        *out = Box::into_raw(Box::new(SrTrainer { state }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sr_trainer_free(t: *mut SrTrainer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Runs one iteration; `loss` (optional) receives the weighted total.
#[no_mangle]
pub unsafe extern "C" fn sr_trainer_step(t: *mut SrTrainer, ds: *const SrDataset, loss: *mut f64) -> SrStatus {
    guard(|| {
        let t = deref_mut(t, "trainer")?;
        let ds = deref(ds, "dataset")?;
        let out = t.state.step(&ds.inner)?;
        if let Some(l) = loss.as_mut() {
            *l = out.total;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sr_trainer_gaussian_count(t: *const SrTrainer, out: *mut usize) -> SrStatus {
    guard(|| {
        *deref_mut(out, "out")? = deref(t, "trainer")?.state.model.cloud.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sr_trainer_save(t: *const SrTrainer, ds: *const SrDataset, dir: *const c_char) -> SrStatus {
    guard(|| {
        let t = deref(t, "trainer")?;
        let ds = deref(ds, "dataset")?;
        let dir = path_arg(dir, "dir")?;
        checkpoint::save(&t.state, &ds.inner.mesh, &dir)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sr_model_load(dir: *const c_char, out: *mut *mut SrModel) -> SrStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let out = deref_mut(out, "out")?;
        *out = ptr::null_mut();
        let ck = checkpoint::load(&dir)?;
        let m = SrModel { model: ck.model, mesh: ck.mesh, cameras: ck.manifest.cameras, iteration: ck.manifest.iteration };
        *out = Box::into_raw(Box::new(m));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sr_model_free(m: *mut SrModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

#[no_mangle]
pub unsafe extern "C" fn sr_model_gaussian_count(m: *const SrModel, out: *mut usize) -> SrStatus {
    guard(|| {
        *deref_mut(out, "out")? = deref(m, "model")?.model.cloud.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sr_model_expression_count(m: *const SrModel, out: *mut usize) -> SrStatus {
    guard(|| {
        *deref_mut(out, "out")? = deref(m, "model")?.mesh.expression_count();
        Ok(())
    })
}

/// Image size of camera `camera_index` from the checkpoint's camera table.
#[no_mangle]
pub unsafe extern "C" fn sr_model_camera_size(
    m: *const SrModel,
    camera_index: usize,
    width: *mut usize,
    height: *mut usize,
) -> SrStatus {
    guard(|| {
        let m = deref(m, "model")?;
        let cam = m
            .cameras
            .get(camera_index)
            .ok_or_else(|| Error::Argument(format!("camera index {camera_index} out of range")))?;
        *deref_mut(width, "width")? = cam.width;
        *deref_mut(height, "height")? = cam.height;
        Ok(())
    })
}

/// Renders `(exp, pose)` from a stored camera into `rgb`, row-major
/// interleaved RGB floats in [0, 1]; `rgb_len` must equal 3·W·H.
#[no_mangle]
pub unsafe extern "C" fn sr_model_render(
    m: *const SrModel,
    exp: *const f64,
    exp_len: usize,
    pose: *const f64,
    camera_index: usize,
    rgb: *mut f32,
    rgb_len: usize,
) -> SrStatus {
    guard(|| {
        let m = deref(m, "model")?;
        let exp = slice(exp, exp_len, "exp")?;
        let pose = slice(pose, 4, "pose")?;
        let cam = m
            .cameras
            .get(camera_index)
            .ok_or_else(|| Error::Argument(format!("camera index {camera_index} out of range")))?;
        if rgb_len != 3 * cam.width * cam.height {
            return Err(Error::Shape(format!("output buffer holds {rgb_len} floats, need {}", 3 * cam.width * cam.height)).into());
        }
        if rgb.is_null() {
            return Err(Fail::Null("rgb"));
        }
        let img = m.model.render(&m.mesh, exp, [pose[0], pose[1], pose[2], pose[3]], None, cam)?;
        let out = std::slice::from_raw_parts_mut(rgb, rgb_len);
        for (o, v) in out.iter_mut().zip(&img.data) {
            *o = *v as f32;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sr_model_evaluate(
    m: *const SrModel,
    ds: *const SrDataset,
    which: SrSplit,
    out: *mut SrEvalSummary,
) -> SrStatus {
    guard(|| {
        let m = deref(m, "model")?;
        let ds = deref(ds, "dataset")?;
        let out = deref_mut(out, "out")?;
        let r = metrics::evaluate(&m.model, &ds.inner, split(which), m.iteration)?;
        *out = SrEvalSummary {
            psnr: r.psnr,
            ssim: r.ssim,
            psnr_masked: r.psnr_masked,
            ssim_masked: r.ssim_masked,
            frames: r.frames.len(),
        };
        Ok(())
    })
}

/// PSNR of two interleaved RGB images of `width·height` pixels. `mask` may be
/// NULL; otherwise it holds one byte per pixel, nonzero = selected.
#[no_mangle]
pub unsafe extern "C" fn sr_psnr(
    pred: *const f32,
    gt: *const f32,
    width: usize,
    height: usize,
    mask: *const u8,
    out: *mut f64,
) -> SrStatus {
    guard(|| {
        let n = width * height;
        let to_img = |p: &[f32]| Image::from_data(width, height, p.iter().map(|&v| v as f64).collect());
        let a = to_img(slice(pred, 3 * n, "pred")?)?;
        let b = to_img(slice(gt, 3 * n, "gt")?)?;
        let mask = if mask.is_null() {
            None
        } else {
            Some(Mask { width, height, data: slice(mask, n, "mask")?.iter().map(|&v| v != 0).collect() })
        };
        *deref_mut(out, "out")? = metrics::psnr(&a, &b, mask.as_ref())?;
        Ok(())
    })
}
