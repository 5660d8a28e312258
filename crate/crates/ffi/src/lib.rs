//! C ABI over the dataset generator, motion weights and a trained classifier.
//!
//! Every function returns an [`Mv2maeStatus`]. On failure the message is
//! available from [`mv2mae_last_error_message`] on the same thread until the
//! next call fails.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mv2mae::model::{ModelConfig, ModelParams};
use mv2mae::objective::motion_weights;
use mv2mae::synthdata::{generate_dataset, Dataset, GenConfig};
use mv2mae::tokenizer::{standardize_clip, PatchConfig};
use mv2mae::training::{evaluate, late_fuse, model_clip, Crop, EvalConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mv2maeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Opaque dataset handle.
pub struct Mv2maeDataset(Dataset);

/// Opaque model handle holding a classifier checkpoint.
pub struct Mv2maeModel {
    config: ModelConfig,
    params: ModelParams<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Fail(Mv2maeStatus, String);

impl From<mv2mae::Error> for Fail {
    fn from(e: mv2mae::Error) -> Self {
        use mv2mae::Error as E;
        let code = match &e {
            E::Config { .. } => Mv2maeStatus::Config,
            E::Io { .. } => Mv2maeStatus::Io,
            E::Format { .. } | E::Checkpoint { .. } => Mv2maeStatus::Format,
            E::Shape { .. } | E::InvalidArgument { .. } => Mv2maeStatus::InvalidArgument,
            _ => Mv2maeStatus::Internal,
        };
        Fail(code, e.to_string())
    }
}

fn fail(code: Mv2maeStatus, msg: impl Into<String>) -> Fail {
    Fail(code, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> Mv2maeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => Mv2maeStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside mv2mae");
            Mv2maeStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(fail(Mv2maeStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(Mv2maeStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| fail(Mv2maeStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(fail(Mv2maeStatus::NullPointer, "output buffer is null"));
    }
    if len < need {
        return Err(fail(
            Mv2maeStatus::BufferTooSmall,
            format!("need {need} values, buffer holds {len}"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

/// Message of the last failed call on this thread; empty if none. The pointer
/// stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn mv2mae_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Renders a dataset with uniform class frequencies and writes it to `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mv2mae_dataset_generate(
    seed: u64,
    n_samples: usize,
    n_views: usize,
    n_classes: usize,
    frames: usize,
    size: usize,
    path: *const c_char,
) -> Mv2maeStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let ds = generate_dataset(&GenConfig::uniform(seed, n_samples, n_views, n_classes, frames, size))?;
        ds.write(&path)?;
        Ok(())
    })
}

/// Reads a dataset file. Free the handle with [`mv2mae_dataset_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv2mae_dataset_open(path: *const c_char, out: *mut *mut Mv2maeDataset) -> Mv2maeStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(Mv2maeStatus::NullPointer, "out is null"));
        }
        let ds = Dataset::read(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(Mv2maeDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`mv2mae_dataset_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mv2mae_dataset_free(ds: *mut Mv2maeDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Sample and view counts plus the `[channels, frames, height, width]` of each clip.
///
/// # Safety
/// `ds` must be a live handle; the output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn mv2mae_dataset_shape(
    ds: *const Mv2maeDataset,
    n_samples: *mut usize,
    n_views: *mut usize,
    dims: *mut usize,
) -> Mv2maeStatus {
    guard(|| {
        let d = &deref(ds, "dataset")?.0;
        if let Some(p) = n_samples.as_mut() {
            *p = d.samples.len();
        }
        if let Some(p) = n_views.as_mut() {
            *p = d.n_views;
        }
        if !dims.is_null() {
            std::slice::from_raw_parts_mut(dims, 4).copy_from_slice(&[d.channels, d.frames, d.height, d.width]);
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and `label` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv2mae_dataset_label(
    ds: *const Mv2maeDataset,
    sample: usize,
    label: *mut u32,
) -> Mv2maeStatus {
    guard(|| {
        let d = &deref(ds, "dataset")?.0;
        let s = d
            .samples
            .get(sample)
            .ok_or_else(|| fail(Mv2maeStatus::InvalidArgument, format!("sample {sample} out of range")))?;
        *label
            .as_mut()
            .ok_or_else(|| fail(Mv2maeStatus::NullPointer, "label is null"))? = s.label;
        Ok(())
    })
}

/// Motion weights of one view over the longest prefix of frames that the
/// temporal patch size divides. Writes one weight per token into `out` and the count
/// into `written`.
///
/// # Safety
/// `ds` must be a live handle, `out` must hold `len` doubles, `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn mv2mae_motion_weights(
    ds: *const Mv2maeDataset,
    sample: usize,
    view: usize,
    patch_t: usize,
    patch_h: usize,
    patch_w: usize,
    temperature: f64,
    out: *mut f64,
    len: usize,
    written: *mut usize,
) -> Mv2maeStatus {
    guard(|| {
        let d = &deref(ds, "dataset")?.0;
        let clip = d.samples.get(sample).and_then(|s| s.clips.get(view)).ok_or_else(|| {
            fail(
                Mv2maeStatus::InvalidArgument,
                format!("sample {sample} view {view} out of range"),
            )
        })?;
        let frames = d.frames - d.frames % patch_t.max(1);
        let patch = PatchConfig::new((patch_t, patch_h, patch_w), d.channels, (frames, d.height, d.width))?;
        let clip = standardize_clip(&model_clip(clip, 0, Crop::full(d.height, d.width), &patch));
        let w = motion_weights(&clip, &patch, temperature)?.weights;
        out_slice(out, len, w.len())?.copy_from_slice(&w);
        if let Some(p) = written.as_mut() {
            *p = w.len();
        }
        Ok(())
    })
}

/// Loads a fine-tuned checkpoint. Free with [`mv2mae_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv2mae_model_load(path: *const c_char, out: *mut *mut Mv2maeModel) -> Mv2maeStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(Mv2maeStatus::NullPointer, "out is null"));
        }
        let (config, params) = mv2mae::cli::viz::load_model(&path_arg(path, "path")?)?;
        if config.n_classes == 0 {
            return Err(fail(Mv2maeStatus::InvalidArgument, "checkpoint has no classifier head"));
        }
        *out = Box::into_raw(Box::new(Mv2maeModel { config, params }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from [`mv2mae_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mv2mae_model_free(m: *mut Mv2maeModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle and `n` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv2mae_model_num_classes(m: *const Mv2maeModel, n: *mut usize) -> Mv2maeStatus {
    guard(|| {
        let m = deref(m, "model")?;
        *n.as_mut().ok_or_else(|| fail(Mv2maeStatus::NullPointer, "n is null"))? = m.config.n_classes;
        Ok(())
    })
}

/// Logits for one sample from a single full-frame clip of each listed view,
/// averaged over the views. Writes `n_classes` values into `out`.
///
/// # Safety
/// `m` and `ds` must be live handles, `views` must hold `n_views` entries and
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mv2mae_model_classify(
    m: *const Mv2maeModel,
    ds: *const Mv2maeDataset,
    sample: usize,
    views: *const usize,
    n_views: usize,
    out: *mut f64,
    len: usize,
) -> Mv2maeStatus {
    guard(|| {
        let m = deref(m, "model")?;
        let d = &deref(ds, "dataset")?.0;
        if views.is_null() || n_views == 0 {
            return Err(fail(Mv2maeStatus::InvalidArgument, "at least one view is required"));
        }
        let views = std::slice::from_raw_parts(views, n_views).to_vec();
        let s = d
            .samples
            .get(sample)
            .ok_or_else(|| fail(Mv2maeStatus::InvalidArgument, format!("sample {sample} out of range")))?;
        let one = Dataset {
            n_views: d.n_views,
            channels: d.channels,
            frames: d.frames,
            height: d.height,
            width: d.width,
            samples: vec![s.clone()],
        };
        let r = evaluate(
            &one,
            &m.params,
            &m.config,
            &EvalConfig {
                n_clips: 1,
                n_crops: 1,
                views,
            },
        )?;
        out_slice(out, len, r.fused[0].len())?.copy_from_slice(&r.fused[0]);
        Ok(())
    })
}

/// Mean of `n_views` logit rows of `n_classes` each, laid out row-major in
/// `logits`. Writes the fused row to `out` and its argmax to `prediction`.
///
/// # Safety
/// `logits` must hold `n_views * n_classes` doubles, `out` `n_classes`;
/// `prediction` may be null.
#[no_mangle]
pub unsafe extern "C" fn mv2mae_late_fuse(
    logits: *const f64,
    n_views: usize,
    n_classes: usize,
    out: *mut f64,
    prediction: *mut usize,
) -> Mv2maeStatus {
    guard(|| {
        if logits.is_null() {
            return Err(fail(Mv2maeStatus::NullPointer, "logits is null"));
        }
        let flat = std::slice::from_raw_parts(logits, n_views * n_classes);
        let rows: Vec<Vec<f64>> = flat.chunks(n_classes.max(1)).map(<[f64]>::to_vec).collect();
        let (fused, pred) = late_fuse(&[rows])?;
        out_slice(out, n_classes, n_classes)?.copy_from_slice(&fused[0]);
        if let Some(p) = prediction.as_mut() {
            *p = pred[0];
        }
        Ok(())
    })
}
