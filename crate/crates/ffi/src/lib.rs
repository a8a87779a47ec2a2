//! C ABI over the captioning pipeline.
//!
//! Every fallible function returns an [`OabtgStatus`]; on failure the
//! message is available from [`oabtg_last_error_message`] on the same thread.
//! Strings returned through out-parameters are owned by the caller and must
//! be released with [`oabtg_string_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use oabtg::btg::{area_similarity, build_bidirectional_trajectories, iou_similarity, BoundingBox, TrajectorySetJson};
use oabtg::dataio::{load_manifest, tokenize, Dataset};
use oabtg::inference::{caption_video, FusionMode};
use oabtg::metrics::bleu4;
use oabtg::training::Checkpoint;
use oabtg::Error;

/// Result codes. The non-zero values below 5 match the command line exit
/// codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OabtgStatus {
    Ok = 0,
    /// Bad configuration or argument value.
    Usage = 2,
    /// Malformed or inconsistent input data.
    Data = 3,
    /// Numeric failure or violated internal contract.
    Numeric = 4,
    NullPointer = 5,
    InvalidUtf8 = 6,
    Panic = 7,
}

/// Fusion of the two directional word distributions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OabtgFusion {
    /// Whatever the checkpoint was trained with.
    Default = 0,
    Mean = 1,
    Geometric = 2,
}

/// A loaded checkpoint.
pub struct OabtgModel {
    checkpoint: Checkpoint,
}

/// An opened feature manifest.
pub struct OabtgDataset {
    dataset: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> OabtgStatus {
    match e.exit_code() {
        2 => OabtgStatus::Usage,
        3 => OabtgStatus::Data,
        _ => OabtgStatus::Numeric,
    }
}

struct Failure(OabtgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OabtgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            OabtgStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            OabtgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(OabtgStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(OabtgStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(OabtgStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(OabtgStatus::NullPointer, format!("{name} is null")))
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

fn json_failure(e: serde_json::Error) -> Failure {
    Failure(OabtgStatus::Data, format!("malformed json: {e}"))
}

/// Message of the last failure on this thread, or null. Valid until the next
/// call into this library on the same thread.
#[no_mangle]
pub extern "C" fn oabtg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn oabtg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn oabtg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn oabtg_model_load(path: *const c_char, out: *mut *mut OabtgModel) -> OabtgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let checkpoint = Checkpoint::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(OabtgModel { checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`oabtg_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn oabtg_model_free(model: *mut OabtgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of the model, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn oabtg_model_vocab_size(model: *const OabtgModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.vocab.len())
}

/// Opens and validates a feature manifest.
///
/// # Safety
/// `manifest_path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn oabtg_dataset_open(manifest_path: *const c_char, out: *mut *mut OabtgDataset) -> OabtgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let dataset = load_manifest(Path::new(str_arg(manifest_path, "manifest_path")?))?;
        *out = Box::into_raw(Box::new(OabtgDataset { dataset }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`oabtg_dataset_open`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn oabtg_dataset_free(dataset: *mut OabtgDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of videos, or 0 for null.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn oabtg_dataset_len(dataset: *const OabtgDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.dataset.len())
}

/// Id of the video at `index`.
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn oabtg_dataset_video_id(
    dataset: *const OabtgDataset,
    index: usize,
    out: *mut *mut c_char,
) -> OabtgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let d = ref_arg(dataset, "dataset")?;
        let entry = d
            .dataset
            .entries()
            .get(index)
            .ok_or_else(|| Failure(OabtgStatus::Usage, format!("index {index} out of range")))?;
        *out = owned_string(entry.video_id.clone());
        Ok(())
    })
}

/// Captions one video. Writes `{"video_id","caption","score","tokens"}` as
/// JSON. A zero `beam` uses the checkpoint's width.
///
/// # Safety
/// Handles must be live, `video_id` nul-terminated and `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn oabtg_caption(
    model: *const OabtgModel,
    dataset: *const OabtgDataset,
    video_id: *const c_char,
    beam: usize,
    fusion: OabtgFusion,
    out_json: *mut *mut c_char,
) -> OabtgStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let m = ref_arg(model, "model")?;
        let d = ref_arg(dataset, "dataset")?;
        let video = d.dataset.load_by_id(str_arg(video_id, "video_id")?)?;
        let ckpt = &m.checkpoint;
        let beam = if beam == 0 { ckpt.config.beam } else { beam };
        let fusion = match fusion {
            OabtgFusion::Default => ckpt.config.fusion,
            OabtgFusion::Mean => FusionMode::Mean,
            OabtgFusion::Geometric => FusionMode::Geometric,
        };
        let caption = caption_video(ckpt, &video, beam, fusion)?;
        *out = owned_string(serde_json::to_string(&caption).map_err(json_failure)?);
        Ok(())
    })
}

/// Forward and backward trajectories of one video as JSON, 1-based indices.
///
/// # Safety
/// `dataset` must be live, `video_id` nul-terminated and `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn oabtg_trace_graph(
    dataset: *const OabtgDataset,
    video_id: *const c_char,
    out_json: *mut *mut c_char,
) -> OabtgStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let d = ref_arg(dataset, "dataset")?;
        let id = str_arg(video_id, "video_id")?;
        let video = d.dataset.load_by_id(id)?;
        let set = build_bidirectional_trajectories(&video)?;
        *out = owned_string(serde_json::to_string(&TrajectorySetJson::new(id, &set)).map_err(json_failure)?);
        Ok(())
    })
}

/// Corpus BLEU@4. `candidates_json` maps video id to a caption string;
/// `references_json` maps video id to a list of reference strings.
///
/// # Safety
/// Strings must be nul-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn oabtg_bleu4(
    candidates_json: *const c_char,
    references_json: *const c_char,
    out: *mut f64,
) -> OabtgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cands: BTreeMap<String, String> =
            serde_json::from_str(str_arg(candidates_json, "candidates_json")?).map_err(json_failure)?;
        let refs: BTreeMap<String, Vec<String>> =
            serde_json::from_str(str_arg(references_json, "references_json")?).map_err(json_failure)?;
        let cands = cands.into_iter().map(|(k, v)| (k, tokenize(&v))).collect();
        let refs = refs
            .into_iter()
            .map(|(k, v)| (k, v.iter().map(|s| tokenize(s)).collect()))
            .collect();
        *out = bleu4(&cands, &refs)?.bleu4;
        Ok(())
    })
}

unsafe fn box_arg(p: *const f64, name: &str) -> Result<BoundingBox, Failure> {
    if p.is_null() {
        return Err(Failure(OabtgStatus::NullPointer, format!("{name} is null")));
    }
    let v = std::slice::from_raw_parts(p, 4);
    Ok(BoundingBox::new(v[0], v[1], v[2], v[3])?)
}

/// Intersection over union of two `[x_min, y_min, x_max, y_max]` boxes.
///
/// # Safety
/// `a` and `b` must each point to four doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn oabtg_iou_similarity(a: *const f64, b: *const f64, out: *mut f64) -> OabtgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = iou_similarity(&box_arg(a, "a")?, &box_arg(b, "b")?);
        Ok(())
    })
}

/// Area similarity `exp(-|min/max - 1|)` of two boxes.
///
/// # Safety
/// As for [`oabtg_iou_similarity`].
#[no_mangle]
pub unsafe extern "C" fn oabtg_area_similarity(a: *const f64, b: *const f64, out: *mut f64) -> OabtgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = area_similarity(&box_arg(a, "a")?, &box_arg(b, "b")?);
        Ok(())
    })
}
