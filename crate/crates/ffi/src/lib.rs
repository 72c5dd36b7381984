//! C ABI over the polarbev pipeline. Objects cross the boundary as opaque
//! handles; every fallible call returns a [`PbStatus`] and leaves a message
//! for [`pb_last_error`] on the calling thread. Panics are caught and
//! reported as [`PbStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use polarbev::config::RunConfig;
use polarbev::geometry::{rotated_iou_bev, BoxBev};
use polarbev::head::{detections_to_jsonl, rectify_scores, Detection};
use polarbev::model::{init_params, Pipeline};
use polarbev::streaming::{run_streaming, LatencyModel};
use polarbev::synth::{generate, Scene, SceneConfig};
use polarbev::train::Checkpoint;
use polarbev::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Panic = 6,
}

/// A point cloud with its labeled boxes.
pub struct PbScene(Scene);

/// Grid, weights, decoding and latency settings.
pub struct PbModel {
    pipeline: Pipeline,
    latency: LatencyModel,
}

/// Detections owned by the library.
pub struct PbDetections(Vec<Detection>);

/// One detection: `bbox` is `[cx, cy, cz, w, l, h, theta]`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PbDetection {
    pub bbox: [f64; 7],
    /// Rectified score.
    pub score: f64,
    pub iou_pred: f64,
    pub cls: u32,
}

/// Summary of one streamed sweep.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PbStreamSummary {
    pub n_sectors: u32,
    pub n_detections: usize,
    /// Seconds.
    pub mean_latency: f64,
    /// Seconds.
    pub max_latency: f64,
    /// Fine grid cells held for one sector.
    pub peak_cells: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(PbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => PbStatus::Io,
            Error::Json { .. } | Error::Format { .. } => PbStatus::Format,
            _ => PbStatus::Config,
        };
        Failure(code, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(PbStatus::InvalidArgument, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, records its error message and maps panics to `Panic`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PbStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            PbStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(PbStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(PbStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    let s = deref(p, "path")?;
    let s = CStr::from_ptr(s).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

fn into_handle<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn pb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// BEV IoU of two rotated boxes given as `[cx, cy, w, h, theta]`.
///
/// # Safety
/// `a` and `b` point to 5 doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pb_rotated_iou_bev(a: *const [f64; 5], b: *const [f64; 5], out: *mut f64) -> PbStatus {
    guard(|| {
        let mk = |v: &[f64; 5]| BoxBev::new(v[0], v[1], v[2], v[3], v[4]).map_err(|e| invalid(e.to_string()));
        let (a, b) = (mk(deref(a, "a")?)?, mk(deref(b, "b")?)?);
        *out_ptr(out, "out")? = rotated_iou_bev(&a, &b);
        Ok(())
    })
}

/// `score * iou_pred^alpha`.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pb_rectify_score(score: f64, iou_pred: f64, alpha: f64, out: *mut f64) -> PbStatus {
    guard(|| {
        if !(score.is_finite() && iou_pred.is_finite() && alpha.is_finite()) || alpha < 0.0 {
            return Err(invalid("score, iou and alpha must be finite with alpha >= 0"));
        }
        *out_ptr(out, "out")? = rectify_scores(score, iou_pred, alpha);
        Ok(())
    })
}

/// Synthetic scene from the default generator settings.
///
/// # Safety
/// `out` is writable; the handle is released with [`pb_scene_free`].
#[no_mangle]
pub unsafe extern "C" fn pb_scene_generate(seed: u64, out: *mut *mut PbScene) -> PbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = into_handle(PbScene(generate(&SceneConfig::default(), seed)?));
        Ok(())
    })
}

/// Scene from a JSON file written by the `synth` command.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pb_scene_load(path: *const c_char, out: *mut *mut PbScene) -> PbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = into_handle(PbScene(Scene::load(path_arg(path)?)?));
        Ok(())
    })
}

/// # Safety
/// `scene` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pb_scene_point_count(scene: *const PbScene, out: *mut usize) -> PbStatus {
    guard(|| {
        *out_ptr(out, "out")? = deref(scene, "scene")?.0.cloud.len();
        Ok(())
    })
}

/// # Safety
/// `scene` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pb_scene_free(scene: *mut PbScene) {
    free_handle(scene)
}

/// Model from a checkpoint directory written by `train`.
///
/// # Safety
/// `dir` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pb_model_load(dir: *const c_char, out: *mut *mut PbModel) -> PbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ck = Checkpoint::load(path_arg(dir)?)?;
        let cfg = ck.config;
        let pipeline = Pipeline::new(cfg.grid_spec()?, cfg.model, ck.params, cfg.decode)?;
        *out = into_handle(PbModel { pipeline, latency: cfg.stream.latency });
        Ok(())
    })
}

/// Untrained reference model with weights drawn from `seed`.
///
/// # Safety
/// `out` is writable; the handle is released with [`pb_model_free`].
#[no_mangle]
pub unsafe extern "C" fn pb_model_init(seed: u64, out: *mut *mut PbModel) -> PbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = RunConfig::reference();
        let params = init_params(&cfg.model, seed);
        let pipeline = Pipeline::new(cfg.grid_spec()?, cfg.model, params, cfg.decode)?;
        *out = into_handle(PbModel { pipeline, latency: cfg.stream.latency });
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pb_model_free(model: *mut PbModel) {
    free_handle(model)
}

/// Detections on `scene`, processed as `n_sectors` azimuth sectors
/// (1 is the full sweep) and concatenated in sector order.
///
/// # Safety
/// `model` and `scene` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pb_model_infer(model: *const PbModel, scene: *const PbScene, n_sectors: u32, out: *mut *mut PbDetections) -> PbStatus {
    guard(|| {
        let (m, s) = (deref(model, "model")?, deref(scene, "scene")?);
        let out = out_ptr(out, "out")?;
        let dets = match n_sectors {
            0 => return Err(invalid("n_sectors must be positive")),
            1 => m.pipeline.detect(&s.0.cloud),
            n => m.pipeline.detect_sectors(&s.0.cloud, n as usize)?.concat(),
        };
        *out = into_handle(PbDetections(dets));
        Ok(())
    })
}

/// Streams `scene` through `n_sectors` sectors under the model's latency
/// settings.
///
/// # Safety
/// `model` and `scene` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pb_stream_report(model: *const PbModel, scene: *const PbScene, n_sectors: u32, out: *mut PbStreamSummary) -> PbStatus {
    guard(|| {
        let (m, s) = (deref(model, "model")?, deref(scene, "scene")?);
        let out = out_ptr(out, "out")?;
        let rep = run_streaming(&s.0.cloud, n_sectors as usize, &m.pipeline, &m.latency)?;
        *out = PbStreamSummary {
            n_sectors,
            n_detections: rep.detections().len(),
            mean_latency: rep.mean_latency,
            max_latency: rep.max_latency,
            peak_cells: rep.peak_cells,
        };
        Ok(())
    })
}

/// # Safety
/// `dets` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pb_detections_len(dets: *const PbDetections, out: *mut usize) -> PbStatus {
    guard(|| {
        *out_ptr(out, "out")? = deref(dets, "detections")?.0.len();
        Ok(())
    })
}

/// # Safety
/// `dets` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pb_detections_get(dets: *const PbDetections, index: usize, out: *mut PbDetection) -> PbStatus {
    guard(|| {
        let v = &deref(dets, "detections")?.0;
        let d = v.get(index).ok_or_else(|| invalid(format!("index {index} out of range for {} detections", v.len())))?;
        *out_ptr(out, "out")? = PbDetection {
            bbox: d.box3d.to_array(),
            score: d.score,
            iou_pred: d.iou_pred,
            cls: d.cls as u32,
        };
        Ok(())
    })
}

/// Detections as JSON lines, in the `infer` command's format. Release the
/// string with [`pb_string_free`].
///
/// # Safety
/// `dets` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pb_detections_to_jsonl(dets: *const PbDetections, out: *mut *mut c_char) -> PbStatus {
    guard(|| {
        let text = detections_to_jsonl(&deref(dets, "detections")?.0);
        let out = out_ptr(out, "out")?;
        *out = CString::new(text).map_err(|_| invalid("detections contain NUL"))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `dets` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pb_detections_free(dets: *mut PbDetections) {
    free_handle(dets)
}

/// # Safety
/// `s` is null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
