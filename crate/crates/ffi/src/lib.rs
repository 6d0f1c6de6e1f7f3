//! C ABI for `halo-core`.
//!
//! Models are opaque heap handles created by `halo_model_load` or
//! `halo_model_init` and released with `halo_model_free`. Every fallible
//! function returns a [`HaloStatus`]; on failure a message for the calling
//! thread is available from `halo_last_error_message` until the next call.
//! Output buffers are caller-allocated and their capacity is passed in.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use halo_core::attacks::{detection_attack, AttackConfig, AttackInit, BoxBounds, Direction};
use halo_core::detection::{Detector, DetectorKind};
use halo_core::metrics::{aupr, auroc, fpr_at_tpr, AttackSetting, ScorePair};
use halo_core::{Error, Mlp, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaloStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    Parse = 5,
    Config = 6,
    Contract = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaloDetector {
    Msp = 0,
    Entropy = 1,
    Energy = 2,
    Gen = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaloDirection {
    IdToOod = 0,
    OodToId = 1,
}

/// Opaque model handle.
pub struct HaloModel {
    inner: Mlp,
}

/// PGD parameters for `halo_detection_attack`. Null `box_lo`/`box_hi`
/// leave the input space unbounded; otherwise each points to either one
/// value or `input_dim` values, as given by `box_len`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HaloAttackParams {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_init: bool,
    pub seed: u64,
    pub box_lo: *const f64,
    pub box_hi: *const f64,
    pub box_len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HaloStatus {
    match e {
        Error::Dimension { .. } | Error::Index(_) => HaloStatus::Dimension,
        Error::Contract(_) => HaloStatus::Contract,
        Error::Config(_) | Error::Schema(_) => HaloStatus::Config,
        Error::Load { .. } | Error::Io(_) => HaloStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => HaloStatus::Parse,
    }
}

struct Fail(HaloStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HaloStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HaloStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HaloStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(HaloStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(m: *const HaloModel) -> Result<&'a Mlp, Fail> {
    m.as_ref().map(|h| &h.inner).ok_or_else(|| null("model"))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, cap: usize, need: usize) -> Result<&'a mut [f64], Fail> {
    if cap < need {
        return Err(Fail(
            HaloStatus::BufferTooSmall,
            format!("output buffer holds {cap} values, {need} needed"),
        ));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null("output buffer"));
    }
    Ok(slice::from_raw_parts_mut(p, need))
}

unsafe fn batch(model: &Mlp, x: *const f64, n_rows: usize) -> Result<Tensor, Fail> {
    let d = model.input_dim();
    let data = input(x, n_rows * d, "input")?;
    Ok(Tensor::matrix(n_rows, d, data.to_vec())?)
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(HaloStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn store(out: *mut *mut HaloModel, model: Mlp) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let handle = Box::into_raw(Box::new(HaloModel { inner: model }));
    unsafe { *out = handle };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn halo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next `halo_*` call on the same thread.
#[no_mangle]
pub extern "C" fn halo_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a `halo-ckpt-v1` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn halo_model_load(path: *const c_char, out: *mut *mut HaloModel) -> HaloStatus {
    guard(|| {
        let p = path_arg(path)?;
        store(out, Mlp::load(&p)?)
    })
}

/// Freshly initialized model with the given layer sizes.
///
/// # Safety
/// `layer_sizes` must point to `n_layers` values and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn halo_model_init(
    layer_sizes: *const usize,
    n_layers: usize,
    seed: u64,
    out: *mut *mut HaloModel,
) -> HaloStatus {
    guard(|| {
        if layer_sizes.is_null() {
            return Err(null("layer_sizes"));
        }
        let sizes = slice::from_raw_parts(layer_sizes, n_layers);
        store(out, Mlp::init(sizes, seed)?)
    })
}

/// Writes the model as a checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn halo_model_save(model: *const HaloModel, path: *const c_char) -> HaloStatus {
    guard(|| {
        let m = model_ref(model)?;
        let p = path_arg(path)?;
        Ok(m.save(&p, None, serde_json::Value::Null)?)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn halo_model_free(model: *mut HaloModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn halo_model_input_dim(model: *const HaloModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn halo_model_num_classes(model: *const HaloModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_classes())
}

/// Logits for `n_rows` row-major inputs into `out` (`n_rows × K`).
///
/// # Safety
/// `x` must hold `n_rows × input_dim` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn halo_model_forward(
    model: *const HaloModel,
    x: *const f64,
    n_rows: usize,
    out: *mut f64,
    out_len: usize,
) -> HaloStatus {
    guard(|| {
        let m = model_ref(model)?;
        let z = m.logits(&batch(m, x, n_rows)?)?;
        output(out, out_len, z.len())?.copy_from_slice(z.data());
        Ok(())
    })
}

/// OOD scores (higher = more OOD) for `n_rows` inputs. `detector` is a
/// [`HaloDetector`] value. GEN uses γ = 0.1 and M = min(K, 100).
///
/// # Safety
/// `x` must hold `n_rows × input_dim` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn halo_score(
    model: *const HaloModel,
    detector: u32,
    x: *const f64,
    n_rows: usize,
    out: *mut f64,
    out_len: usize,
) -> HaloStatus {
    guard(|| {
        let m = model_ref(model)?;
        let kind = match detector {
            d if d == HaloDetector::Msp as u32 => DetectorKind::Msp,
            d if d == HaloDetector::Entropy as u32 => DetectorKind::Entropy,
            d if d == HaloDetector::Energy as u32 => DetectorKind::Energy,
            d if d == HaloDetector::Gen as u32 => DetectorKind::Gen,
            d => return Err(Fail(HaloStatus::InvalidArgument, format!("unknown detector {d}"))),
        };
        let scores = Detector::new(kind).score(&m.logits(&batch(m, x, n_rows)?)?)?;
        output(out, out_len, scores.len())?.copy_from_slice(&scores);
        Ok(())
    })
}

/// Uniformity-targeting PGD attack; adversarial inputs go to `out`.
/// `direction` is a [`HaloDirection`] value.
///
/// # Safety
/// `params` must be valid; `x` and `out` must hold `n_rows × input_dim`
/// values (`out_len` for `out`); box pointers as documented on
/// [`HaloAttackParams`].
#[no_mangle]
pub unsafe extern "C" fn halo_detection_attack(
    model: *const HaloModel,
    params: *const HaloAttackParams,
    direction: u32,
    x: *const f64,
    n_rows: usize,
    out: *mut f64,
    out_len: usize,
) -> HaloStatus {
    guard(|| {
        let m = model_ref(model)?;
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let bounds = match (p.box_lo.is_null(), p.box_hi.is_null()) {
            (true, true) => None,
            (false, false) => Some(BoxBounds {
                lo: input(p.box_lo, p.box_len, "box_lo")?.to_vec(),
                hi: input(p.box_hi, p.box_len, "box_hi")?.to_vec(),
            }),
            _ => {
                return Err(Fail(
                    HaloStatus::InvalidArgument,
                    "box_lo and box_hi must both be null or both be set".into(),
                ))
            }
        };
        let cfg = AttackConfig::evaluation(p.epsilon, p.steps)
            .with_bounds(bounds)
            .with_init(if p.random_init { AttackInit::RandomUniform } else { AttackInit::Zero });
        let cfg = AttackConfig {
            step_size: p.step_size,
            ..cfg
        };
        let dir = match direction {
            d if d == HaloDirection::IdToOod as u32 => Direction::IdToOod,
            d if d == HaloDirection::OodToId as u32 => Direction::OodToId,
            d => return Err(Fail(HaloStatus::InvalidArgument, format!("unknown direction {d}"))),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let res = detection_attack(m, &batch(m, x, n_rows)?, dir, &cfg, &mut rng)?;
        output(out, out_len, res.adversarial.len())?.copy_from_slice(res.adversarial.data());
        Ok(())
    })
}

unsafe fn score_pair(id: *const f64, n_id: usize, ood: *const f64, n_ood: usize) -> Result<ScorePair, Fail> {
    Ok(ScorePair::new(
        input(id, n_id, "id scores")?.to_vec(),
        input(ood, n_ood, "ood scores")?.to_vec(),
        AttackSetting::Clean,
    ))
}

unsafe fn write_scalar(out: *mut f64, v: f64) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = v;
    Ok(())
}

/// AUROC with OOD as the positive class, ties counted one half.
///
/// # Safety
/// Score pointers must hold the given counts; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn halo_auroc(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> HaloStatus {
    guard(|| write_scalar(out, auroc(&score_pair(id, n_id, ood, n_ood)?)?))
}

/// FPR at the given TPR (0.95 for FPR95).
///
/// # Safety
/// Score pointers must hold the given counts; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn halo_fpr_at_tpr(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    tpr: f64,
    out: *mut f64,
) -> HaloStatus {
    guard(|| write_scalar(out, fpr_at_tpr(&score_pair(id, n_id, ood, n_ood)?, tpr)?))
}

/// AUPR with OOD as the positive class.
///
/// # Safety
/// Score pointers must hold the given counts; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn halo_aupr(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> HaloStatus {
    guard(|| write_scalar(out, aupr(&score_pair(id, n_id, ood, n_ood)?)?))
}
