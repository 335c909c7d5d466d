//! C ABI over the `asag` crate.
//!
//! Every fallible call returns an [`AsagStatus`]; on failure the message is
//! available from [`asag_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use asag::assign::{hungarian, CostMatrix};
use asag::config::{GenConfig, ModelConfig, WeightConfig};
use asag::featpyr::{FeatureMap, FeaturePyramid};
use asag::generator::{generate, GenOutput};
use asag::geometry::{giou, iou, BBox};
use asag::losses::{neg_weight, norm_weight, pos_weight};
use asag::predictor::PredictorBank;
use asag::Error;

/// Status codes. Values 2-4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsagStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    /// A panic was caught at the boundary.
    Internal = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AsagBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl From<AsagBox> for BBox {
    fn from(b: AsagBox) -> Self {
        BBox::new(b.cx, b.cy, b.w, b.h)
    }
}

impl From<BBox> for AsagBox {
    fn from(b: BBox) -> Self {
        AsagBox {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AsagAnchor {
    pub bbox: AsagBox,
    pub score: f32,
    /// 6 or 5 for the fixed part, 4 or 3 for probed levels.
    pub level: u8,
    pub patch: u32,
}

/// One raw pyramid level, `channels x height x width` values, channel-major.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AsagLevel {
    pub level: u8,
    pub height: u32,
    pub width: u32,
    pub values: *const f32,
}

/// Opaque predictor bank.
pub struct AsagBank {
    bank: PredictorBank,
}

/// Opaque result of one generator run.
pub struct AsagResult {
    out: GenOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> AsagStatus {
    match e.exit_code() {
        2 => AsagStatus::Config,
        3 => AsagStatus::Data,
        4 => AsagStatus::Numeric,
        _ => AsagStatus::Internal,
    }
}

struct Fail(AsagStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(AsagStatus::InvalidArgument, msg.to_string())
}

/// Run `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AsagStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AsagStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(&m);
            s
        }
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {m}"));
            AsagStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

/// Null or empty means "defaults".
unsafe fn json_arg<T: serde::de::DeserializeOwned + Default>(p: *const c_char, what: &str) -> Result<T, Fail> {
    if p.is_null() {
        return Ok(T::default());
    }
    let s = str_arg(p, what)?;
    if s.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(s).map_err(|e| Fail(AsagStatus::Config, format!("{what}: {e}")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| invalid(&format!("{what} is null")))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn asag_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn asag_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// # Safety
/// `a`, `b` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn asag_iou(a: *const AsagBox, b: *const AsagBox, out: *mut f32) -> AsagStatus {
    guard(|| {
        let (a, b) = (a.as_ref().ok_or_else(|| invalid("a is null"))?, b.as_ref().ok_or_else(|| invalid("b is null"))?);
        *out_arg(out, "out")? = iou(&(*a).into(), &(*b).into());
        Ok(())
    })
}

/// # Safety
/// `a`, `b` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn asag_giou(a: *const AsagBox, b: *const AsagBox, out: *mut f32) -> AsagStatus {
    guard(|| {
        let (a, b) = (a.as_ref().ok_or_else(|| invalid("a is null"))?, b.as_ref().ok_or_else(|| invalid("b is null"))?);
        *out_arg(out, "out")? = giou(&(*a).into(), &(*b).into());
        Ok(())
    })
}

/// The normalization function `sigmoid(4.5 (x1 x2 - 1/3)) / sigmoid(3)`.
#[no_mangle]
pub extern "C" fn asag_norm_weight(x1: f32, x2: f32) -> f32 {
    norm_weight(x1, x2)
}

/// Positive and negative query weights with the default exponents.
///
/// # Safety
/// Output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn asag_query_weights(score: f32, iou: f32, w_pos: *mut f32, w_neg: *mut f32) -> AsagStatus {
    guard(|| {
        let cfg = WeightConfig::default();
        *out_arg(w_pos, "w_pos")? = pos_weight(score, iou, &cfg);
        *out_arg(w_neg, "w_neg")? = neg_weight(score, iou, &cfg);
        Ok(())
    })
}

/// Minimum-cost assignment of a row-major `rows x cols` cost matrix.
/// `row_to_col` receives `rows` entries, `-1` for unmatched rows.
///
/// # Safety
/// `cost` must hold `rows * cols` doubles and `row_to_col` `rows` slots.
#[no_mangle]
pub unsafe extern "C" fn asag_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    row_to_col: *mut i64,
    total: *mut f64,
) -> AsagStatus {
    guard(|| {
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("rows * cols overflows"))?;
        if n > 0 && cost.is_null() {
            return Err(invalid("cost is null"));
        }
        if rows > 0 && row_to_col.is_null() {
            return Err(invalid("row_to_col is null"));
        }
        let data = if n == 0 { Vec::new() } else { std::slice::from_raw_parts(cost, n).to_vec() };
        let m = CostMatrix::new(rows, cols, data);
        let a = hungarian(&m)?;
        if rows > 0 {
            let map = std::slice::from_raw_parts_mut(row_to_col, rows);
            map.fill(-1);
            for &(r, c) in &a.pairs {
                map[r] = c as i64;
            }
        }
        if let Some(t) = total.as_mut() {
            *t = a.total_cost(&m);
        }
        Ok(())
    })
}

/// Load a weights file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn asag_bank_load(path: *const c_char, out: *mut *mut AsagBank) -> AsagStatus {
    guard(|| {
        let p = PathBuf::from(str_arg(path, "path")?);
        let slot = out_arg(out, "out")?;
        *slot = Box::into_raw(Box::new(AsagBank {
            bank: PredictorBank::load(&p)?,
        }));
        Ok(())
    })
}

/// Fresh bank from a model config (JSON; null or empty for defaults).
/// `zero` selects the all-zero parameter set instead of seeded initialization.
///
/// # Safety
/// `model_json` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn asag_bank_new(
    model_json: *const c_char,
    seed: u64,
    zero: bool,
    out: *mut *mut AsagBank,
) -> AsagStatus {
    guard(|| {
        let model: ModelConfig = json_arg(model_json, "model_json")?;
        model.validate()?;
        let slot = out_arg(out, "out")?;
        let bank = if zero { PredictorBank::zeros(&model) } else { PredictorBank::init(&model, seed) };
        *slot = Box::into_raw(Box::new(AsagBank { bank }));
        Ok(())
    })
}

/// # Safety
/// `bank` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn asag_bank_save(bank: *const AsagBank, path: *const c_char) -> AsagStatus {
    guard(|| {
        let b = bank.as_ref().ok_or_else(|| invalid("bank is null"))?;
        b.bank.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Raw channel count the bank expects in its input pyramid.
///
/// # Safety
/// `bank` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn asag_bank_raw_channels(bank: *const AsagBank) -> usize {
    bank.as_ref().map_or(0, |b| b.bank.model.raw_channels)
}

/// # Safety
/// `bank` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn asag_bank_free(bank: *mut AsagBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Run the generator on a raw pyramid (levels 3, 4, 5 in any order; each
/// with the bank's raw channel count). `gen_json` may be null for defaults.
///
/// # Safety
/// `levels` must point to `n_levels` entries whose `values` hold
/// `channels * height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn asag_generate(
    bank: *const AsagBank,
    gen_json: *const c_char,
    levels: *const AsagLevel,
    n_levels: usize,
    out: *mut *mut AsagResult,
) -> AsagStatus {
    guard(|| {
        let b = bank.as_ref().ok_or_else(|| invalid("bank is null"))?;
        let gen: GenConfig = json_arg(gen_json, "gen_json")?;
        if levels.is_null() && n_levels > 0 {
            return Err(invalid("levels is null"));
        }
        let c = b.bank.model.raw_channels;
        let mut maps = Vec::with_capacity(n_levels);
        for l in (0..n_levels).map(|i| &*levels.add(i)) {
            let (h, w) = (l.height as usize, l.width as usize);
            if l.values.is_null() {
                return Err(invalid(&format!("values of level {} are null", l.level)));
            }
            let vals = std::slice::from_raw_parts(l.values, c * h * w).to_vec();
            maps.push(FeatureMap::from_values(l.level, c, h, w, vals)?);
        }
        let slot = out_arg(out, "out")?;
        let o = generate(&FeaturePyramid::new(maps), &b.bank, &gen)?;
        *slot = Box::into_raw(Box::new(AsagResult { out: o }));
        Ok(())
    })
}

/// Number of valid output anchors.
///
/// # Safety
/// `res` must be null or come from [`asag_generate`].
#[no_mangle]
pub unsafe extern "C" fn asag_result_len(res: *const AsagResult) -> usize {
    res.as_ref().map_or(0, |r| r.out.trace.valid)
}

/// Copy up to `cap` valid anchors (descending score) into `buf`.
///
/// # Safety
/// `buf` must have room for `cap` anchors; `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn asag_result_anchors(
    res: *const AsagResult,
    buf: *mut AsagAnchor,
    cap: usize,
    written: *mut usize,
) -> AsagStatus {
    guard(|| {
        let r = res.as_ref().ok_or_else(|| invalid("result is null"))?;
        let valid = r.out.valid();
        let n = valid.len().min(cap);
        if n > 0 && buf.is_null() {
            return Err(invalid("buf is null"));
        }
        for (i, a) in valid.iter().take(n).enumerate() {
            *buf.add(i) = AsagAnchor {
                bbox: a.bbox.into(),
                score: a.score,
                level: a.origin_level,
                patch: a.origin_patch as u32,
            };
        }
        if let Some(w) = written.as_mut() {
            *w = n;
        }
        Ok(())
    })
}

/// Deepest pyramid level the run used (5 when probing stopped early).
///
/// # Safety
/// `res` must be null or come from [`asag_generate`].
#[no_mangle]
pub unsafe extern "C" fn asag_result_deepest_level(res: *const AsagResult) -> u8 {
    res.as_ref().map_or(0, |r| r.out.trace.deepest_level())
}

/// Total FLOPs of the run (predictor, compression and resampling).
///
/// # Safety
/// `res` must be null or come from [`asag_generate`].
#[no_mangle]
pub unsafe extern "C" fn asag_result_flops(res: *const AsagResult) -> u64 {
    res.as_ref().map_or(0, |r| r.out.trace.flops.total())
}

/// # Safety
/// `res` must be null or come from [`asag_generate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn asag_result_free(res: *mut AsagResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}
