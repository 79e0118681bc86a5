//! C ABI for topoconv.
//!
//! Every fallible function returns a [`TcStatus`]; on failure a message is
//! available from [`tc_last_error`] until the next call on the same thread.
//! Objects are opaque handles released with their matching `*_free`.
//! Arrays are caller-owned, row-major, `f64` unless noted.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use topoconv::harness::{load_checkpoint, Model};
use topoconv::metrics::{evaluate_pair, BinaryMask};
use topoconv::ph::{compute_ph0, Connectivity, PersistenceDiagram, ScalarMap};
use topoconv::tpg::{compute_prior, tpg_forward, tpg_forward_no_aggregation, PoolMode, TpgConfig};
use topoconv::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    InvalidArgument = 3,
    Format = 4,
    NonFinite = 5,
    Io = 6,
    Internal = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TcStatus {
    match e {
        Error::Shape(_) => TcStatus::Shape,
        Error::InvalidArgument(_) | Error::Config(_) => TcStatus::InvalidArgument,
        Error::Format { .. } | Error::Json(_) => TcStatus::Format,
        Error::NonFinite(_) => TcStatus::NonFinite,
        Error::Io(_) => TcStatus::Io,
        Error::Internal(_) => TcStatus::Internal,
    }
}

struct Fail(TcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TcStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TcStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TcStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("panic inside topoconv");
            TcStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller promises `len` readable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller promises `len` writable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn numel(dims: &[usize]) -> Result<usize, Fail> {
    dims.iter()
        .try_fold(1usize, |a, d| a.checked_mul(*d))
        .filter(|n| *n > 0)
        .ok_or_else(|| Fail(TcStatus::Shape, format!("bad dimensions {dims:?}")))
}

/// Message of the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn tc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn tc_version() -> *const c_char {
    static V: &str = concat!("topoconv ", env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr() as *const c_char
}

// ---------------------------------------------------------------------------
// Persistence

/// Opaque persistence diagram.
pub struct TcDiagram(PersistenceDiagram);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TcPair {
    pub birth: f64,
    pub death: f64,
    pub birth_x: u32,
    pub birth_y: u32,
    pub death_x: u32,
    pub death_y: u32,
    pub essential: u8,
}

/// Superlevel 0-dim persistence of a `height × width` map with values in
/// `[0,1]`. `connectivity` is 4 or 8.
///
/// # Safety
/// `values` must point to `height * width` doubles and `out` to writable
/// storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn tc_ph0(
    values: *const f64,
    height: usize,
    width: usize,
    connectivity: u32,
    out: *mut *mut TcDiagram,
) -> TcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let n = numel(&[height, width])?;
        let v = unsafe { slice(values, n, "values") }?;
        let map = ScalarMap::new(height, width, v.to_vec())?;
        let conn = Connectivity::from_number(connectivity)?;
        let d = Box::new(TcDiagram(compute_ph0(&map, conn)));
        unsafe { *out = Box::into_raw(d) };
        Ok(())
    })
}

/// Number of pairs; 0 for a null handle.
///
/// # Safety
/// `d` must be null or a live handle from [`tc_ph0`].
#[no_mangle]
pub unsafe extern "C" fn tc_diagram_len(d: *const TcDiagram) -> usize {
    unsafe { d.as_ref() }.map_or(0, |d| d.0.len())
}

/// # Safety
/// `d` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tc_diagram_pair(
    d: *const TcDiagram,
    index: usize,
    out: *mut TcPair,
) -> TcStatus {
    guard(|| {
        let d = unsafe { d.as_ref() }.ok_or_else(|| null("diagram"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let p = d.0.pairs.get(index).ok_or_else(|| {
            Fail(
                TcStatus::InvalidArgument,
                format!("pair {index} out of range ({} pairs)", d.0.len()),
            )
        })?;
        *out = TcPair {
            birth: p.birth,
            death: p.death,
            birth_x: p.birth_coord.x as u32,
            birth_y: p.birth_coord.y as u32,
            death_x: p.death_coord.x as u32,
            death_y: p.death_coord.y as u32,
            essential: p.essential as u8,
        };
        Ok(())
    })
}

/// # Safety
/// `d` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tc_diagram_free(d: *mut TcDiagram) {
    if !d.is_null() {
        drop(unsafe { Box::from_raw(d) });
    }
}

// ---------------------------------------------------------------------------
// Posterior generator

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TcTpgConfig {
    pub tau0: f64,
    pub gaussian_sigma: f64,
    /// 0 max, 1 mean.
    pub pool_mode: u32,
    /// 4 or 8.
    pub connectivity: u32,
    pub filtering: u8,
    pub dilation: u8,
    pub aggregation: u8,
}

#[no_mangle]
pub extern "C" fn tc_tpg_config_default() -> TcTpgConfig {
    let d = TpgConfig::default();
    TcTpgConfig {
        tau0: d.tau0,
        gaussian_sigma: d.gaussian_sigma,
        pool_mode: 0,
        connectivity: 4,
        filtering: 1,
        dilation: 1,
        aggregation: 1,
    }
}

fn tpg_config(c: &TcTpgConfig) -> Result<TpgConfig, Fail> {
    let pool_mode = match c.pool_mode {
        0 => PoolMode::Max,
        1 => PoolMode::Mean,
        m => return Err(Fail(TcStatus::InvalidArgument, format!("pool_mode {m}"))),
    };
    let cfg = TpgConfig {
        tau0: c.tau0,
        gaussian_sigma: c.gaussian_sigma,
        pool_mode,
        connectivity: Connectivity::from_number(c.connectivity)?,
        filtering: c.filtering != 0,
        dilation: c.dilation != 0,
        aggregation: c.aggregation != 0,
        stop_gradient_prior: true,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Dilated prior `[n, h, w]` of a feature map `[n, c, h, w]`.
///
/// # Safety
/// `input` holds `n*c*h*w` doubles, `out` has room for `n*h*w`.
#[no_mangle]
pub unsafe extern "C" fn tc_tpg_prior(
    config: *const TcTpgConfig,
    input: *const f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> TcStatus {
    guard(|| {
        let cfg = tpg_config(unsafe { config.as_ref() }.ok_or_else(|| null("config"))?)?;
        let len = numel(&[n, c, h, w])?;
        let x = Tensor::new(&[n, c, h, w], unsafe { slice(input, len, "input") }?.to_vec())?;
        let prior = compute_prior(&x, &cfg)?.dilated;
        unsafe { slice_mut(out, n * h * w, "out") }?.copy_from_slice(prior.tensor().data());
        Ok(())
    })
}

/// Posterior `[n, c, h, w]`; aggregation follows `config.aggregation`.
///
/// # Safety
/// `input` holds `n*c*h*w` doubles and `out` has room for as many.
#[no_mangle]
pub unsafe extern "C" fn tc_tpg_forward(
    config: *const TcTpgConfig,
    input: *const f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> TcStatus {
    guard(|| {
        let cfg = tpg_config(unsafe { config.as_ref() }.ok_or_else(|| null("config"))?)?;
        let len = numel(&[n, c, h, w])?;
        let x = Tensor::new(&[n, c, h, w], unsafe { slice(input, len, "input") }?.to_vec())?;
        let y = if cfg.aggregation {
            tpg_forward(&x, &cfg)?
        } else {
            tpg_forward_no_aggregation(&x, &cfg)?
        };
        unsafe { slice_mut(out, len, "out") }?.copy_from_slice(y.data());
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Metrics

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TcMetrics {
    pub dice: f64,
    pub auc: f64,
    pub cl_dice: f64,
    pub betti0_error: f64,
    pub betti1_error: f64,
    pub euler_error: f64,
    pub ari_error: f64,
    pub vi: f64,
}

/// Compare probabilities against a 0/1 ground-truth mask.
///
/// # Safety
/// `prob` holds `h*w` doubles, `gt` holds `h*w` bytes, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tc_evaluate(
    prob: *const f64,
    gt: *const u8,
    h: usize,
    w: usize,
    threshold: f64,
    out: *mut TcMetrics,
) -> TcStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let len = numel(&[h, w])?;
        let p = Tensor::new(&[h, w], unsafe { slice(prob, len, "prob") }?.to_vec())?;
        let g = unsafe { slice(gt, len, "gt") }?;
        if let Some(v) = g.iter().find(|v| **v > 1) {
            return Err(Fail(TcStatus::InvalidArgument, format!("mask value {v} is not 0/1")));
        }
        let mask = BinaryMask::new(h, w, g.to_vec())?;
        let r = evaluate_pair(&p, &mask, threshold)?;
        *out = TcMetrics {
            dice: r.dice,
            auc: r.auc,
            cl_dice: r.cl_dice,
            betti0_error: r.betti0_error,
            betti1_error: r.betti1_error,
            euler_error: r.euler_error,
            ari_error: r.ari_error,
            vi: r.vi,
        };
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Trained models

/// Opaque trained network.
pub struct TcModel(Model);

/// Load a checkpoint directory written by `topoconv train`.
///
/// # Safety
/// `dir` is a NUL-terminated UTF-8 path, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tc_model_load(dir: *const c_char, out: *mut *mut TcModel) -> TcStatus {
    guard(|| {
        if dir.is_null() {
            return Err(null("dir"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(dir) }
            .to_str()
            .map_err(|_| Fail(TcStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (model, _) = load_checkpoint(Path::new(path))?;
        unsafe { *out = Box::into_raw(Box::new(TcModel(model))) };
        Ok(())
    })
}

/// Foreground probabilities `[n, h, w]` for single-channel images `[n, h, w]`.
///
/// # Safety
/// `m` is a live handle; `images` and `out` hold `n*h*w` doubles.
#[no_mangle]
pub unsafe extern "C" fn tc_model_predict(
    m: *mut TcModel,
    images: *const f64,
    n: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> TcStatus {
    guard(|| {
        let m = unsafe { m.as_mut() }.ok_or_else(|| null("model"))?;
        let len = numel(&[n, h, w])?;
        let x = Tensor::new(&[n, 1, h, w], unsafe { slice(images, len, "images") }?.to_vec())?;
        let y = m.0.predict(&x)?;
        unsafe { slice_mut(out, len, "out") }?.copy_from_slice(y.data());
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tc_model_free(m: *mut TcModel) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}
