//! C ABI for the soyo library.
//!
//! Every fallible function returns a [`SoyoStatus`]; on failure the message
//! is available from [`soyo_last_error`] on the same thread. Objects are
//! opaque handles released with their `_free` function. Matrices are
//! row-major `double` arrays.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use soyo_core::dfr::sample_gmm;
use soyo_core::error::Error;
use soyo_core::gmc::{bic, fit_gmm, mixture_logpdf, select_k, CovKind, EmConfig, GmmModel, ParamCount};
use soyo_core::io::ModelStore;
use soyo_core::rng::{tags, RngStream};
use soyo_core::selectors::DomainSelector;
use soyo_core::types::{FeatureMatrix, LevelId};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoyoStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Numeric = 3,
    Format = 4,
    Io = 5,
    Panic = 6,
}

/// A fitted Gaussian mixture.
pub struct SoyoGmm {
    model: GmmModel,
}

/// A loaded model store.
pub struct SoyoStore {
    store: ModelStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SoyoStatus {
    match e {
        Error::Io(_) => SoyoStatus::Io,
        Error::Format { .. } => SoyoStatus::Format,
        Error::SingularCovariance | Error::NonFinite(_) => SoyoStatus::Numeric,
        _ => SoyoStatus::InvalidArgument,
    }
}

struct Fail(SoyoStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SoyoStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SoyoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SoyoStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SoyoStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn matrix(data: *const f64, n_rows: usize, dim: usize) -> Result<FeatureMatrix, Fail> {
    let len =
        n_rows.checked_mul(dim).ok_or_else(|| Fail(SoyoStatus::InvalidArgument, "matrix size overflows".into()))?;
    let v = slice(data, len, "data")?;
    Ok(FeatureMatrix::new(n_rows, dim, v.to_vec())?)
}

unsafe fn out<'a, T>(ptr: *mut T) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| null("output pointer"))
}

unsafe fn gmm<'a>(ptr: *const SoyoGmm) -> Result<&'a GmmModel, Fail> {
    ptr.as_ref().map(|g| &g.model).ok_or_else(|| null("gmm"))
}

fn em(full_cov: bool, seed: u64) -> EmConfig {
    EmConfig { cov_kind: if full_cov { CovKind::Full } else { CovKind::Diagonal }, ..EmConfig::default() }
        .with_seed(RngStream::new(seed, 0))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn soyo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn soyo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Fits a `k`-component mixture to `n_rows x dim` data.
///
/// # Safety
/// `data` must point to `n_rows * dim` doubles and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn soyo_gmm_fit(
    data: *const f64,
    n_rows: usize,
    dim: usize,
    k: usize,
    full_cov: bool,
    seed: u64,
    out: *mut *mut SoyoGmm,
) -> SoyoStatus {
    guard(|| {
        let out = self::out(out)?;
        *out = std::ptr::null_mut();
        let x = matrix(data, n_rows, dim)?;
        let fit = fit_gmm(&x, k, &em(full_cov, seed))?;
        *out = Box::into_raw(Box::new(SoyoGmm { model: fit.model }));
        Ok(())
    })
}

/// # Safety
/// `gmm` must be null or a handle from [`soyo_gmm_fit`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn soyo_gmm_free(gmm: *mut SoyoGmm) {
    if !gmm.is_null() {
        drop(Box::from_raw(gmm));
    }
}

/// # Safety
/// `gmm` must be a live handle; `k` and `dim` writable (either may be null).
#[no_mangle]
pub unsafe extern "C" fn soyo_gmm_shape(gmm: *const SoyoGmm, k: *mut usize, dim: *mut usize) -> SoyoStatus {
    guard(|| {
        let m = self::gmm(gmm)?;
        if let Some(k) = k.as_mut() {
            *k = m.k();
        }
        if let Some(d) = dim.as_mut() {
            *d = m.dim();
        }
        Ok(())
    })
}

/// Number of stored real parameters.
///
/// # Safety
/// `gmm` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn soyo_gmm_param_count(gmm: *const SoyoGmm, out: *mut usize) -> SoyoStatus {
    guard(|| {
        *self::out(out)? = self::gmm(gmm)?.param_count();
        Ok(())
    })
}

/// Copies the `k` mixture weights into `weights`.
///
/// # Safety
/// `gmm` must be a live handle and `weights` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn soyo_gmm_weights(gmm: *const SoyoGmm, weights: *mut f64, len: usize) -> SoyoStatus {
    guard(|| {
        let m = self::gmm(gmm)?;
        if len != m.k() {
            return Err(Error::DimMismatch { expected: m.k(), got: len }.into());
        }
        if weights.is_null() {
            return Err(null("weights"));
        }
        std::slice::from_raw_parts_mut(weights, len).copy_from_slice(m.weights());
        Ok(())
    })
}

/// Log-density of one point.
///
/// # Safety
/// `x` must point to `dim` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn soyo_gmm_logpdf(gmm: *const SoyoGmm, x: *const f64, dim: usize, out: *mut f64) -> SoyoStatus {
    guard(|| {
        let m = self::gmm(gmm)?;
        let x = slice(x, dim, "x")?;
        *self::out(out)? = mixture_logpdf(x, m)?;
        Ok(())
    })
}

/// Bayesian information criterion of the model on `n_rows x dim` data.
///
/// # Safety
/// `data` must point to `n_rows * dim` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn soyo_gmm_bic(
    gmm: *const SoyoGmm,
    data: *const f64,
    n_rows: usize,
    dim: usize,
    out: *mut f64,
) -> SoyoStatus {
    guard(|| {
        let m = self::gmm(gmm)?;
        let x = matrix(data, n_rows, dim)?;
        *self::out(out)? = bic(m, &x)?;
        Ok(())
    })
}

/// Draws `n` samples into `out` (`n * dim` doubles, row-major).
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn soyo_gmm_sample(
    gmm: *const SoyoGmm,
    n: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> SoyoStatus {
    guard(|| {
        let m = self::gmm(gmm)?;
        let want = n.saturating_mul(m.dim());
        if out_len != want {
            return Err(Error::LengthMismatch { left: out_len, right: want }.into());
        }
        let mut rng = RngStream::new(seed, 0).substream(tags::DFR).generator();
        let s = sample_gmm(m, n, &mut rng)?;
        if want > 0 {
            if out.is_null() {
                return Err(null("out"));
            }
            std::slice::from_raw_parts_mut(out, want).copy_from_slice(s.as_slice());
        }
        Ok(())
    })
}

/// Component count in `k_min..=k_max` minimizing BIC.
///
/// # Safety
/// `data` must point to `n_rows * dim` doubles and `out_k` must be writable.
#[no_mangle]
pub unsafe extern "C" fn soyo_select_k(
    data: *const f64,
    n_rows: usize,
    dim: usize,
    k_min: usize,
    k_max: usize,
    full_cov: bool,
    seed: u64,
    out_k: *mut usize,
) -> SoyoStatus {
    guard(|| {
        let out = self::out(out_k)?;
        if k_min == 0 || k_min > k_max {
            return Err(Fail(SoyoStatus::InvalidArgument, "need 1 <= k_min <= k_max".into()));
        }
        let x = matrix(data, n_rows, dim)?;
        *out = select_k(&x, k_min..=k_max, &em(full_cov, seed))?.0;
        Ok(())
    })
}

/// Loads a model store written by the `soyo` tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn soyo_store_load(path: *const c_char, out: *mut *mut SoyoStore) -> SoyoStatus {
    guard(|| {
        let out = self::out(out)?;
        *out = std::ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path =
            CStr::from_ptr(path).to_str().map_err(|_| Fail(SoyoStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let store = ModelStore::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(SoyoStore { store }));
        Ok(())
    })
}

/// # Safety
/// `store` must be null or a handle from [`soyo_store_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn soyo_store_free(store: *mut SoyoStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of domains with stored compressors.
///
/// # Safety
/// `store` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn soyo_store_n_domains(store: *const SoyoStore, out: *mut usize) -> SoyoStatus {
    guard(|| {
        let s = store.as_ref().ok_or_else(|| null("store"))?;
        *self::out(out)? = s.store.domains.len();
        Ok(())
    })
}

/// Routes `n_rows` samples to 0-based domain indices using the store's
/// selector (fusion network if present, else nearest mean, else k-means).
/// `mid` may be null when the selector uses only the last level.
///
/// # Safety
/// `mid` (if non-null) and `last` must point to `n_rows * dim` doubles;
/// `out_domains` must hold `n_rows` values.
#[no_mangle]
pub unsafe extern "C" fn soyo_store_predict(
    store: *const SoyoStore,
    mid: *const f64,
    last: *const f64,
    n_rows: usize,
    dim: usize,
    out_domains: *mut usize,
) -> SoyoStatus {
    guard(|| {
        let s = &store.as_ref().ok_or_else(|| null("store"))?.store;
        let selector: &dyn DomainSelector = match (&s.mdfn, &s.nmc, &s.kmeans) {
            (Some(m), _, _) => m,
            (None, Some(m), _) => m,
            (None, None, Some(m)) => m,
            _ => return Err(Error::IncompleteStore("store has no selector".into()).into()),
        };
        let mut levels = BTreeMap::new();
        levels.insert(LevelId::Last, matrix(last, n_rows, dim)?);
        if !mid.is_null() {
            levels.insert(LevelId::Mid, matrix(mid, n_rows, dim)?);
        }
        let pred = selector.select(&levels)?;
        if n_rows > 0 {
            if out_domains.is_null() {
                return Err(null("out_domains"));
            }
            let out = std::slice::from_raw_parts_mut(out_domains, n_rows);
            for (o, p) in out.iter_mut().zip(pred) {
                *o = p.index();
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last() -> String {
        unsafe { CStr::from_ptr(soyo_last_error()) }.to_str().unwrap().to_owned()
    }

    #[test]
    fn panics_become_status() {
        assert_eq!(guard(|| panic!("boom")), SoyoStatus::Panic);
        assert_eq!(last(), "internal panic");
        assert_eq!(guard(|| Ok(())), SoyoStatus::Ok);
        assert_eq!(last(), "");
    }

    #[test]
    fn error_mapping() {
        assert_eq!(status_of(&Error::Format { offset: 3, msg: "x".into() }), SoyoStatus::Format);
        assert_eq!(status_of(&Error::SingularCovariance), SoyoStatus::Numeric);
        assert_eq!(status_of(&Error::EmptyInput), SoyoStatus::InvalidArgument);
        let io = Error::Io(std::io::Error::other("x"));
        assert_eq!(status_of(&io), SoyoStatus::Io);
    }
}
