//! C ABI over lyapnet: certificate arithmetic and checkpoint inference.
//!
//! Every function returns a [`LyapStatus`]; on failure the message is kept
//! per thread and can be read with [`lyap_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lyapnet::cert::{self, GlobalBudget, LayerBudget};
use lyapnet::harness::checkpoint;
use lyapnet::nn::Model;
use lyapnet::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LyapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Shape = 4,
    Budget = 5,
    Numeric = 6,
    Io = 7,
    Format = 8,
    Panic = 99,
}

/// Certificate for a layer chain; see [`lyap_certificate_new`].
pub struct LyapCertificate {
    inner: cert::CascadeCertificate,
}

/// A model loaded from a checkpoint.
pub struct LyapModel {
    model: Model,
    digest: [u8; 32],
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> LyapStatus {
    match e {
        Error::Shape(_) | Error::Size(_) => LyapStatus::Shape,
        Error::Budget(_)
        | Error::Planning(_)
        | Error::DegenerateCone
        | Error::ComplexSlopes { .. } => LyapStatus::Budget,
        Error::Numeric(_) => LyapStatus::Numeric,
        Error::Io(_) => LyapStatus::Io,
        Error::Format { .. } | Error::Json(_) => LyapStatus::Format,
        _ => LyapStatus::InvalidArgument,
    }
}

struct Fail(LyapStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(LyapStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LyapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LyapStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            LyapStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T: Copy>(src: &[T], out: *mut T, cap: usize) -> Result<(), Fail> {
    if src.len() > cap {
        return Err(Fail(
            LyapStatus::BufferTooSmall,
            format!("buffer holds {cap} values, need {}", src.len()),
        ));
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

unsafe fn put<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(v);
    Ok(())
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `cap` bytes. Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lyap_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lyap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Largest admissible `σ_max` for a layer budget.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lyap_spectral_cap(delta: f64, nu: f64, out: *mut f64) -> LyapStatus {
    guard(|| put(out, cert::spectral_cap(LayerBudget::new(delta, nu))?))
}

/// `sqrt((1/δ² + 2ν/δ)·ε)` for a global budget.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lyap_table_bound(
    delta: f64,
    nu: f64,
    eps: f64,
    out: *mut f64,
) -> LyapStatus {
    guard(|| put(out, cert::table_bound(GlobalBudget::new(delta, nu), eps)?))
}

/// `sqrt(1/δ² + 2ν/δ)·ε` for a global budget.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lyap_corollary_bound(
    delta: f64,
    nu: f64,
    eps: f64,
    out: *mut f64,
) -> LyapStatus {
    guard(|| {
        put(
            out,
            cert::corollary_bound(GlobalBudget::new(delta, nu), eps)?,
        )
    })
}

/// Builds and checks the certificate for `layers` budgets given as
/// parallel `deltas`/`nus` arrays.
///
/// # Safety
/// `deltas` and `nus` must hold `layers` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lyap_certificate_new(
    deltas: *const f64,
    nus: *const f64,
    layers: usize,
    global_delta: f64,
    global_nu: f64,
    strict: bool,
    out: *mut *mut LyapCertificate,
) -> LyapStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = slice(deltas, layers, "deltas")?;
        let n = slice(nus, layers, "nus")?;
        let budgets: Vec<LayerBudget> = d
            .iter()
            .zip(n)
            .map(|(d, n)| LayerBudget::new(*d, *n))
            .collect();
        let inner = cert::certify(&budgets, GlobalBudget::new(global_delta, global_nu), strict)?;
        out.write(Box::into_raw(Box::new(LyapCertificate { inner })));
        Ok(())
    })
}

/// # Safety
/// `c` must be null or a handle from [`lyap_certificate_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn lyap_certificate_free(c: *mut LyapCertificate) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

unsafe fn cert_ref<'a>(c: *const LyapCertificate) -> Result<&'a cert::CascadeCertificate, Fail> {
    c.as_ref()
        .map(|c| &c.inner)
        .ok_or_else(|| null("certificate"))
}

/// Overall verdict, and whether `-A` is quasi-dominant.
///
/// # Safety
/// `c` must be a live certificate; outputs must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn lyap_certificate_status(
    c: *const LyapCertificate,
    passed: *mut bool,
    quasi_dominant: *mut bool,
) -> LyapStatus {
    guard(|| {
        let c = cert_ref(c)?;
        if !passed.is_null() {
            passed.write(c.passed());
        }
        if !quasi_dominant.is_null() {
            quasi_dominant.write(c.quasi_dominance.passed());
        }
        Ok(())
    })
}

/// Per-layer caps; NaN where a layer has none. Writes `layers` values.
///
/// # Safety
/// `c` must be a live certificate and `out` hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn lyap_certificate_caps(
    c: *const LyapCertificate,
    out: *mut f64,
    cap: usize,
) -> LyapStatus {
    guard(|| {
        let caps: Vec<f64> = cert_ref(c)?
            .caps
            .iter()
            .map(|c| c.unwrap_or(f64::NAN))
            .collect();
        write_out(&caps, out, cap)
    })
}

/// Side of the square matrix `-A` (layers + 1).
///
/// # Safety
/// `c` must be a live certificate and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn lyap_certificate_side(
    c: *const LyapCertificate,
    out: *mut usize,
) -> LyapStatus {
    guard(|| put(out, cert_ref(c)?.matrix.shape()[0]))
}

/// `-A` in row-major order, `side * side` values.
///
/// # Safety
/// `c` must be a live certificate and `out` hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn lyap_certificate_neg_matrix(
    c: *const LyapCertificate,
    out: *mut f64,
    cap: usize,
) -> LyapStatus {
    guard(|| {
        let rows = cert_ref(c)?.neg_matrix_rows();
        write_out(&rows.concat(), out, cap)
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lyap_model_load(
    path: *const c_char,
    out: *mut *mut LyapModel,
) -> LyapStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(LyapStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (model, digest) = checkpoint::load(Path::new(p))?;
        out.write(Box::into_raw(Box::new(LyapModel { model, digest })));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from [`lyap_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn lyap_model_free(m: *mut LyapModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

unsafe fn model_ref<'a>(m: *const LyapModel) -> Result<&'a LyapModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Flattened input and output widths of one sample.
///
/// # Safety
/// `m` must be a live model; outputs must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn lyap_model_dims(
    m: *const LyapModel,
    input_len: *mut usize,
    output_len: *mut usize,
) -> LyapStatus {
    guard(|| {
        let m = &model_ref(m)?.model;
        if !input_len.is_null() {
            input_len.write(m.input_shape().iter().product());
        }
        if !output_len.is_null() {
            output_len.write(m.output_shape().iter().product());
        }
        Ok(())
    })
}

/// The 32-byte configuration digest stored with the checkpoint.
///
/// # Safety
/// `m` must be a live model and `out` hold 32 bytes.
#[no_mangle]
pub unsafe extern "C" fn lyap_model_digest(m: *const LyapModel, out: *mut u8) -> LyapStatus {
    guard(|| write_out(&model_ref(m)?.digest, out, 32))
}

/// Forward pass on `batch` samples laid out row-major. Writes
/// `batch * output_len` logits.
///
/// # Safety
/// `input` must hold `batch * input_len` floats and `out` `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn lyap_model_predict(
    m: *const LyapModel,
    input: *const f32,
    batch: usize,
    out: *mut f32,
    cap: usize,
) -> LyapStatus {
    guard(|| {
        let model = &model_ref(m)?.model;
        let width: usize = model.input_shape().iter().product();
        let x = slice(input, batch * width, "input")?;
        let mut shape = vec![batch];
        shape.extend_from_slice(model.input_shape());
        let y = model.predict(&Tensor::new(shape, x.to_vec())?)?;
        write_out(y.data(), out, cap)
    })
}
