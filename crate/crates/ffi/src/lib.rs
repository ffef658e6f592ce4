//! C ABI over `treecf`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` / `*_new`
//! and released by the matching `*_free`. Every fallible function returns a
//! [`TcfStatus`]; on failure a message is available from
//! [`tcf_last_error_message`] on the same thread. Panics never unwind into
//! the caller; they surface as [`TcfStatus::Panic`].
//!
//! Strings returned through out-parameters are owned by the caller and must
//! be released with [`tcf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use treecf::blackbox::{BlackBox, ReferenceModel};
use treecf::dataset::{load_dataset, Dataset, Instance};
use treecf::latent::VaeModel;
use treecf::recourse::{Explainer, RecourseConfig};
use treecf::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    /// Malformed data, schema, model or JSON input.
    Format = 4,
    /// Instance values do not conform to the schema.
    InvalidInstance = 5,
    InvalidArgument = 6,
    NoContrastClass = 7,
    NoPath = 8,
    /// Output buffer too small; the required size is reported.
    BufferTooSmall = 9,
    Panic = 10,
    Other = 11,
}

pub struct TcfDataset(Arc<Dataset>);

pub struct TcfModel(Arc<ReferenceModel>);

pub struct TcfVae(Arc<VaeModel>);

pub struct TcfExplainer(Explainer);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(TcfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => TcfStatus::Io,
            Error::Csv(_)
            | Error::Json(_)
            | Error::Schema(_)
            | Error::Row { .. }
            | Error::Format(_) => TcfStatus::Format,
            Error::InvalidInstance(_) | Error::Dimension { .. } => TcfStatus::InvalidInstance,
            Error::InvalidArgument(_) => TcfStatus::InvalidArgument,
            Error::NoContrastClass(_) => TcfStatus::NoContrastClass,
            Error::NoPath => TcfStatus::NoPath,
            _ => TcfStatus::Other,
        };
        let message = match &e {
            Error::InvalidInstance(fields) => {
                let detail: Vec<String> = fields
                    .iter()
                    .map(|f| format!("{}: {}", f.feature, f.message))
                    .collect();
                format!("{e}: {}", detail.join("; "))
            }
            _ => e.to_string(),
        };
        Failure(status, message)
    }
}

fn null(what: &str) -> Failure {
    Failure(TcfStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TcfStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TcfStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {message}"));
            TcfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TcfStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(TcfStatus::Other, "output contains a NUL byte".into()))
}

/// Message for the most recent failure on this thread, or NULL. The pointer is
/// valid until the next `tcf_*` call on the same thread.
#[no_mangle]
pub extern "C" fn tcf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tcf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must be NULL or a pointer obtained from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tcf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a CSV data file validated against a JSON schema file.
///
/// # Safety
/// Path arguments must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcf_dataset_load(
    data_path: *const c_char,
    schema_path: *const c_char,
    out: *mut *mut TcfDataset,
) -> TcfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let data = PathBuf::from(str_arg(data_path, "data_path")?);
        let schema = PathBuf::from(str_arg(schema_path, "schema_path")?);
        let ds = load_dataset(data, schema)?;
        *out = Box::into_raw(Box::new(TcfDataset(Arc::new(ds))));
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a live handle from [`tcf_dataset_load`].
#[no_mangle]
pub unsafe extern "C" fn tcf_dataset_free(ds: *mut TcfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Row and feature counts of a dataset.
///
/// # Safety
/// `ds` must be a live handle; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcf_dataset_shape(
    ds: *const TcfDataset,
    rows: *mut usize,
    features: *mut usize,
) -> TcfStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        *out_arg(rows, "rows")? = ds.0.len();
        *out_arg(features, "features")? = ds.0.n_features();
        Ok(())
    })
}

/// Copies row `index` into `values`, which holds `capacity` doubles.
/// Categorical values are category indices.
///
/// # Safety
/// `ds` must be a live handle and `values` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn tcf_dataset_row(
    ds: *const TcfDataset,
    index: usize,
    values: *mut f64,
    capacity: usize,
) -> TcfStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        if index >= ds.0.len() {
            return Err(Failure(
                TcfStatus::InvalidArgument,
                format!("row {index} out of range for {} rows", ds.0.len()),
            ));
        }
        let row = ds.0.row(index);
        if capacity < row.len() {
            return Err(Failure(
                TcfStatus::BufferTooSmall,
                format!("row has {} values, buffer holds {capacity}", row.len()),
            ));
        }
        if values.is_null() {
            return Err(null("values"));
        }
        std::slice::from_raw_parts_mut(values, row.len()).copy_from_slice(row);
        Ok(())
    })
}

/// Loads a saved reference model.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcf_model_load(path: *const c_char, out: *mut *mut TcfModel) -> TcfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = ReferenceModel::load(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(TcfModel(Arc::new(model))));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a live handle from [`tcf_model_load`].
#[no_mangle]
pub unsafe extern "C" fn tcf_model_free(model: *mut TcfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Class probabilities for one instance. `probabilities` holds `capacity`
/// doubles; the class count is written to `classes` even when the buffer is
/// too small.
///
/// # Safety
/// `values` must hold `n_values` doubles and `probabilities` `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn tcf_model_predict(
    model: *const TcfModel,
    values: *const f64,
    n_values: usize,
    probabilities: *mut f64,
    capacity: usize,
    classes: *mut usize,
) -> TcfStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let classes = out_arg(classes, "classes")?;
        let values = slice_arg(values, n_values, "values")?;
        *classes = model.0.class_count();
        if capacity < *classes {
            return Err(Failure(
                TcfStatus::BufferTooSmall,
                format!("{} classes, buffer holds {capacity}", *classes),
            ));
        }
        if probabilities.is_null() {
            return Err(null("probabilities"));
        }
        let p = model.0.predict_proba(values)?;
        std::slice::from_raw_parts_mut(probabilities, p.len()).copy_from_slice(&p);
        Ok(())
    })
}

/// Loads a saved VAE.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcf_vae_load(path: *const c_char, out: *mut *mut TcfVae) -> TcfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let vae = VaeModel::load(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(TcfVae(Arc::new(vae))));
        Ok(())
    })
}

/// # Safety
/// `vae` must be NULL or a live handle from [`tcf_vae_load`].
#[no_mangle]
pub unsafe extern "C" fn tcf_vae_free(vae: *mut TcfVae) {
    if !vae.is_null() {
        drop(Box::from_raw(vae));
    }
}

/// Builds an explainer over a pool dataset. The explainer shares the three
/// artifacts, so the input handles may be freed afterwards.
///
/// # Safety
/// Inputs must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcf_explainer_new(
    pool: *const TcfDataset,
    model: *const TcfModel,
    vae: *const TcfVae,
    out: *mut *mut TcfExplainer,
) -> TcfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let pool = ref_arg(pool, "pool")?.0.clone();
        let model: Arc<dyn BlackBox> = ref_arg(model, "model")?.0.clone();
        let vae = ref_arg(vae, "vae")?.0.clone();
        let explainer = Explainer::new(model, pool, vae)?;
        *out = Box::into_raw(Box::new(TcfExplainer(explainer)));
        Ok(())
    })
}

/// # Safety
/// `explainer` must be NULL or a live handle from [`tcf_explainer_new`].
#[no_mangle]
pub unsafe extern "C" fn tcf_explainer_free(explainer: *mut TcfExplainer) {
    if !explainer.is_null() {
        drop(Box::from_raw(explainer));
    }
}

/// Explains one instance and writes the explanation document as JSON to
/// `out_json`. `config_json` may be NULL for the default configuration or a
/// JSON object with any subset of the configuration fields.
///
/// # Safety
/// `values` must hold `n_values` doubles; `config_json` must be NULL or a
/// NUL-terminated string; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcf_explain_json(
    explainer: *const TcfExplainer,
    values: *const f64,
    n_values: usize,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> TcfStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let explainer = ref_arg(explainer, "explainer")?;
        let values = slice_arg(values, n_values, "values")?;
        let config: RecourseConfig = if config_json.is_null() {
            RecourseConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(Error::from)?
        };
        let explanation = explainer
            .0
            .explain(&Instance::new(values.to_vec()), &config)?;
        let text = serde_json::to_string(&explanation).map_err(Error::from)?;
        *out = into_c_string(text)?;
        Ok(())
    })
}
