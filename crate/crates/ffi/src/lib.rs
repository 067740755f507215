//! C ABI over the `exitrate` library.
//!
//! Every function returns an [`ExrStatus`]. On failure a description is
//! available from [`exr_last_error_message`] on the calling thread until the
//! next failing call. Objects are opaque handles released with the matching
//! `_free` function. Panics never cross the boundary; they surface as
//! `EXR_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use exitrate::actstore::{
    read_dataset, token_average, write_dataset, ActivationDataset, SplitName, Splits,
};
use exitrate::numkernel::Matrix;
use exitrate::sampler::{
    class_rate, fit_gaussians, load_gaussians, predict_by_rate, ClassGaussians,
};
use exitrate::tgem::{load_exit_module, ExitModule, ScoreFunction};
use exitrate::{Error, ErrorClass};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExrStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad argument or configuration (CLI exit code 1).
    InvalidArgument = 2,
    /// Malformed or inconsistent data (CLI exit code 2).
    DataError = 3,
    /// Numeric failure (CLI exit code 3).
    NumericError = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExrScoreFunction {
    Rate = 0,
    Cosine = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExrSplit {
    Calibration = 0,
    Train = 1,
    Test = 2,
}

impl From<ExrSplit> for SplitName {
    fn from(s: ExrSplit) -> Self {
        match s {
            ExrSplit::Calibration => SplitName::Calibration,
            ExrSplit::Train => SplitName::Train,
            ExrSplit::Test => SplitName::Test,
        }
    }
}

/// A loaded activation container.
pub struct ExrDataset(ActivationDataset);

/// Per-class Gaussians of one layer.
pub struct ExrGaussians(ClassGaussians);

/// A trained exit module (jumper plus text head).
pub struct ExrExitModule(ExitModule);

/// Incrementally assembled container, written with [`exr_builder_write`].
pub struct ExrBuilder {
    classes: usize,
    embed_dim: usize,
    names: Vec<Option<String>>,
    descriptions: Vec<Option<String>>,
    text: Vec<Option<Vec<f64>>>,
    layers: Vec<Matrix>,
    labels: Vec<u32>,
    splits: Splits,
}

struct Failure {
    status: ExrStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.class() {
            ErrorClass::Usage => ExrStatus::InvalidArgument,
            ErrorClass::Data => ExrStatus::DataError,
            ErrorClass::Numeric => ExrStatus::NumericError,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

fn null(what: &str) -> Failure {
    Failure {
        status: ExrStatus::NullPointer,
        message: format!("{what} is null"),
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        status: ExrStatus::InvalidArgument,
        message: message.into(),
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ExrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ExrStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            ExrStatus::Panic
        }
    }
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn obj_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn exr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn exr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Averages a row-major `tokens x dim` grid over tokens into `out[dim]`.
///
/// # Safety
/// `grid` must point to `tokens * dim` doubles and `out` to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn exr_token_average(
    grid: *const f64,
    tokens: usize,
    dim: usize,
    out: *mut f64,
) -> ExrStatus {
    guard(|| {
        let len = tokens
            .checked_mul(dim)
            .ok_or_else(|| invalid("grid size overflows"))?;
        let m = Matrix::from_vec(tokens, dim, slice(grid, len, "grid")?.to_vec())?;
        let avg = token_average(&m)?;
        slice_mut(out, dim, "out")?.copy_from_slice(&avg);
        Ok(())
    })
}

// ---- datasets ----

/// Reads and validates the container at `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn exr_dataset_read(
    path: *const c_char,
    out: *mut *mut ExrDataset,
) -> ExrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = read_dataset(PathBuf::from(string(path, "path")?))?;
        out.write(Box::into_raw(Box::new(ExrDataset(ds))));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from `exr_dataset_read` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn exr_dataset_free(ds: *mut ExrDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Writes the layer, sample, class and embedding counts. Any output pointer
/// may be null to skip it.
///
/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn exr_dataset_dims(
    ds: *const ExrDataset,
    num_layers: *mut usize,
    num_samples: *mut usize,
    num_classes: *mut usize,
    embed_dim: *mut usize,
) -> ExrStatus {
    guard(|| {
        let ds = &obj(ds, "dataset")?.0;
        for (p, v) in [
            (num_layers, ds.num_layers()),
            (num_samples, ds.num_samples()),
            (num_classes, ds.num_classes()),
            (embed_dim, ds.embed_dim()),
        ] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Neuron count of 1-based `layer`.
///
/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn exr_dataset_neurons(
    ds: *const ExrDataset,
    layer: usize,
    out: *mut usize,
) -> ExrStatus {
    guard(|| {
        let n = obj(ds, "dataset")?.0.layer(layer)?.cols();
        write_out(out, n, "out")
    })
}

/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn exr_dataset_label(
    ds: *const ExrDataset,
    sample: usize,
    out: *mut u32,
) -> ExrStatus {
    guard(|| {
        let ds = &obj(ds, "dataset")?.0;
        let label = *ds
            .labels
            .get(sample)
            .ok_or_else(|| invalid(format!("sample {sample} is out of range")))?;
        write_out(out, label, "out")
    })
}

/// Copies the activation row of `sample` at 1-based `layer` into `out[len]`;
/// `len` must equal the layer's neuron count.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn exr_dataset_activation(
    ds: *const ExrDataset,
    layer: usize,
    sample: usize,
    out: *mut f64,
    len: usize,
) -> ExrStatus {
    guard(|| {
        let ds = &obj(ds, "dataset")?.0;
        let m = ds.layer(layer)?;
        if sample >= m.rows() {
            return Err(invalid(format!("sample {sample} is out of range")));
        }
        if len != m.cols() {
            return Err(Error::DimensionMismatch {
                context: "exr_dataset_activation",
                expected: m.cols(),
                got: len,
            }
            .into());
        }
        slice_mut(out, len, "out")?.copy_from_slice(m.row(sample));
        Ok(())
    })
}

/// Copies the `C x E` text embeddings, row-major, into `out[len]`.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn exr_dataset_text_embeddings(
    ds: *const ExrDataset,
    out: *mut f64,
    len: usize,
) -> ExrStatus {
    guard(|| {
        let t = &obj(ds, "dataset")?.0.text_embeddings;
        if len != t.as_slice().len() {
            return Err(Error::DimensionMismatch {
                context: "exr_dataset_text_embeddings",
                expected: t.as_slice().len(),
                got: len,
            }
            .into());
        }
        slice_mut(out, len, "out")?.copy_from_slice(t.as_slice());
        Ok(())
    })
}

// ---- container builder ----

/// Starts a container with `classes` classes and `embed_dim`-wide text
/// embeddings.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn exr_builder_new(
    classes: usize,
    embed_dim: usize,
    out: *mut *mut ExrBuilder,
) -> ExrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if classes == 0 || embed_dim == 0 {
            return Err(invalid("classes and embed_dim must be positive"));
        }
        let b = ExrBuilder {
            classes,
            embed_dim,
            names: vec![None; classes],
            descriptions: vec![None; classes],
            text: vec![None; classes],
            layers: Vec::new(),
            labels: Vec::new(),
            splits: Splits::default(),
        };
        out.write(Box::into_raw(Box::new(b)));
        Ok(())
    })
}

/// # Safety
/// `b` must come from `exr_builder_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn exr_builder_free(b: *mut ExrBuilder) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Sets name, description and unit-norm text embedding (`embed_dim`
/// doubles) of `class`.
///
/// # Safety
/// Strings must be NUL-terminated; `text` must hold `embed_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn exr_builder_set_class(
    b: *mut ExrBuilder,
    class: usize,
    name: *const c_char,
    description: *const c_char,
    text: *const f64,
) -> ExrStatus {
    guard(|| {
        let b = obj_mut(b, "builder")?;
        if class >= b.classes {
            return Err(invalid(format!("class {class} is out of range")));
        }
        b.names[class] = Some(string(name, "name")?);
        b.descriptions[class] = Some(string(description, "description")?);
        b.text[class] = Some(slice(text, b.embed_dim, "text")?.to_vec());
        Ok(())
    })
}

/// Appends the next layer as a row-major `samples x neurons` block.
///
/// # Safety
/// `data` must hold `samples * neurons` doubles.
#[no_mangle]
pub unsafe extern "C" fn exr_builder_add_layer(
    b: *mut ExrBuilder,
    data: *const f64,
    samples: usize,
    neurons: usize,
) -> ExrStatus {
    guard(|| {
        let b = obj_mut(b, "builder")?;
        let len = samples
            .checked_mul(neurons)
            .ok_or_else(|| invalid("layer size overflows"))?;
        let m = Matrix::from_vec(samples, neurons, slice(data, len, "data")?.to_vec())?;
        b.layers.push(m);
        Ok(())
    })
}

/// # Safety
/// `labels` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn exr_builder_set_labels(
    b: *mut ExrBuilder,
    labels: *const u32,
    len: usize,
) -> ExrStatus {
    guard(|| {
        let b = obj_mut(b, "builder")?;
        b.labels = slice(labels, len, "labels")?.to_vec();
        Ok(())
    })
}

/// # Safety
/// `indices` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn exr_builder_set_split(
    b: *mut ExrBuilder,
    split: ExrSplit,
    indices: *const usize,
    len: usize,
) -> ExrStatus {
    guard(|| {
        let b = obj_mut(b, "builder")?;
        let idx = slice(indices, len, "indices")?.to_vec();
        match split {
            ExrSplit::Calibration => b.splits.calibration = idx,
            ExrSplit::Train => b.splits.train = idx,
            ExrSplit::Test => b.splits.test = idx,
        }
        Ok(())
    })
}

/// Validates the assembled container and writes it to `dir`.
///
/// # Safety
/// `b` must be a live builder and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn exr_builder_write(b: *const ExrBuilder, dir: *const c_char) -> ExrStatus {
    guard(|| {
        let b = obj(b, "builder")?;
        let dir = PathBuf::from(string(dir, "dir")?);
        let missing = |c: usize| invalid(format!("class {c} was never set"));
        let mut names = Vec::with_capacity(b.classes);
        let mut descriptions = Vec::with_capacity(b.classes);
        let mut rows = Vec::with_capacity(b.classes);
        for c in 0..b.classes {
            names.push(b.names[c].clone().ok_or_else(|| missing(c))?);
            descriptions.push(b.descriptions[c].clone().ok_or_else(|| missing(c))?);
            rows.push(b.text[c].clone().ok_or_else(|| missing(c))?);
        }
        let ds = ActivationDataset {
            layers: b.layers.clone(),
            labels: b.labels.clone(),
            class_names: names,
            descriptions,
            text_embeddings: Matrix::from_rows(&rows)?,
            splits: b.splits.clone(),
        };
        write_dataset(&ds, dir)?;
        Ok(())
    })
}

// ---- sampling-based Gaussians ----

/// Fits per-class Gaussians at 1-based `layer` from the first `cap` samples
/// per class of `split`.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn exr_gaussians_fit(
    ds: *const ExrDataset,
    layer: usize,
    split: ExrSplit,
    cap: usize,
    out: *mut *mut ExrGaussians,
) -> ExrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let g = fit_gaussians(&obj(ds, "dataset")?.0, layer, split.into(), cap)?;
        out.write(Box::into_raw(Box::new(ExrGaussians(g))));
        Ok(())
    })
}

/// Loads `gaussians_layer_<layer>` from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn exr_gaussians_load(
    dir: *const c_char,
    layer: usize,
    out: *mut *mut ExrGaussians,
) -> ExrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let g = load_gaussians(PathBuf::from(string(dir, "dir")?), layer)?;
        out.write(Box::into_raw(Box::new(ExrGaussians(g))));
        Ok(())
    })
}

/// # Safety
/// `g` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn exr_gaussians_free(g: *mut ExrGaussians) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// # Safety
/// `g` must be a live handle; null outputs are skipped.
#[no_mangle]
pub unsafe extern "C" fn exr_gaussians_dims(
    g: *const ExrGaussians,
    num_classes: *mut usize,
    num_neurons: *mut usize,
) -> ExrStatus {
    guard(|| {
        let g = &obj(g, "gaussians")?.0;
        if !num_classes.is_null() {
            num_classes.write(g.num_classes());
        }
        if !num_neurons.is_null() {
            num_neurons.write(g.num_neurons());
        }
        Ok(())
    })
}

/// Class-rate of `act[n]` under every class, written to `rates[c]`.
///
/// # Safety
/// `act` must hold `n` doubles and `rates` `c` doubles.
#[no_mangle]
pub unsafe extern "C" fn exr_class_rate(
    g: *const ExrGaussians,
    act: *const f64,
    n: usize,
    rates: *mut f64,
    c: usize,
) -> ExrStatus {
    guard(|| {
        let g = &obj(g, "gaussians")?.0;
        if c != g.num_classes() {
            return Err(Error::DimensionMismatch {
                context: "exr_class_rate (classes)",
                expected: g.num_classes(),
                got: c,
            }
            .into());
        }
        let r = class_rate(slice(act, n, "act")?, g)?;
        slice_mut(rates, c, "rates")?.copy_from_slice(&r);
        Ok(())
    })
}

/// Class with the lowest rate for `act[n]`.
///
/// # Safety
/// `act` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn exr_predict_by_rate(
    g: *const ExrGaussians,
    act: *const f64,
    n: usize,
    out: *mut usize,
) -> ExrStatus {
    guard(|| {
        let g = &obj(g, "gaussians")?.0;
        let class = predict_by_rate(slice(act, n, "act")?, g)?;
        write_out(out, class, "out")
    })
}

// ---- learned exit modules ----

/// Loads `exit_<layer>` from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn exr_exit_module_load(
    dir: *const c_char,
    layer: usize,
    out: *mut *mut ExrExitModule,
) -> ExrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let em = load_exit_module(PathBuf::from(string(dir, "dir")?), layer)?;
        out.write(Box::into_raw(Box::new(ExrExitModule(em))));
        Ok(())
    })
}

/// # Safety
/// `em` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn exr_exit_module_free(em: *mut ExrExitModule) {
    if !em.is_null() {
        drop(Box::from_raw(em));
    }
}

/// Exact number of parameters in the jumper and text head.
///
/// # Safety
/// `em` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn exr_exit_module_parameter_count(
    em: *const ExrExitModule,
    out: *mut usize,
) -> ExrStatus {
    guard(|| {
        let n = obj(em, "exit module")?.0.parameter_count();
        write_out(out, n, "out")
    })
}

/// Rate in bits of `act[n]` under the Gaussian predicted from `text[e]`.
///
/// # Safety
/// `act` must hold `n` doubles and `text` `e` doubles.
#[no_mangle]
pub unsafe extern "C" fn exr_exit_module_forward_rate(
    em: *const ExrExitModule,
    act: *const f64,
    n: usize,
    text: *const f64,
    e: usize,
    out: *mut f64,
) -> ExrStatus {
    guard(|| {
        let em = &obj(em, "exit module")?.0;
        let r = em.forward_rate(slice(act, n, "act")?, slice(text, e, "text")?)?;
        write_out(out, r, "out")
    })
}

/// Predicted class of `act[n]` given `c` row-major text embeddings of width
/// `e`.
///
/// # Safety
/// `act` must hold `n` doubles and `text_embs` `c * e` doubles.
#[no_mangle]
pub unsafe extern "C" fn exr_exit_module_predict(
    em: *const ExrExitModule,
    act: *const f64,
    n: usize,
    text_embs: *const f64,
    c: usize,
    e: usize,
    score: ExrScoreFunction,
    out: *mut usize,
) -> ExrStatus {
    guard(|| {
        let em = &obj(em, "exit module")?.0;
        let len = c
            .checked_mul(e)
            .ok_or_else(|| invalid("text size overflows"))?;
        let texts = Matrix::from_vec(c, e, slice(text_embs, len, "text_embs")?.to_vec())?;
        let sf = match score {
            ExrScoreFunction::Rate => ScoreFunction::Rate,
            ExrScoreFunction::Cosine => ScoreFunction::Cosine,
        };
        let class = em.predict(slice(act, n, "act")?, &texts, sf)?;
        write_out(out, class, "out")
    })
}
