//! C ABI over `milret`.
//!
//! Conventions:
//! * every fallible function returns a [`MilretStatus`]; on failure a
//!   message is available from [`milret_last_error`] on the same thread;
//! * stores and models are opaque handles created by `*_read`/`*_new`
//!   functions and released with the matching `*_free`;
//! * output arrays are caller-allocated with the documented length;
//! * panics never cross the boundary and surface as `MILRET_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use milret::dedup::{ncc, DedupConfig, Raster};
use milret::embedstore::{read_store, write_store, EmbeddingStore, Modality};
use milret::milopt::{evaluate, AdapterModel, Batch, LossConfig, LossKind, Side};
use milret::retrieval::Recall;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MilretStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Format = 3,
    Io = 4,
    NotFound = 5,
    Optimization = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MilretModality {
    Image = 0,
    Text = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MilretLoss {
    Clip = 0,
    MilMax = 1,
    MilSoftmax = 2,
    MilNce = 3,
}

/// Opaque embedding store.
pub struct MilretStore(EmbeddingStore);

/// Opaque adapter model.
pub struct MilretModel(AdapterModel);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

type Failure = (MilretStatus, String);

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MilretStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MilretStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MilretStatus::Panic
        }
    }
}

fn fail<T>(status: MilretStatus, msg: impl ToString) -> Result<T, Failure> {
    Err((status, msg.to_string()))
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or((MilretStatus::NullPointer, format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(MilretStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (MilretStatus::InvalidArgument, format!("{what}: {e}")))
}

unsafe fn array<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(MilretStatus::NullPointer, format!("{what} is null"));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn array_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return fail(MilretStatus::NullPointer, format!("{what} is null"));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn milret_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn milret_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Read an embedding file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn milret_store_read(
    path: *const c_char,
    out: *mut *mut MilretStore,
) -> MilretStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        if out.is_null() {
            return fail(MilretStatus::NullPointer, "out is null");
        }
        let bytes = std::fs::read(path).map_err(|e| (MilretStatus::Io, format!("{path}: {e}")))?;
        let store = read_store(&bytes).map_err(|e| (MilretStatus::Format, e.to_string()))?;
        *out = Box::into_raw(Box::new(MilretStore(store)));
        Ok(())
    })
}

/// Build a store from `count` ids and a row-major `count × dim` matrix.
///
/// # Safety
/// `ids` must hold `count` NUL-terminated strings, `rows` `count * dim`
/// floats, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn milret_store_new(
    modality: MilretModality,
    dim: usize,
    count: usize,
    ids: *const *const c_char,
    rows: *const f32,
    out: *mut *mut MilretStore,
) -> MilretStatus {
    guard(|| {
        if out.is_null() {
            return fail(MilretStatus::NullPointer, "out is null");
        }
        if dim == 0 {
            return fail(MilretStatus::InvalidArgument, "dim must be positive");
        }
        let ids = array(ids, count, "ids")?;
        let rows = array(rows, count * dim, "rows")?;
        let modality = match modality {
            MilretModality::Image => Modality::Image,
            MilretModality::Text => Modality::Text,
        };
        let mut store = EmbeddingStore::new(modality, dim);
        for (k, &id) in ids.iter().enumerate() {
            let id = c_str(id, "id")?;
            store
                .push(id.to_string(), &rows[k * dim..(k + 1) * dim])
                .map_err(|e| (MilretStatus::InvalidArgument, e.to_string()))?;
        }
        *out = Box::into_raw(Box::new(MilretStore(store)));
        Ok(())
    })
}

/// Write a store to `path`.
///
/// # Safety
/// `store` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn milret_store_write(
    store: *const MilretStore,
    path: *const c_char,
) -> MilretStatus {
    guard(|| {
        let store = non_null(store, "store")?;
        let path = c_str(path, "path")?;
        let bytes = write_store(&store.0).map_err(|e| (MilretStatus::Format, e.to_string()))?;
        std::fs::write(Path::new(path), bytes)
            .map_err(|e| (MilretStatus::Io, format!("{path}: {e}")))
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `store` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn milret_store_len(store: *const MilretStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.len())
}

/// Row dimension, or 0 for a null handle.
///
/// # Safety
/// `store` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn milret_store_dim(store: *const MilretStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.dim())
}

/// Copy the row for `id` into `out` (`dim` floats).
///
/// # Safety
/// `store` must come from this library, `id` must be NUL-terminated and
/// `out` must hold `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn milret_store_get(
    store: *const MilretStore,
    id: *const c_char,
    out: *mut f32,
    dim: usize,
) -> MilretStatus {
    guard(|| {
        let store = non_null(store, "store")?;
        let id = c_str(id, "id")?;
        if dim != store.0.dim() {
            return fail(
                MilretStatus::InvalidArgument,
                format!("buffer holds {dim}, rows have {}", store.0.dim()),
            );
        }
        let out = array_mut(out, dim, "out")?;
        match store.0.get(id) {
            Some(row) => {
                out.copy_from_slice(row);
                Ok(())
            }
            None => fail(MilretStatus::NotFound, format!("no row for {id}")),
        }
    })
}

/// # Safety
/// `store` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn milret_store_free(store: *mut MilretStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Load an adapter checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn milret_model_read(
    path: *const c_char,
    out: *mut *mut MilretModel,
) -> MilretStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        if out.is_null() {
            return fail(MilretStatus::NullPointer, "out is null");
        }
        let bytes = std::fs::read(path).map_err(|e| (MilretStatus::Io, format!("{path}: {e}")))?;
        let model = AdapterModel::from_checkpoint(&bytes)
            .map_err(|e| (MilretStatus::Format, e.to_string()))?;
        *out = Box::into_raw(Box::new(MilretModel(model)));
        Ok(())
    })
}

/// Identity adapter of dimension `dim`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn milret_model_identity(
    dim: usize,
    sigma: f64,
    out: *mut *mut MilretModel,
) -> MilretStatus {
    guard(|| {
        if out.is_null() {
            return fail(MilretStatus::NullPointer, "out is null");
        }
        if dim == 0 || sigma.is_nan() || sigma <= 0.0 {
            return fail(
                MilretStatus::InvalidArgument,
                "dim and sigma must be positive",
            );
        }
        *out = Box::into_raw(Box::new(MilretModel(AdapterModel::identity(dim, sigma))));
        Ok(())
    })
}

/// Embed one raw vector (`dim` values) through the image or text head;
/// the result is unit length.
///
/// # Safety
/// `model` must come from this library; `input` and `out` must hold `dim`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn milret_model_embed(
    model: *const MilretModel,
    modality: MilretModality,
    input: *const f64,
    out: *mut f64,
    dim: usize,
) -> MilretStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        if dim != model.0.dim {
            return fail(
                MilretStatus::InvalidArgument,
                format!("model dim is {}, got {dim}", model.0.dim),
            );
        }
        let input = array(input, dim, "input")?;
        let out = array_mut(out, dim, "out")?;
        let side = match modality {
            MilretModality::Image => Side::Image,
            MilretModality::Text => Side::Text,
        };
        match model.0.embed(side, input) {
            Some(v) => {
                out.copy_from_slice(&v);
                Ok(())
            }
            None => fail(MilretStatus::InvalidArgument, "zero-norm vector"),
        }
    })
}

/// Current temperature of the model, or NaN for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn milret_model_sigma(model: *const MilretModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.0.sigma)
}

/// # Safety
/// `model` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn milret_model_free(model: *mut MilretModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Contrastive loss of a batch and its gradients.
///
/// `images` is `batch × dim`; bag `i` owns texts `offsets[i]..offsets[i+1]`
/// of the `offsets[batch] × dim` matrix `texts`. Gradient outputs may be
/// null when not needed; otherwise they match the input shapes.
///
/// # Safety
/// All non-null pointers must reference arrays of the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn milret_loss(
    kind: MilretLoss,
    sigma: f64,
    sigma_sm: f64,
    batch: usize,
    dim: usize,
    images: *const f64,
    texts: *const f64,
    offsets: *const usize,
    out_value: *mut f64,
    out_d_images: *mut f64,
    out_d_texts: *mut f64,
    out_d_sigma: *mut f64,
) -> MilretStatus {
    guard(|| {
        if out_value.is_null() {
            return fail(MilretStatus::NullPointer, "out_value is null");
        }
        if dim == 0 {
            return fail(MilretStatus::InvalidArgument, "dim must be positive");
        }
        let offsets = array(offsets, batch + 1, "offsets")?;
        if offsets[0] != 0 || offsets.windows(2).any(|w| w[1] < w[0]) {
            return fail(
                MilretStatus::InvalidArgument,
                "offsets must start at 0 and not decrease",
            );
        }
        let n_texts = offsets[batch];
        let images = array(images, batch * dim, "images")?;
        let texts = array(texts, n_texts * dim, "texts")?;
        let image_rows: Vec<Vec<f64>> = images.chunks(dim).map(<[f64]>::to_vec).collect();
        let bags: Vec<Vec<Vec<f64>>> = offsets
            .windows(2)
            .map(|w| {
                texts[w[0] * dim..w[1] * dim]
                    .chunks(dim)
                    .map(<[f64]>::to_vec)
                    .collect()
            })
            .collect();
        let b = Batch::new(image_rows, bags)
            .map_err(|e| (MilretStatus::InvalidArgument, e.to_string()))?;
        let kind = match kind {
            MilretLoss::Clip => LossKind::Clip,
            MilretLoss::MilMax => LossKind::MilMax,
            MilretLoss::MilSoftmax => LossKind::MilSoftmax,
            MilretLoss::MilNce => LossKind::MilNce,
        };
        let cfg = LossConfig {
            kind,
            sigma,
            sigma_sm,
        };
        cfg.validate()
            .map_err(|e| (MilretStatus::InvalidArgument, e.to_string()))?;
        let lg = evaluate(&b, &cfg).map_err(|e| (MilretStatus::Optimization, e.to_string()))?;
        *out_value = lg.value;
        if !out_d_images.is_null() {
            array_mut(out_d_images, batch * dim, "out_d_images")?.copy_from_slice(&lg.d_images);
        }
        if !out_d_texts.is_null() {
            array_mut(out_d_texts, n_texts * dim, "out_d_texts")?.copy_from_slice(&lg.d_texts);
        }
        if !out_d_sigma.is_null() {
            *out_d_sigma = lg.d_sigma;
        }
        Ok(())
    })
}

/// Normalized cross-correlation of two 8-bit grayscale rasters after
/// resizing both to `side × side`.
///
/// # Safety
/// `a` must hold `aw * ah` bytes, `b` `bw * bh` bytes, `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn milret_ncc(
    a: *const u8,
    aw: usize,
    ah: usize,
    b: *const u8,
    bw: usize,
    bh: usize,
    side: usize,
    out: *mut f64,
) -> MilretStatus {
    guard(|| {
        if out.is_null() {
            return fail(MilretStatus::NullPointer, "out is null");
        }
        if aw * ah == 0 || bw * bh == 0 || side == 0 {
            return fail(
                MilretStatus::InvalidArgument,
                "rasters and side must be non-empty",
            );
        }
        let ra = Raster::new(aw, ah, array(a, aw * ah, "a")?.to_vec());
        let rb = Raster::new(bw, bh, array(b, bw * bh, "b")?.to_vec());
        let cfg = DedupConfig {
            resize_side: side,
            ..Default::default()
        };
        *out = ncc(&ra, &rb, &cfg);
        Ok(())
    })
}

/// Recall@1/5/10 from per-query best-positive ranks (0-based; negative
/// for queries without a positive). Writes three doubles to `out`.
///
/// # Safety
/// `ranks` must hold `n` values and `out` three doubles.
#[no_mangle]
pub unsafe extern "C" fn milret_recall(ranks: *const i64, n: usize, out: *mut f64) -> MilretStatus {
    guard(|| {
        let ranks: Vec<Option<usize>> = array(ranks, n, "ranks")?
            .iter()
            .map(|&r| usize::try_from(r).ok())
            .collect();
        let out = array_mut(out, 3, "out")?;
        let r = Recall::from_ranks(&ranks);
        out.copy_from_slice(&[r.r1, r.r5, r.r10]);
        Ok(())
    })
}
