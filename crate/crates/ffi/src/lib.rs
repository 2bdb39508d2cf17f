//! C ABI over `gcl-core`.
//!
//! Every fallible function returns a [`GclStatus`]; on failure the message
//! is available from [`gcl_last_error`] on the same thread. Objects are
//! opaque handles created by `*_new`/`*_generate`/`*_read` functions and
//! released with the matching `*_free`. Matrices are row-major `double`
//! buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gcl_core::embedding::{fuse_rows, Embedding, EmbeddingMatrix, Modality};
use gcl_core::losses::{LossConfig, LossVariant, TripletBatch};
use gcl_core::retrieval::{top_k, Candidate, PoolSetting, RetrievalPool};
use gcl_core::synthetic::{generate_dataset, read_dataset, write_dataset, DatasetManifest, GenerateParams, SyntheticPair};
use gcl_core::trainer::{lr_at, ScheduleConfig};
use gcl_core::Error;
use ndarray::Array2;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    ZeroVector = 4,
    Io = 5,
    Format = 6,
    Numeric = 7,
    OutOfRange = 8,
    Panic = 99,
}

/// Modality tag for pool candidates.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GclModality {
    Image = 0,
    Text = 1,
    Fused = 2,
}

impl From<GclModality> for Modality {
    fn from(m: GclModality) -> Self {
        match m {
            GclModality::Image => Modality::Image,
            GclModality::Text => Modality::Text,
            GclModality::Fused => Modality::Fused,
        }
    }
}

/// Synthetic paired dataset.
pub struct GclDataset {
    pairs: Vec<SyntheticPair>,
    manifest: DatasetManifest,
}

/// Aligned image, text and fused embeddings.
pub struct GclBatch {
    batch: TripletBatch,
}

/// Candidate pool for top-k search.
pub struct GclPool {
    pool: RetrievalPool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> GclStatus {
    match err {
        Error::ZeroVector => GclStatus::ZeroVector,
        Error::ShapeMismatch(_) | Error::BatchTooSmall { .. } | Error::InvalidDims { .. } => GclStatus::ShapeMismatch,
        Error::Io { .. } => GclStatus::Io,
        Error::Format { .. } | Error::Json(_) => GclStatus::Format,
        Error::NonFiniteGradient { .. } | Error::DivergenceDetected { .. } | Error::NoConvergence { .. } => {
            GclStatus::Numeric
        }
        Error::KOutOfRange { .. } | Error::EmptyPool | Error::StepOutOfRange { .. } => GclStatus::OutOfRange,
        _ => GclStatus::InvalidArgument,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (GclStatus, String)>) -> GclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GclStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GclStatus::Panic
        }
    }
}

fn core(err: Error) -> (GclStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (GclStatus, String) {
    (GclStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (GclStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (GclStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (GclStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

unsafe fn matrix(p: *const f64, n: usize, d: usize, what: &str) -> Result<Array2<f64>, (GclStatus, String)> {
    let data = slice(p, n * d, what)?;
    Ok(Array2::from_shape_vec((n, d), data.to_vec()).expect("length checked"))
}

unsafe fn copy_out(src: &Array2<f64>, dst: *mut f64) {
    if !dst.is_null() {
        let data: Vec<f64> = src.iter().copied().collect();
        ptr::copy_nonoverlapping(data.as_ptr(), dst, data.len());
    }
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn gcl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn gcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a dataset with one pair per concept.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn gcl_dataset_generate(
    n_pairs: usize,
    k: usize,
    d_in: usize,
    sigma: f32,
    seed: u64,
    out: *mut *mut GclDataset,
) -> GclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (pairs, manifest) = generate_dataset(&GenerateParams::new(n_pairs, k, d_in, sigma, seed)).map_err(core)?;
        *out = Box::into_raw(Box::new(GclDataset { pairs, manifest }));
        Ok(())
    })
}

/// Reads a dataset file (and its JSON sidecar).
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gcl_dataset_read(path: *const c_char, out: *mut *mut GclDataset) -> GclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (pairs, manifest) = read_dataset(&path_arg(path)?).map_err(core)?;
        *out = Box::into_raw(Box::new(GclDataset { pairs, manifest }));
        Ok(())
    })
}

/// Writes a dataset file plus its JSON sidecar.
///
/// # Safety
/// `ds` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gcl_dataset_write(ds: *const GclDataset, path: *const c_char) -> GclStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        write_dataset(&ds.pairs, &ds.manifest, &path_arg(path)?).map_err(core)
    })
}

/// Number of pairs, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gcl_dataset_len(ds: *const GclDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.pairs.len())
}

/// Feature width, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gcl_dataset_dim(ds: *const GclDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.manifest.d_in)
}

/// Copies pair `index` into caller buffers of `d_in` floats each. Any
/// output pointer may be null.
///
/// # Safety
/// `ds` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcl_dataset_pair(
    ds: *const GclDataset,
    index: usize,
    concept_id: *mut u32,
    x_img: *mut f32,
    x_txt: *mut f32,
) -> GclStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let p = ds
            .pairs
            .get(index)
            .ok_or_else(|| (GclStatus::OutOfRange, format!("pair {index} of {}", ds.pairs.len())))?;
        if !concept_id.is_null() {
            *concept_id = p.concept_id;
        }
        if !x_img.is_null() {
            ptr::copy_nonoverlapping(p.x_img.as_ptr(), x_img, p.x_img.len());
        }
        if !x_txt.is_null() {
            ptr::copy_nonoverlapping(p.x_txt.as_ptr(), x_txt, p.x_txt.len());
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gcl_dataset_free(ds: *mut GclDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Builds a batch from `n x d` image and text embeddings. Rows are
/// normalized; the fused rows are their sum, renormalized when
/// `renormalize` is non-zero.
///
/// # Safety
/// `images` and `texts` must each hold `n * d` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gcl_batch_new(
    images: *const f64,
    texts: *const f64,
    n: usize,
    d: usize,
    renormalize: u8,
    out: *mut *mut GclBatch,
) -> GclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let img = EmbeddingMatrix::normalized(matrix(images, n, d, "images")?, Modality::Image).map_err(core)?;
        let txt = EmbeddingMatrix::normalized(matrix(texts, n, d, "texts")?, Modality::Text).map_err(core)?;
        let fused = fuse_rows(&img, &txt, renormalize != 0).map_err(core)?;
        let batch = TripletBatch::new(img, txt, fused).map_err(core)?;
        *out = Box::into_raw(Box::new(GclBatch { batch }));
        Ok(())
    })
}

/// Copies the fused rows (`n * d` doubles) into `out`.
///
/// # Safety
/// `batch` must be a live handle and `out` hold `n * d` doubles.
#[no_mangle]
pub unsafe extern "C" fn gcl_batch_fused(batch: *const GclBatch, out: *mut f64) -> GclStatus {
    guard(|| {
        let b = batch.as_ref().ok_or_else(|| null("batch"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        copy_out(b.batch.fused.rows(), out);
        Ok(())
    })
}

/// # Safety
/// `batch` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gcl_batch_free(batch: *mut GclBatch) {
    if !batch.is_null() {
        drop(Box::from_raw(batch));
    }
}

/// Evaluates a loss by name (`cl`, `gcl`, `gcl_ablation:<drop>`, `imsep`)
/// at temperature `tau`. Gradient buffers (`n * d` doubles each) may be
/// null when not needed.
///
/// # Safety
/// `batch` must be a live handle, `variant` a nul-terminated string, and
/// non-null outputs writable with the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn gcl_loss(
    batch: *const GclBatch,
    variant: *const c_char,
    tau: f64,
    value: *mut f64,
    grad_images: *mut f64,
    grad_texts: *mut f64,
    grad_fused: *mut f64,
) -> GclStatus {
    guard(|| {
        let b = batch.as_ref().ok_or_else(|| null("batch"))?;
        if variant.is_null() {
            return Err(null("variant"));
        }
        if value.is_null() {
            return Err(null("value"));
        }
        let name = CStr::from_ptr(variant)
            .to_str()
            .map_err(|_| (GclStatus::InvalidArgument, "variant is not UTF-8".to_string()))?;
        let v: LossVariant = name.parse().map_err(core)?;
        let out = v.evaluate(&b.batch, &LossConfig::with_tau(tau)).map_err(core)?;
        *value = out.value;
        copy_out(&out.grad_images, grad_images);
        copy_out(&out.grad_texts, grad_texts);
        copy_out(&out.grad_fused, grad_fused);
        Ok(())
    })
}

/// Builds a pool of `n` candidates with `d`-dimensional embeddings,
/// distinct `ids`, and per-candidate `modalities`.
///
/// # Safety
/// `embeddings` must hold `n * d` doubles, `ids` and `modalities` `n`
/// entries each; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gcl_pool_new(
    embeddings: *const f64,
    ids: *const u64,
    modalities: *const GclModality,
    n: usize,
    d: usize,
    out: *mut *mut GclPool,
) -> GclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let e = slice(embeddings, n * d, "embeddings")?;
        let ids = slice(ids, n, "ids")?;
        let mods = slice(modalities, n, "modalities")?;
        let cands = (0..n)
            .map(|i| Candidate::new(ids[i], Embedding::new(e[i * d..(i + 1) * d].to_vec(), mods[i].into()), "ffi"))
            .collect();
        let pool = RetrievalPool::new(cands, PoolSetting::Global).map_err(core)?;
        *out = Box::into_raw(Box::new(GclPool { pool }));
        Ok(())
    })
}

/// Writes the ids of the `k` best candidates for `query` (length `d`) into
/// `out_ids`, best first. Ties go to the smaller id.
///
/// # Safety
/// `pool` must be a live handle, `query` hold `d` doubles, `out_ids` `k`
/// entries.
#[no_mangle]
pub unsafe extern "C" fn gcl_pool_top_k(
    pool: *const GclPool,
    query: *const f64,
    d: usize,
    k: usize,
    out_ids: *mut u64,
) -> GclStatus {
    guard(|| {
        let p = pool.as_ref().ok_or_else(|| null("pool"))?;
        let q = slice(query, d, "query")?;
        if out_ids.is_null() {
            return Err(null("out_ids"));
        }
        let ids = top_k(&Embedding::new(q.to_vec(), Modality::Image), &p.pool, k).map_err(core)?;
        ptr::copy_nonoverlapping(ids.as_ptr(), out_ids, ids.len());
        Ok(())
    })
}

/// # Safety
/// `pool` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gcl_pool_free(pool: *mut GclPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

/// Learning rate at `step` under linear warmup then cosine decay.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcl_lr_at(
    step: usize,
    warmup_steps: usize,
    total_steps: usize,
    base_lr: f64,
    out: *mut f64,
) -> GclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let sched = ScheduleConfig::new(warmup_steps, total_steps, base_lr).map_err(core)?;
        *out = lr_at(step, &sched).map_err(core)?;
        Ok(())
    })
}
