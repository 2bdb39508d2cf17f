use std::ffi::{CStr, CString};
use std::ptr;

use gcl_core::embedding::{EmbeddingMatrix, Modality};
use gcl_core::losses::{gcl_loss as core_gcl_loss, LossConfig, TripletBatch};
use gcl_ffi::*;

fn last_error() -> String {
    let p = gcl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn rows(n: usize, d: usize, salt: f64) -> Vec<f64> {
    (0..n * d).map(|i| ((i as f64 + 1.0) * (0.37 + salt)).sin()).collect()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(gcl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn dataset_generate_pair_and_round_trip() {
    let mut ds = ptr::null_mut();
    let st = unsafe { gcl_dataset_generate(12, 4, 8, 0.1, 7, &mut ds) };
    assert_eq!(st, GclStatus::Ok);
    unsafe {
        assert_eq!(gcl_dataset_len(ds), 12);
        assert_eq!(gcl_dataset_dim(ds), 8);
    }
    let mut cid = 0u32;
    let mut xi = [0f32; 8];
    let mut xt = [0f32; 8];
    assert_eq!(unsafe { gcl_dataset_pair(ds, 3, &mut cid, xi.as_mut_ptr(), xt.as_mut_ptr()) }, GclStatus::Ok);
    assert!(cid < 4);
    assert!(xi.iter().any(|&v| v != 0.0));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("d.gcld").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { gcl_dataset_write(ds, path.as_ptr()) }, GclStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { gcl_dataset_read(path.as_ptr(), &mut back) }, GclStatus::Ok);
    let mut cid2 = 0u32;
    let mut xi2 = [0f32; 8];
    assert_eq!(unsafe { gcl_dataset_pair(back, 3, &mut cid2, xi2.as_mut_ptr(), ptr::null_mut()) }, GclStatus::Ok);
    assert_eq!((cid, xi), (cid2, xi2));

    assert_eq!(unsafe { gcl_dataset_pair(ds, 12, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) }, GclStatus::OutOfRange);
    unsafe {
        gcl_dataset_free(ds);
        gcl_dataset_free(back);
    }
}

#[test]
fn dataset_errors_map_to_codes() {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { gcl_dataset_generate(10, 9, 8, 0.1, 0, &mut ds) }, GclStatus::ShapeMismatch);
    assert!(last_error().contains('9'));
    assert!(ds.is_null());
    let missing = CString::new("/nonexistent/dir/x.gcld").unwrap();
    assert_eq!(unsafe { gcl_dataset_read(missing.as_ptr(), &mut ds) }, GclStatus::Io);
    assert_eq!(unsafe { gcl_dataset_read(ptr::null(), &mut ds) }, GclStatus::NullPointer);
    assert_eq!(unsafe { gcl_dataset_len(ptr::null()) }, 0);
    unsafe { gcl_dataset_free(ptr::null_mut()) };
}

#[test]
fn loss_matches_core() {
    let (n, d) = (4, 5);
    let (img, txt) = (rows(n, d, 0.0), rows(n, d, 0.11));
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { gcl_batch_new(img.as_ptr(), txt.as_ptr(), n, d, 1, &mut b) }, GclStatus::Ok);

    let i = EmbeddingMatrix::normalized(ndarray::Array2::from_shape_vec((n, d), img).unwrap(), Modality::Image).unwrap();
    let t = EmbeddingMatrix::normalized(ndarray::Array2::from_shape_vec((n, d), txt).unwrap(), Modality::Text).unwrap();
    let f = gcl_core::embedding::fuse_rows(&i, &t, true).unwrap();
    let batch = TripletBatch::new(i, t, f).unwrap();
    let want = core_gcl_loss(&batch, &LossConfig::with_tau(0.2)).unwrap();

    let name = CString::new("gcl").unwrap();
    let mut value = 0.0;
    let mut gi = vec![0.0; n * d];
    let mut gf = vec![0.0; n * d];
    let st = unsafe { gcl_loss(b, name.as_ptr(), 0.2, &mut value, gi.as_mut_ptr(), ptr::null_mut(), gf.as_mut_ptr()) };
    assert_eq!(st, GclStatus::Ok);
    assert_eq!(value, want.value);
    assert_eq!(gi, want.grad_images.iter().copied().collect::<Vec<_>>());
    assert_eq!(gf, want.grad_fused.iter().copied().collect::<Vec<_>>());

    let mut fused = vec![0.0; n * d];
    assert_eq!(unsafe { gcl_batch_fused(b, fused.as_mut_ptr()) }, GclStatus::Ok);
    assert_eq!(fused, batch.fused.rows().iter().copied().collect::<Vec<_>>());

    let bad = CString::new("nope").unwrap();
    assert_eq!(unsafe { gcl_loss(b, bad.as_ptr(), 0.2, &mut value, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) }, GclStatus::InvalidArgument);
    assert_eq!(unsafe { gcl_loss(b, name.as_ptr(), 0.0, &mut value, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) }, GclStatus::InvalidArgument);
    unsafe { gcl_batch_free(b) };
}

#[test]
fn zero_row_is_reported() {
    let (n, d) = (2, 3);
    let mut img = rows(n, d, 0.0);
    img[..d].fill(0.0);
    let txt = rows(n, d, 0.3);
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { gcl_batch_new(img.as_ptr(), txt.as_ptr(), n, d, 1, &mut b) }, GclStatus::ZeroVector);
    assert!(b.is_null());
    assert_eq!(unsafe { gcl_batch_new(ptr::null(), txt.as_ptr(), n, d, 1, &mut b) }, GclStatus::NullPointer);
}

#[test]
fn pool_top_k_orders_and_breaks_ties() {
    // Ids 5 and 2 share an embedding; 2 must come first.
    let emb = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.6, 0.8];
    let ids = [5u64, 9, 2, 4];
    let mods = [GclModality::Image, GclModality::Text, GclModality::Fused, GclModality::Image];
    let mut pool = ptr::null_mut();
    assert_eq!(unsafe { gcl_pool_new(emb.as_ptr(), ids.as_ptr(), mods.as_ptr(), 4, 2, &mut pool) }, GclStatus::Ok);
    let q = [1.0, 0.1];
    let mut out = [0u64; 3];
    assert_eq!(unsafe { gcl_pool_top_k(pool, q.as_ptr(), 2, 3, out.as_mut_ptr()) }, GclStatus::Ok);
    assert_eq!(out, [2, 5, 4]);
    assert_eq!(unsafe { gcl_pool_top_k(pool, q.as_ptr(), 2, 5, out.as_mut_ptr()) }, GclStatus::OutOfRange);
    unsafe { gcl_pool_free(pool) };

    let dup = [5u64, 5, 2, 4];
    let mut p2 = ptr::null_mut();
    assert_eq!(unsafe { gcl_pool_new(emb.as_ptr(), dup.as_ptr(), mods.as_ptr(), 4, 2, &mut p2) }, GclStatus::InvalidArgument);
    assert!(last_error().contains('5'));
}

#[test]
fn schedule_anchors() {
    let mut lr = f64::NAN;
    unsafe {
        assert_eq!(gcl_lr_at(0, 500, 10_000, 1e-3, &mut lr), GclStatus::Ok);
        assert_eq!(lr, 0.0);
        assert_eq!(gcl_lr_at(500, 500, 10_000, 1e-3, &mut lr), GclStatus::Ok);
        assert!((lr - 1e-3).abs() < 1e-15);
        assert_eq!(gcl_lr_at(10_001, 500, 10_000, 1e-3, &mut lr), GclStatus::OutOfRange);
        assert_eq!(gcl_lr_at(0, 500, 10_000, 1e-3, ptr::null_mut()), GclStatus::NullPointer);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/gcl.h")).unwrap();
    for f in [
        "gcl_last_error",
        "gcl_version",
        "gcl_dataset_generate",
        "gcl_dataset_read",
        "gcl_dataset_write",
        "gcl_dataset_len",
        "gcl_dataset_dim",
        "gcl_dataset_pair",
        "gcl_dataset_free",
        "gcl_batch_new",
        "gcl_batch_fused",
        "gcl_batch_free",
        "gcl_loss",
        "gcl_pool_new",
        "gcl_pool_top_k",
        "gcl_pool_free",
        "gcl_lr_at",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct GclPool GclPool;"));
}
