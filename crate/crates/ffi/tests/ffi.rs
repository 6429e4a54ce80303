use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use milret_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(milret_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn store_round_trip_through_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = CString::new(tmp.path().join("s.emb").to_str().unwrap()).unwrap();
    let ids = [CString::new("d/a").unwrap(), CString::new("d/b").unwrap()];
    let id_ptrs: Vec<_> = ids.iter().map(|s| s.as_ptr()).collect();
    let rows = [1.0f32, 2.0, 3.0, -4.0, 5.0, 6.0];
    unsafe {
        let mut store = ptr::null_mut();
        assert_eq!(
            milret_store_new(
                MilretModality::Text,
                3,
                2,
                id_ptrs.as_ptr(),
                rows.as_ptr(),
                &mut store
            ),
            MilretStatus::Ok
        );
        assert_eq!(milret_store_write(store, path.as_ptr()), MilretStatus::Ok);
        milret_store_free(store);

        let mut back = ptr::null_mut();
        assert_eq!(
            milret_store_read(path.as_ptr(), &mut back),
            MilretStatus::Ok
        );
        assert_eq!((milret_store_len(back), milret_store_dim(back)), (2, 3));
        let mut row = [0f32; 3];
        assert_eq!(
            milret_store_get(back, ids[1].as_ptr(), row.as_mut_ptr(), 3),
            MilretStatus::Ok
        );
        assert_eq!(row, [-4.0, 5.0, 6.0]);
        let missing = CString::new("d/zz").unwrap();
        assert_eq!(
            milret_store_get(back, missing.as_ptr(), row.as_mut_ptr(), 3),
            MilretStatus::NotFound
        );
        assert!(last_error().contains("d/zz"));
        milret_store_free(back);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    unsafe {
        let mut store = ptr::null_mut();
        assert_eq!(
            milret_store_read(ptr::null(), &mut store),
            MilretStatus::NullPointer
        );
        let nowhere = CString::new("/nonexistent/x.emb").unwrap();
        assert_eq!(
            milret_store_read(nowhere.as_ptr(), &mut store),
            MilretStatus::Io
        );
        assert!(!last_error().is_empty());
        assert_eq!(milret_store_len(ptr::null()), 0);
        milret_store_free(ptr::null_mut());
        milret_model_free(ptr::null_mut());

        let tmp = tempfile::tempdir().unwrap();
        let junk = tmp.path().join("junk.emb");
        std::fs::write(&junk, b"not an embedding file").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(
            milret_store_read(junk.as_ptr(), &mut store),
            MilretStatus::Format
        );
    }
}

#[test]
fn loss_matches_library_and_handles_optional_outputs() {
    let images = [1.0, 0.0, 0.0, 1.0];
    let texts = [1.0, 0.0, 0.0, 1.0];
    let offsets = [0usize, 1, 2];
    let mut value = 0.0;
    let mut d_images = [0.0; 4];
    let mut d_sigma = 0.0;
    let status = unsafe {
        milret_loss(
            MilretLoss::Clip,
            1.0,
            0.07,
            2,
            2,
            images.as_ptr(),
            texts.as_ptr(),
            offsets.as_ptr(),
            &mut value,
            d_images.as_mut_ptr(),
            ptr::null_mut(),
            &mut d_sigma,
        )
    };
    assert_eq!(status, MilretStatus::Ok);
    // Orthogonal pairs at unit temperature: softplus(-1) per direction.
    assert!((value - (1.0f64 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    assert!(d_sigma.is_finite());

    let bad_offsets = [0usize, 2, 1];
    let status = unsafe {
        milret_loss(
            MilretLoss::MilNce,
            1.0,
            0.07,
            2,
            2,
            images.as_ptr(),
            texts.as_ptr(),
            bad_offsets.as_ptr(),
            &mut value,
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, MilretStatus::InvalidArgument);
}

#[test]
fn model_embed_and_ncc_and_recall() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(milret_model_identity(2, 0.07, &mut model), MilretStatus::Ok);
        assert!((milret_model_sigma(model) - 0.07).abs() < 1e-15);
        let mut out = [0.0; 2];
        assert_eq!(
            milret_model_embed(
                model,
                MilretModality::Image,
                [3.0, 4.0].as_ptr(),
                out.as_mut_ptr(),
                2
            ),
            MilretStatus::Ok
        );
        assert!((out[0] - 0.6).abs() < 1e-12 && (out[1] - 0.8).abs() < 1e-12);
        assert_eq!(
            milret_model_embed(
                model,
                MilretModality::Text,
                [0.0, 0.0].as_ptr(),
                out.as_mut_ptr(),
                2
            ),
            MilretStatus::InvalidArgument
        );
        milret_model_free(model);

        let a: Vec<u8> = (0..64).map(|i| (i * 37 % 251) as u8).collect();
        let mut r = 0.0;
        assert_eq!(
            milret_ncc(a.as_ptr(), 8, 8, a.as_ptr(), 8, 8, 16, &mut r),
            MilretStatus::Ok
        );
        assert!((r - 1.0).abs() < 1e-9);

        let ranks = [0i64, 3, 7, -1];
        let mut rec = [0.0; 3];
        assert_eq!(
            milret_recall(ranks.as_ptr(), 4, rec.as_mut_ptr()),
            MilretStatus::Ok
        );
        assert_eq!(rec, [0.25, 0.5, 0.75]);
    }
}

#[test]
fn header_is_generated_and_parses_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/milret.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "milret_store_read",
        "milret_loss",
        "milret_ncc",
        "milret_last_error",
        "MILRET_STATUS_OK",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    // Syntax-check with the system C compiler when one is installed.
    if let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-x", "c"])
        .arg(&header)
        .output()
    {
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}
