use std::ffi::{CStr, CString};
use std::ptr;

use cts_ffi::*;

fn last_error() -> String {
    let p = cts_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_and_defaults() {
    let v = unsafe { CStr::from_ptr(cts_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    let p = cts_search_params_default();
    assert_eq!(p.objective, CtsObjective::ReverseKl);
    assert_eq!(p.controller, CtsController::GradBalance);
}

#[test]
fn null_handles_and_bad_arguments_are_reported() {
    unsafe {
        let mut d = 0usize;
        assert_eq!(cts_model_maskable_count(ptr::null(), &mut d), CtsStatus::NullPointer);
        assert!(last_error().contains("model"));
        let mut ds = ptr::null_mut();
        assert_eq!(cts_dataset_blobs(0, 4, 100, 1, &mut ds), CtsStatus::InvalidArgument);
        assert!(ds.is_null());
        assert_eq!(cts_dataset_blobs(2, 4, 100, 1, ptr::null_mut()), CtsStatus::NullPointer);
        let missing = CString::new("/nonexistent/ticket.json").unwrap();
        let mut t = ptr::null_mut();
        assert_eq!(cts_ticket_load(missing.as_ptr(), &mut t), CtsStatus::Io);
        assert_eq!(cts_ticket_len(ptr::null()), 0);
        assert!(cts_ticket_density(ptr::null()).is_nan());
        // Success clears the previous message.
        assert_eq!(cts_dataset_blobs(2, 2, 50, 1, &mut ds), CtsStatus::Ok);
        assert!(cts_last_error().is_null());
        cts_dataset_free(ds);
        cts_dataset_free(ptr::null_mut());
    }
}

#[test]
fn search_save_load_evaluate() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(cts_dataset_blobs(3, 6, 300, 2, &mut ds), CtsStatus::Ok);
        let mut params = cts_search_params_default();
        params.kappa = 0.1;
        params.search_steps = 20;
        params.train_steps = 40;
        params.rewind_step = 4;
        params.seed = 7;
        let (mut ticket, mut model, mut acc) = (ptr::null_mut(), ptr::null_mut(), 0.0);
        assert_eq!(
            cts_search(ds, CtsArch::Mlp2x256, &params, &mut ticket, &mut model, &mut acc),
            CtsStatus::Ok,
            "{}",
            last_error()
        );
        let d = cts_ticket_len(ticket);
        let mut md = 0;
        assert_eq!(cts_model_maskable_count(model, &mut md), CtsStatus::Ok);
        assert_eq!(d, md);
        assert_eq!(cts_ticket_retained(ticket), (0.1 * d as f64).round() as usize);
        let mut mask = vec![9u8; d];
        assert_eq!(cts_ticket_copy_mask(ticket, mask.as_mut_ptr(), d), CtsStatus::Ok);
        assert_eq!(mask.iter().map(|&b| b as usize).sum::<usize>(), cts_ticket_retained(ticket));
        assert_eq!(cts_ticket_copy_mask(ticket, mask.as_mut_ptr(), d - 1), CtsStatus::InvalidArgument);

        let (mut loss, mut eval_acc) = (0.0, 0.0);
        assert_eq!(cts_model_evaluate(model, ds, ptr::null(), &mut loss, &mut eval_acc), CtsStatus::Ok);
        assert_eq!(eval_acc, acc);

        let dir = tempfile::tempdir().unwrap();
        let tpath = CString::new(dir.path().join("t.json").to_str().unwrap()).unwrap();
        let mpath = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(cts_ticket_save(ticket, tpath.as_ptr()), CtsStatus::Ok);
        assert_eq!(cts_model_save(model, mpath.as_ptr(), 40), CtsStatus::Ok);
        let (mut t2, mut m2) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(cts_ticket_load(tpath.as_ptr(), &mut t2), CtsStatus::Ok);
        assert_eq!(cts_model_load(mpath.as_ptr(), &mut m2), CtsStatus::Ok);
        assert_eq!(cts_ticket_density(t2), cts_ticket_density(ticket));
        let (mut loss2, mut acc2) = (0.0, 0.0);
        assert_eq!(cts_model_evaluate(m2, ds, t2, &mut loss2, &mut acc2), CtsStatus::Ok);
        let (mut loss3, mut acc3) = (0.0, 0.0);
        assert_eq!(cts_model_evaluate(model, ds, ticket, &mut loss3, &mut acc3), CtsStatus::Ok);
        assert_eq!((loss2, acc2), (loss3, acc3));

        let bad = CString::new(dir.path().join("bad").to_str().unwrap()).unwrap();
        std::fs::write(dir.path().join("bad"), b"CTSCKPT\0garbage").unwrap();
        let mut m3 = ptr::null_mut();
        assert_eq!(cts_model_load(bad.as_ptr(), &mut m3), CtsStatus::Parse);
        assert!(last_error().contains("offset"));

        for h in [ticket, t2] {
            cts_ticket_free(h);
        }
        for h in [model, m2] {
            cts_model_free(h);
        }
        cts_dataset_free(ds);
    }
}

#[test]
fn oracle_and_budget() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(cts_dataset_blobs(2, 2, 100, 3, &mut ds), CtsStatus::Ok);
        let mut model = ptr::null_mut();
        assert_eq!(cts_model_new(CtsArch::TinyMlp, ds, 1, &mut model), CtsStatus::Ok);
        let (mut t, mut best) = (ptr::null_mut(), 0.0);
        assert_eq!(cts_oracle(model, ds, 0.5, CtsObjective::TaskLoss, 32, &mut t, &mut best), CtsStatus::Ok);
        assert_eq!((cts_ticket_len(t), cts_ticket_retained(t)), (12, 6));
        assert!(best.is_finite());
        cts_ticket_free(t);

        let mut big = ptr::null_mut();
        assert_eq!(cts_model_new(CtsArch::Mlp2x256, ds, 1, &mut big), CtsStatus::Ok);
        let mut t = ptr::null_mut();
        assert_eq!(
            cts_oracle(big, ds, 0.5, CtsObjective::TaskLoss, 32, &mut t, &mut best),
            CtsStatus::BudgetExceeded
        );
        assert!(t.is_null());
        cts_model_free(big);
        cts_model_free(model);
        cts_dataset_free(ds);
    }
}
