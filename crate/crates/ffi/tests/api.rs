use std::ffi::{CStr, CString};
use std::ptr;

use prof_core::trajectory::{save_dataset, DataFormat, Dataset, Trajectory};
use prof_ffi::*;

fn last_error() -> String {
    let p = prof_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Four 1-D trajectories moving right by 1, 2, 3, 4 per step; stored reward
/// equals the step size.
fn write_fixture(dir: &std::path::Path) -> CString {
    let trajs = (1..=4)
        .map(|k| {
            let s: Vec<f32> = (0..4).map(|t| (t * k) as f32).collect();
            Trajectory::new(1, 1, s, vec![0.1; 3], Some(vec![k as f32; 3])).unwrap()
        })
        .collect();
    let path = dir.join("d.bin");
    save_dataset(&Dataset::new(1, 1, trajs).unwrap(), &path, DataFormat::BinaryV1).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn full_pipeline_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path());
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(prof_dataset_load(path.as_ptr(), ProfFormat::Auto, &mut ds), ProfStatus::Ok);
        assert_eq!(prof_dataset_len(ds), 4);
        assert_eq!(prof_dataset_obs_dim(ds), 1);
        assert_eq!(prof_dataset_act_dim(ds), 1);

        let mut experts = ptr::null_mut();
        assert_eq!(prof_dataset_select_experts(ds, 1, &mut experts), ProfStatus::Ok);
        assert_eq!(prof_dataset_len(experts), 1);

        let mut noisy = ptr::null_mut();
        assert_eq!(prof_noisy_synthesize(experts, 0.05, 0.05, 16, 7, false, &mut noisy), ProfStatus::Ok);
        assert_eq!(prof_noisy_len(noisy), 16);
        let mut buf = [0 as std::ffi::c_char; 65];
        assert_eq!(prof_noisy_digest(noisy, buf.as_mut_ptr(), buf.len()), ProfStatus::Ok);
        let digest = CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_owned();
        assert_eq!(digest.len(), 64);

        let mut lazy = ptr::null_mut();
        assert_eq!(prof_noisy_synthesize(experts, 0.05, 0.05, 16, 7, true, &mut lazy), ProfStatus::Ok);
        assert_eq!(prof_noisy_digest(lazy, buf.as_mut_ptr(), buf.len()), ProfStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), digest);

        let src = CString::new("next[0] - obs[0]").unwrap();
        let mut r = ptr::null_mut();
        assert_eq!(prof_reward_compile(src.as_ptr(), 1, 1, ProfArity::WithAction, &mut r), ProfStatus::Ok);
        let mut v = 0.0;
        let (o, a, n) = ([1.0], [0.0], [3.5]);
        assert_eq!(prof_reward_eval(r, o.as_ptr(), 1, a.as_ptr(), 1, n.as_ptr(), 1, &mut v), ProfStatus::Ok);
        assert_eq!(v, 2.5);

        let mut score = ProfScore::default();
        assert_eq!(prof_dominance(r, ds, experts, noisy, 0.01, &mut score), ProfStatus::Ok);
        assert!(score.valid);
        assert_eq!(score.n, 4);
        assert_eq!(score.h, 16);
        assert!(score.score > 0.5 && score.score <= 1.0);

        prof_reward_free(r);
        prof_noisy_free(noisy);
        prof_noisy_free(lazy);
        prof_dataset_free(experts);
        prof_dataset_free(ds);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut r = ptr::null_mut();
        let bad = CString::new("obs[0] +").unwrap();
        assert_eq!(prof_reward_compile(bad.as_ptr(), 1, 1, ProfArity::WithAction, &mut r), ProfStatus::Compile);
        assert!(r.is_null());
        assert!(last_error().contains("parse error"));

        let act = CString::new("act[0]").unwrap();
        assert_eq!(prof_reward_compile(act.as_ptr(), 1, 1, ProfArity::StateOnly, &mut r), ProfStatus::Compile);

        assert_eq!(prof_reward_compile(ptr::null(), 1, 1, ProfArity::WithAction, &mut r), ProfStatus::NullPointer);

        let missing = CString::new("/nonexistent/x.bin").unwrap();
        let mut ds = ptr::null_mut();
        assert_eq!(prof_dataset_load(missing.as_ptr(), ProfFormat::BinaryV1, &mut ds), ProfStatus::Data);

        let div = CString::new("1 / (obs[0] - obs[0])").unwrap();
        assert_eq!(prof_reward_compile(div.as_ptr(), 1, 0, ProfArity::StateOnly, &mut r), ProfStatus::Ok);
        let mut v = 0.0;
        let o = [2.0];
        assert_eq!(prof_reward_eval(r, o.as_ptr(), 1, ptr::null(), 0, o.as_ptr(), 1, &mut v), ProfStatus::Eval);
        assert_eq!(prof_reward_eval(r, o.as_ptr(), 0, ptr::null(), 0, o.as_ptr(), 1, &mut v), ProfStatus::InvalidArgument);
        prof_reward_free(r);

        // a success clears the previous message
        assert_eq!(prof_rescale(ptr::null_mut(), 0, 0.0, 1.0), ProfStatus::Ok);
        assert!(prof_last_error().is_null());
    }
}

#[test]
fn invalid_candidate_is_reported_not_failed() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path());
    unsafe {
        let (mut ds, mut ex, mut noisy, mut r) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
        assert_eq!(prof_dataset_load(path.as_ptr(), ProfFormat::Auto, &mut ds), ProfStatus::Ok);
        assert_eq!(prof_dataset_select_experts(ds, 2, &mut ex), ProfStatus::Ok);
        assert_eq!(prof_noisy_synthesize(ex, 0.05, 0.05, 4, 1, false, &mut noisy), ProfStatus::Ok);
        let src = CString::new("log(obs[0])").unwrap();
        assert_eq!(prof_reward_compile(src.as_ptr(), 1, 1, ProfArity::WithAction, &mut r), ProfStatus::Ok);
        let mut score = ProfScore::default();
        assert_eq!(prof_dominance(r, ds, ex, noisy, 0.01, &mut score), ProfStatus::Ok);
        assert!(!score.valid);
        assert!(score.score.is_nan());
        assert!(last_error().contains("Expert"));
        prof_reward_free(r);
        prof_noisy_free(noisy);
        prof_dataset_free(ex);
        prof_dataset_free(ds);
    }
}

#[test]
fn rescale_in_place() {
    let mut v = [0.0, 5.0, 10.0];
    unsafe {
        assert_eq!(prof_rescale(v.as_mut_ptr(), v.len(), 0.0, 2.0), ProfStatus::Ok);
        assert_eq!(v, [0.0, 1.0, 2.0]);
        assert_eq!(prof_rescale(v.as_mut_ptr(), v.len(), 1.0, 1.0), ProfStatus::InvalidArgument);
        let mut bad = [f64::NAN];
        assert_eq!(prof_rescale(bad.as_mut_ptr(), 1, 0.0, 1.0), ProfStatus::InvalidArgument);
    }
}

#[test]
fn free_accepts_null() {
    unsafe {
        prof_dataset_free(ptr::null_mut());
        prof_reward_free(ptr::null_mut());
        prof_noisy_free(ptr::null_mut());
        assert_eq!(prof_dataset_len(ptr::null()), 0);
    }
    let v = unsafe { CStr::from_ptr(prof_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
