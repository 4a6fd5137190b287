//! C ABI over `prof-core`.
//!
//! Every fallible function returns a [`ProfStatus`]; on anything other than
//! `PROF_OK` a message is stored per thread and can be read back with
//! [`prof_last_error`]. Handles are opaque and must be released with the
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use prof_core::noise::{synthesize_noisy, NoiseConfig, NoisySet};
use prof_core::relabel::{rescale, ScaleBounds};
use prof_core::reward::{parse, Arity, CompiledReward, ParseContext, RewardFunction, RewardSource};
use prof_core::rpr::{dominance_score, RprConfig};
use prof_core::trajectory::{load_dataset, select_expert, DataFormat, Dataset, SplitSpec};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Data = 3,
    Compile = 4,
    Eval = 5,
    Noise = 6,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfFormat {
    /// Pick from the file extension.
    Auto = 0,
    BinaryV1 = 1,
    TextLines = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfArity {
    /// `(obs, act, next)`
    WithAction = 0,
    /// `(obs, next)`
    StateOnly = 1,
}

/// Scalar summary of a dominance evaluation. Fractions and score are NaN
/// when `valid` is false.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ProfScore {
    pub valid: bool,
    pub score: f64,
    pub lambda: f64,
    pub frac_offline: f64,
    pub frac_noisy: f64,
    pub offline_hits: u64,
    pub noisy_hits: u64,
    pub n: u64,
    pub h: u64,
}

pub struct ProfDataset(Dataset);
pub struct ProfReward(CompiledReward);
pub struct ProfNoisySet(NoisySet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let mut msg = msg.into().into_bytes();
    msg.retain(|&b| b != 0);
    let c = CString::new(msg).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

type FfiResult<T> = Result<T, (ProfStatus, String)>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> ProfStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ProfStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            ProfStatus::Panic
        }
    }
}

fn null(what: &str) -> (ProfStatus, String) {
    (ProfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (ProfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next `prof_*` call on the same thread.
#[no_mangle]
pub extern "C" fn prof_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn prof_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------------------
// datasets

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prof_dataset_load(
    path: *const c_char,
    format: ProfFormat,
    out: *mut *mut ProfDataset,
) -> ProfStatus {
    guard(|| {
        let path = Path::new(str_arg(path, "path")?);
        let format = match format {
            ProfFormat::Auto => DataFormat::from_path(path),
            ProfFormat::BinaryV1 => DataFormat::BinaryV1,
            ProfFormat::TextLines => DataFormat::TextLines,
        };
        let ds = load_dataset(path, format).map_err(|e| (ProfStatus::Data, e.to_string()))?;
        put(out, ProfDataset(ds))
    })
}

/// Top `k` trajectories by stored return, highest first.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prof_dataset_select_experts(
    ds: *const ProfDataset,
    k: usize,
    out: *mut *mut ProfDataset,
) -> ProfStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let spec = SplitSpec { expert_count: k, ..SplitSpec::default() };
        let split = select_expert(&ds.0, &spec).map_err(|e| (ProfStatus::Data, e.to_string()))?;
        put(out, ProfDataset(split.expert))
    })
}

/// Number of trajectories; 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn prof_dataset_len(ds: *const ProfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn prof_dataset_obs_dim(ds: *const ProfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.obs_dim())
}

/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn prof_dataset_act_dim(ds: *const ProfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.act_dim())
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prof_dataset_free(ds: *mut ProfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

// ---------------------------------------------------------------------------
// rewards

/// Compiles a reward expression against the given dimensions.
///
/// # Safety
/// `source` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prof_reward_compile(
    source: *const c_char,
    obs_dim: usize,
    act_dim: usize,
    arity: ProfArity,
    out: *mut *mut ProfReward,
) -> ProfStatus {
    guard(|| {
        let text = str_arg(source, "source")?;
        let arity = match arity {
            ProfArity::WithAction => Arity::WithAction,
            ProfArity::StateOnly => Arity::StateOnly,
        };
        let compiled = parse(&RewardSource::expression(text, arity), &ParseContext::new(obs_dim, act_dim, arity))
            .map_err(|e| (ProfStatus::Compile, e.to_string()))?;
        put(out, ProfReward(compiled))
    })
}

/// Reward of one transition. `act` may be NULL with `act_len` 0 for
/// state-only rewards.
///
/// # Safety
/// Each non-empty buffer must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn prof_reward_eval(
    reward: *const ProfReward,
    obs: *const f64,
    obs_len: usize,
    act: *const f64,
    act_len: usize,
    next: *const f64,
    next_len: usize,
    out: *mut f64,
) -> ProfStatus {
    guard(|| {
        let r = ref_arg(reward, "reward")?;
        let obs = slice_arg(obs, obs_len, "obs")?;
        let act = slice_arg(act, act_len, "act")?;
        let next = slice_arg(next, next_len, "next")?;
        if obs.len() != r.0.obs_dim() || next.len() != r.0.obs_dim() {
            return Err((
                ProfStatus::InvalidArgument,
                format!("observation length must be {}, got {} and {}", r.0.obs_dim(), obs.len(), next.len()),
            ));
        }
        if r.0.arity() == Arity::WithAction && act.len() != r.0.act_dim() {
            return Err((
                ProfStatus::InvalidArgument,
                format!("action length must be {}, got {}", r.0.act_dim(), act.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = r.0.reward(obs, act, next).map_err(|e| (ProfStatus::Eval, e.to_string()))?;
        Ok(())
    })
}

/// # Safety
/// `reward` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prof_reward_free(reward: *mut ProfReward) {
    if !reward.is_null() {
        drop(Box::from_raw(reward));
    }
}

// ---------------------------------------------------------------------------
// noisy sets

/// Perturbs the lowest-return trajectory of `experts` `h_count` times.
/// With `on_demand` set members are regenerated per use instead of stored.
///
/// # Safety
/// `experts` must be a live dataset handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prof_noisy_synthesize(
    experts: *const ProfDataset,
    alpha_o: f64,
    alpha_a: f64,
    h_count: usize,
    seed: u64,
    on_demand: bool,
    out: *mut *mut ProfNoisySet,
) -> ProfStatus {
    guard(|| {
        let ds = &ref_arg(experts, "experts")?.0;
        let returns = ds.returns().map_err(|e| (ProfStatus::Data, e.to_string()))?;
        let mut pos = 0;
        for (i, r) in returns.iter().enumerate() {
            if *r <= returns[pos] {
                pos = i;
            }
        }
        let Some(expert_min) = ds.trajectories().get(pos) else {
            return Err((ProfStatus::InvalidArgument, "expert dataset is empty".into()));
        };
        let cfg = NoiseConfig { alpha_o, alpha_a, h_count, seed };
        let set = if on_demand { NoisySet::on_demand(expert_min, &cfg) } else { synthesize_noisy(expert_min, &cfg) }
            .map_err(|e| (ProfStatus::Noise, e.to_string()))?;
        put(out, ProfNoisySet(set))
    })
}

/// # Safety
/// `noisy` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prof_noisy_len(noisy: *const ProfNoisySet) -> usize {
    noisy.as_ref().map_or(0, |n| n.0.len())
}

/// Hex SHA-256 digest of the set, NUL-terminated. Valid while the handle
/// lives.
///
/// # Safety
/// `noisy` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prof_noisy_digest(noisy: *const ProfNoisySet, buf: *mut c_char, buf_len: usize) -> ProfStatus {
    guard(|| {
        let n = ref_arg(noisy, "noisy")?;
        let d = n.0.digest().as_bytes();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if buf_len < d.len() + 1 {
            return Err((ProfStatus::InvalidArgument, format!("buffer needs {} bytes", d.len() + 1)));
        }
        ptr::copy_nonoverlapping(d.as_ptr().cast(), buf, d.len());
        *buf.add(d.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `noisy` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prof_noisy_free(noisy: *mut ProfNoisySet) {
    if !noisy.is_null() {
        drop(Box::from_raw(noisy));
    }
}

// ---------------------------------------------------------------------------
// scoring and rescaling

/// Dominance score of `reward`. An evaluation failure is not an error:
/// the call succeeds with `out->valid == false` and the reason in
/// [`prof_last_error`].
///
/// # Safety
/// All handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prof_dominance(
    reward: *const ProfReward,
    offline: *const ProfDataset,
    experts: *const ProfDataset,
    noisy: *const ProfNoisySet,
    delta: f64,
    out: *mut ProfScore,
) -> ProfStatus {
    let mut failure = None;
    let status = guard(|| {
        let r = ref_arg(reward, "reward")?;
        let offline = ref_arg(offline, "offline")?;
        let experts = ref_arg(experts, "experts")?;
        let noisy = ref_arg(noisy, "noisy")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RprConfig { delta };
        cfg.validate().map_err(|e| (ProfStatus::InvalidArgument, e.to_string()))?;
        let rep = dominance_score(&r.0, &offline.0, &experts.0, &noisy.0, &cfg);
        failure = rep.failure.as_ref().map(|f| format!("{:?} trajectory {} transition {}: {}", f.stage, f.trajectory, f.transition, f.error));
        *out = ProfScore {
            valid: rep.valid,
            score: rep.score.unwrap_or(f64::NAN),
            lambda: rep.lambda.unwrap_or(f64::NAN),
            frac_offline: rep.frac_offline.unwrap_or(f64::NAN),
            frac_noisy: rep.frac_noisy.unwrap_or(f64::NAN),
            offline_hits: rep.offline_hits,
            noisy_hits: rep.noisy_hits,
            n: rep.n,
            h: rep.h,
        };
        Ok(())
    });
    if let Some(msg) = failure {
        set_error(msg);
    }
    status
}

/// Min-max rescales `values` in place onto `[r_min_out, r_max_out]`.
///
/// # Safety
/// `values` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn prof_rescale(values: *mut f64, len: usize, r_min_out: f64, r_max_out: f64) -> ProfStatus {
    guard(|| {
        let bounds =
            ScaleBounds::new(r_min_out, r_max_out).map_err(|e| (ProfStatus::InvalidArgument, e.to_string()))?;
        if len == 0 {
            return Ok(());
        }
        if values.is_null() {
            return Err(null("values"));
        }
        let v = std::slice::from_raw_parts_mut(values, len);
        if v.iter().any(|x| !x.is_finite()) {
            return Err((ProfStatus::InvalidArgument, "values must be finite".into()));
        }
        let scaled = rescale(&[v.to_vec()], &bounds).remove(0);
        v.copy_from_slice(&scaled);
        Ok(())
    })
}
