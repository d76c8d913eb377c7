//! C interface: opaque policy and diffuser handles loaded from checkpoints,
//! prompt sampling, evaluation rollouts and the gradient projection rule.
//!
//! Every fallible function returns a [`PdStatus`]; on failure the message
//! is available from [`pd_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use prompt_diffuser::datasets::NormStats;
use prompt_diffuser::diffuser::Diffuser;
use prompt_diffuser::envs::{make_task, Family};
use prompt_diffuser::guidance::{self, Branch};
use prompt_diffuser::harness::{diffuser_prompt, mean_std};
use prompt_diffuser::numerics::Checkpoint;
use prompt_diffuser::prompt_dt::{self, Plm};
use prompt_diffuser::{rng, Error};

/// Values per prompt step: return-to-go, two state and two action entries.
pub const PD_PROMPT_STEP_WIDTH: usize = 5;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NonFinite = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdBranch {
    Conflict = 0,
    Aligned = 1,
}

/// Pre-trained policy with its normalisation statistics.
pub struct PdPlm {
    plm: Plm,
    stats: NormStats,
}

/// Trained prompt diffuser.
pub struct PdDiffuser {
    inner: Diffuser,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PdStatus {
    match e {
        Error::Io { .. } => PdStatus::Io,
        Error::Checkpoint(_) | Error::Format(_) | Error::Json(_) | Error::Csv(_) => {
            PdStatus::Format
        }
        Error::NonFinite(_) => PdStatus::NonFinite,
        _ => PdStatus::InvalidArgument,
    }
}

struct Fail(PdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PdStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PdStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            PdStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_slice<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn pd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn pd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a policy checkpoint that carries normalisation statistics.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_plm_load(path: *const c_char, out: *mut *mut PdPlm) -> PdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let (mut plm, stats) = Plm::from_checkpoint(&Checkpoint::load(path)?)?;
        let stats = stats.ok_or_else(|| {
            Fail(
                PdStatus::Format,
                format!("{path} has no normalisation stats"),
            )
        })?;
        plm.set_training(false);
        *out = Box::into_raw(Box::new(PdPlm { plm, stats }));
        Ok(())
    })
}

/// # Safety
/// `plm` must come from [`pd_plm_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pd_plm_free(plm: *mut PdPlm) {
    if !plm.is_null() {
        drop(Box::from_raw(plm));
    }
}

/// Loads a diffuser checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_diffuser_load(
    path: *const c_char,
    out: *mut *mut PdDiffuser,
) -> PdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let inner = Diffuser::from_checkpoint(&Checkpoint::load(path)?)?;
        *out = Box::into_raw(Box::new(PdDiffuser { inner }));
        Ok(())
    })
}

/// # Safety
/// `d` must come from [`pd_diffuser_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pd_diffuser_free(d: *mut PdDiffuser) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Prompt length K of the diffuser, or 0 for a null handle.
///
/// # Safety
/// `d` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pd_diffuser_prompt_len(d: *const PdDiffuser) -> usize {
    d.as_ref().map_or(0, |d| d.inner.config.prompt_len)
}

/// Samples one normalised prompt conditioned on `target_rtg` (raw scale)
/// into `out` as K rows of [`PD_PROMPT_STEP_WIDTH`] values
/// `(rtg, s0, s1, a0, a1)`.
///
/// # Safety
/// Handles must be live; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pd_diffuser_sample(
    d: *const PdDiffuser,
    plm: *const PdPlm,
    target_rtg: f64,
    temperature: f64,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> PdStatus {
    guard(|| {
        let d = d.as_ref().ok_or_else(|| null("diffuser"))?;
        let p = plm.as_ref().ok_or_else(|| null("plm"))?;
        let need = d.inner.config.prompt_len * PD_PROMPT_STEP_WIDTH;
        if out_len < need {
            return Err(Fail(
                PdStatus::BufferTooSmall,
                format!("need {need} values, got {out_len}"),
            ));
        }
        let out = out_slice(out, out_len, "out")?;
        let seg = diffuser_prompt(
            &d.inner,
            &p.stats,
            target_rtg,
            temperature,
            &mut rng::seeded(seed),
        )?;
        for t in 0..seg.len() {
            let row = [
                seg.rtg[t],
                seg.states[t][0],
                seg.states[t][1],
                seg.actions[t][0],
                seg.actions[t][1],
            ];
            out[t * PD_PROMPT_STEP_WIDTH..(t + 1) * PD_PROMPT_STEP_WIDTH].copy_from_slice(&row);
        }
        Ok(())
    })
}

/// Runs `episodes` rollouts of the policy on task `task` of `family`
/// (`"dir-1d"`, `"vel"` or `"dir-2d"`), prompted by a fresh diffuser sample
/// or by nothing when `d` is null. Writes the mean and population standard
/// deviation of the episode returns.
///
/// # Safety
/// `plm` must be live, `d` null or live, `family` nul-terminated and the
/// output pointers valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pd_evaluate(
    plm: *const PdPlm,
    d: *const PdDiffuser,
    family: *const c_char,
    task: usize,
    target_rtg: f64,
    temperature: f64,
    episodes: usize,
    seed: u64,
    out_mean: *mut f64,
    out_std: *mut f64,
) -> PdStatus {
    guard(|| {
        let p = plm.as_ref().ok_or_else(|| null("plm"))?;
        if out_mean.is_null() || out_std.is_null() {
            return Err(null("output"));
        }
        let family: Family = str_arg(family, "family")?.parse()?;
        let env = make_task(family, task)?;
        let prompt = match d.as_ref() {
            Some(d) => Some(diffuser_prompt(
                &d.inner,
                &p.stats,
                target_rtg,
                temperature,
                &mut rng::derived(seed, 0),
            )?),
            None => None,
        };
        let res = prompt_dt::rollout(
            &p.plm,
            &p.stats,
            prompt.as_ref(),
            &env,
            target_rtg,
            episodes,
            rng::derive_seed(seed, 1),
        )?;
        let (m, s) = mean_std(&res.returns);
        *out_mean = m;
        *out_std = s;
        Ok(())
    })
}

/// Component of `g_dt` orthogonal to `g_dm`, both of length `n`, into `out`.
///
/// # Safety
/// All three buffers must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn pd_project(
    g_dt: *const f64,
    g_dm: *const f64,
    n: usize,
    out: *mut f64,
) -> PdStatus {
    guard(|| {
        let g_dt = slice_arg(g_dt, n, "g_dt")?;
        let g_dm = slice_arg(g_dm, n, "g_dm")?;
        let out = out_slice(out, n, "out")?;
        out.copy_from_slice(&guidance::project(g_dt, g_dm));
        Ok(())
    })
}

/// Combined update direction of `g_dm` and `g_dt` with weight `lambda`
/// into `out`; the branch taken is written to `branch` when non-null.
///
/// # Safety
/// All three buffers must hold `n` doubles; `branch` is null or valid.
#[no_mangle]
pub unsafe extern "C" fn pd_combine(
    g_dm: *const f64,
    g_dt: *const f64,
    n: usize,
    lambda: f64,
    out: *mut f64,
    branch: *mut PdBranch,
) -> PdStatus {
    guard(|| {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Fail(
                PdStatus::InvalidArgument,
                format!("lambda {lambda} must be finite and non-negative"),
            ));
        }
        let g_dm = slice_arg(g_dm, n, "g_dm")?;
        let g_dt = slice_arg(g_dt, n, "g_dt")?;
        let out = out_slice(out, n, "out")?;
        let (v, b) = guidance::combine(g_dm, g_dt, lambda);
        out.copy_from_slice(&v);
        if !branch.is_null() {
            *branch = match b {
                Branch::Conflict => PdBranch::Conflict,
                Branch::Aligned => PdBranch::Aligned,
            };
        }
        Ok(())
    })
}
