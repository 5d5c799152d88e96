//! C interface to `reguide`.
//!
//! Models and indices are opaque handles created by `*_load` and released by
//! the matching `*_free`. Every fallible call returns an [`RgStatus`]; on
//! failure the message is kept per thread and read with
//! [`rg_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fmt::Display;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use reguide::checkpoint::Checkpoint;
use reguide::diffusion::{Denoiser, NoiseSchedule, ScheduleConfig};
use reguide::guided_sampler::{
    batch_sample, BatchOptions, GuidanceConfig, GuidanceMode, StepSchedule,
};
use reguide::numerics::Tensor;
use reguide::retrieval::RetrievalIndex;
use reguide::reward::{DualReward, RewardModel};
use reguide::synthdata::Condition;
use reguide::verify_analytic::{
    run_analytic_check, AnalyticCheckConfig, GaussianSpec, QuadraticReward,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Load = 3,
    Compute = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgMode {
    Theorem3 = 0,
    Unweighted = 1,
    Off = 2,
}

impl From<RgMode> for GuidanceMode {
    fn from(m: RgMode) -> Self {
        match m {
            RgMode::Theorem3 => GuidanceMode::Theorem3,
            RgMode::Unweighted => GuidanceMode::Unweighted,
            RgMode::Off => GuidanceMode::Off,
        }
    }
}

/// Sampling options. `steps == 0` runs every timestep and `clip <= 0`
/// disables gradient clipping.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RgSampleOptions {
    pub mu: f64,
    pub eta: f64,
    pub cfg_scale: f64,
    pub steps: usize,
    pub mode: RgMode,
    pub clip: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RgMoments {
    pub oracle_mean: f64,
    pub oracle_var: f64,
    pub chain_mean: f64,
    pub chain_var: f64,
    pub empirical_mean: f64,
    pub empirical_var: f64,
    pub passed: bool,
}

pub struct RgDenoiser {
    inner: Denoiser,
    sched: NoiseSchedule,
}

pub struct RgReward {
    inner: RewardModel,
}

pub struct RgIndex {
    inner: RetrievalIndex,
}

struct FfiError {
    status: RgStatus,
    message: String,
}

impl FfiError {
    fn new(status: RgStatus, e: impl Display) -> Self {
        Self {
            status,
            message: e.to_string(),
        }
    }
}

fn load_err(e: impl Display) -> FfiError {
    FfiError::new(RgStatus::Load, e)
}

fn compute_err(e: impl Display) -> FfiError {
    FfiError::new(RgStatus::Compute, e)
}

fn arg_err(e: impl Display) -> FfiError {
    FfiError::new(RgStatus::InvalidArgument, e)
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> RgStatus {
    let (status, message) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (RgStatus::Ok, String::new()),
        Ok(Err(e)) => (e.status, e.message),
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (RgStatus::Panic, format!("panic: {msg}"))
        }
    };
    LAST_ERROR.with(|l| *l.borrow_mut() = message);
    status
}

fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, FfiError> {
    // SAFETY: callers pass pointers that are null or valid for reads.
    unsafe { p.as_ref() }
        .ok_or_else(|| FfiError::new(RgStatus::NullPointer, format!("{name} is null")))
}

fn path_arg(p: *const c_char) -> Result<PathBuf, FfiError> {
    non_null(p, "path")?;
    // SAFETY: non-null and NUL-terminated per the API contract.
    let s = unsafe { CStr::from_ptr(p) }.to_str().map_err(arg_err)?;
    Ok(PathBuf::from(s))
}

fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], FfiError> {
    non_null(p, name)?;
    // SAFETY: the caller guarantees `len` readable values at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn out_slice<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], FfiError> {
    non_null(p, name)?;
    // SAFETY: the caller guarantees `len` writable values at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn write_out<T>(out: *mut T, v: T) -> Result<(), FfiError> {
    non_null(out, "out")?;
    // SAFETY: non-null and valid for writes per the API contract.
    unsafe { out.write(v) };
    Ok(())
}

fn condition(class_id: u32, params: *const f64) -> Result<Condition, FfiError> {
    let p = slice_arg(params, 3, "params")?;
    Condition::from_class_id(class_id, [p[0], p[1], p[2]]).map_err(arg_err)
}

fn into_handle<T>(out: *mut *mut T, v: T) -> Result<(), FfiError> {
    write_out(out, Box::into_raw(Box::new(v)))
}

fn free_handle<T>(h: *mut T) {
    if !h.is_null() {
        // SAFETY: `h` came from `into_handle` and is freed once.
        drop(unsafe { Box::from_raw(h) });
    }
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap - 1` bytes). Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rg_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|l| {
        let msg = l.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a denoiser checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rg_denoiser_load(
    path: *const c_char,
    out: *mut *mut RgDenoiser,
) -> RgStatus {
    guard(|| {
        let (ck, _) = Checkpoint::load(path_arg(path)?).map_err(load_err)?;
        let inner = Denoiser::from_checkpoint(&ck).map_err(load_err)?;
        let sched = ScheduleConfig::default().build().map_err(load_err)?;
        into_handle(out, RgDenoiser { inner, sched })
    })
}

/// # Safety
/// `h` must be null or a handle from [`rg_denoiser_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rg_denoiser_free(h: *mut RgDenoiser) {
    free_handle(h);
}

/// Loads a reward model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rg_reward_load(path: *const c_char, out: *mut *mut RgReward) -> RgStatus {
    guard(|| {
        let (ck, _) = Checkpoint::load(path_arg(path)?).map_err(load_err)?;
        let inner = RewardModel::from_checkpoint(&ck).map_err(load_err)?;
        into_handle(out, RgReward { inner })
    })
}

/// # Safety
/// `h` must be null or a handle from [`rg_reward_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rg_reward_free(h: *mut RgReward) {
    free_handle(h);
}

/// Number of frames and coordinates per frame the reward model expects.
///
/// # Safety
/// `h` must be a live reward handle; the outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rg_reward_shape(
    h: *const RgReward,
    n_frames: *mut usize,
    dim: *mut usize,
) -> RgStatus {
    guard(|| {
        let cfg = non_null(h, "reward")?.inner.config();
        write_out(n_frames, cfg.n_frames)?;
        write_out(dim, cfg.dim)
    })
}

/// Loads a retrieval index.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rg_index_load(path: *const c_char, out: *mut *mut RgIndex) -> RgStatus {
    guard(|| {
        let inner = RetrievalIndex::load(path_arg(path)?).map_err(load_err)?;
        into_handle(out, RgIndex { inner })
    })
}

/// # Safety
/// `h` must be null or a handle from [`rg_index_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rg_index_free(h: *mut RgIndex) {
    free_handle(h);
}

fn motion_tensor(model: &RewardModel, x: *const f64, len: usize) -> Result<Tensor, FfiError> {
    let cfg = model.config();
    if len != cfg.motion_len() {
        return Err(arg_err(format!(
            "motion has {len} values, expected {}",
            cfg.motion_len()
        )));
    }
    Tensor::new(
        vec![cfg.n_frames, cfg.dim],
        slice_arg(x, len, "x")?.to_vec(),
    )
    .map_err(arg_err)
}

/// Text-to-motion reward `mu * R_T(x_t, c)` at step `t` and, when `grad` is
/// non-null, its gradient with respect to `x` (`len` values, row-major).
///
/// # Safety
/// `x` and `grad` (if non-null) must hold `len` values, `params` three
/// values and `value` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rg_reward_eval(
    h: *const RgReward,
    x: *const f64,
    len: usize,
    t: usize,
    class_id: u32,
    params: *const f64,
    mu: f64,
    value: *mut f64,
    grad: *mut f64,
) -> RgStatus {
    guard(|| {
        let model = &non_null(h, "reward")?.inner;
        let x_t = motion_tensor(model, x, len)?;
        let c = condition(class_id, params)?;
        let r = DualReward::new(model, &c, None, mu, 0.0).map_err(arg_err)?;
        if grad.is_null() {
            return write_out(value, r.value(&x_t, t).map_err(compute_err)?);
        }
        let (v, g) = r.value_and_grad(&x_t, t).map_err(compute_err)?;
        out_slice(grad, len, "grad")?.copy_from_slice(g.data());
        write_out(value, v)
    })
}

/// Draws one guided sample for a condition into `out` (`len` values).
/// `reward` may be null when guidance is off; `index` is required when
/// `opts.eta != 0`.
///
/// # Safety
/// Handles must be live or null, `params` must hold three values, `opts`
/// must be valid for reads and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn rg_sample(
    denoiser: *const RgDenoiser,
    reward: *const RgReward,
    index: *const RgIndex,
    class_id: u32,
    params: *const f64,
    opts: *const RgSampleOptions,
    out: *mut f64,
    len: usize,
) -> RgStatus {
    guard(|| {
        let d = non_null(denoiser, "denoiser")?;
        let o = *non_null(opts, "opts")?;
        let c = condition(class_id, params)?;
        let g = GuidanceConfig {
            mu: o.mu,
            eta: o.eta,
            cfg_scale: o.cfg_scale,
            steps: if o.steps == 0 {
                StepSchedule::Full
            } else {
                StepSchedule::Strided(o.steps)
            },
            mode: o.mode.into(),
            clip: (o.clip > 0.0).then_some(o.clip),
            ..GuidanceConfig::default()
        };
        let reward = unsafe { reward.as_ref() }.map(|r| &r.inner);
        let index = unsafe { index.as_ref() }.map(|i| &i.inner);
        let batch = BatchOptions {
            seed: o.seed,
            ..BatchOptions::default()
        };
        let result = batch_sample(&[c], &d.inner, reward, index, &d.sched, &g, &batch)
            .map_err(compute_err)?;
        let frames = result[0].motion.frames().data();
        if len != frames.len() {
            return Err(arg_err(format!(
                "output holds {len} values, sample has {}",
                frames.len()
            )));
        }
        out_slice(out, len, "out")?.copy_from_slice(frames);
        Ok(())
    })
}

/// One-dimensional analytic check: prior N(mean, var), reward
/// `-lambda (x - target)^2`, `samples` draws over `steps` sampling steps
/// (0 for every timestep of the default schedule).
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rg_verify_analytic(
    mean: f64,
    var: f64,
    target: f64,
    lambda: f64,
    samples: usize,
    steps: usize,
    mode: RgMode,
    seed: u64,
    out: *mut RgMoments,
) -> RgStatus {
    guard(|| {
        let spec = GaussianSpec::new(vec![mean], vec![var]).map_err(arg_err)?;
        let r = QuadraticReward::new(vec![target], lambda).map_err(arg_err)?;
        let sched = ScheduleConfig::default().build().map_err(compute_err)?;
        let cfg = AnalyticCheckConfig {
            samples,
            mode: mode.into(),
            steps: if steps == 0 {
                StepSchedule::Full
            } else {
                StepSchedule::Strided(steps)
            },
            seed,
        };
        let report = run_analytic_check(&spec, &r, &sched, &cfg).map_err(compute_err)?;
        let c = &report.coordinates[0];
        write_out(
            out,
            RgMoments {
                oracle_mean: c.oracle_mean,
                oracle_var: c.oracle_var,
                chain_mean: c.chain_mean,
                chain_var: c.chain_var,
                empirical_mean: c.empirical_mean,
                empirical_var: c.empirical_var,
                passed: report.passed(),
            },
        )
    })
}
