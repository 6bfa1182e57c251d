//! C ABI over `dft-core`.
//!
//! Models and estimator states are opaque handles created and freed here.
//! Every fallible call returns a [`DftStatus`]; the message of the last
//! failure on the calling thread is available from [`dft_last_error`].
//! Token sequences are passed as `(pointer, length)` pairs of `uint32_t`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use dft_core::fcco::{update_u_log, EstimatorState};
use dft_core::model::{load_params, logprob_grad, save_params, sequence_logprob, ModelConfig, ModelParams, TokenSequence};
use dft_core::objectives::{self, Candidate, ScoringMode, Variant};
use dft_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    ShapeMismatch = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DftMode {
    Unnormalized = 0,
    LengthNormalized = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DftVariant {
    Dft = 0,
    Dft2 = 1,
}

/// Opaque model parameters.
pub struct DftModel(ModelParams);

/// Opaque per-example estimator state.
pub struct DftEstimator(EstimatorState);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn status_of(e: &Error) -> DftStatus {
    match e {
        Error::Io(_) | Error::File { .. } => DftStatus::Io,
        Error::Format(_) | Error::VersionMismatch { .. } | Error::Json(_) => DftStatus::Format,
        Error::NonFinite(_)
        | Error::NonFiniteActivation { .. }
        | Error::NonFiniteParam { .. }
        | Error::NonFiniteGradient { .. }
        | Error::NanDetected { .. } => DftStatus::Numeric,
        Error::ShapeMismatch(_) | Error::StateMismatch { .. } => DftStatus::ShapeMismatch,
        _ => DftStatus::InvalidArgument,
    }
}

fn fail(status: DftStatus, msg: impl Into<String>) -> DftStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), DftStatus>) -> DftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DftStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(DftStatus::Panic, "panic inside dft"),
    }
}

fn lift<T>(r: dft_core::Result<T>) -> Result<T, DftStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn nonnull<T>(p: *const T, what: &str) -> Result<(), DftStatus> {
    if p.is_null() {
        Err(fail(DftStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn tokens<'a>(p: *const u32, len: usize, what: &str) -> Result<&'a [u32], DftStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    nonnull(p, what)?;
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, DftStatus> {
    nonnull(p, "path")?;
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| fail(DftStatus::InvalidArgument, "path is not UTF-8"))
}

unsafe fn model_ref<'a>(m: *const DftModel) -> Result<&'a ModelParams, DftStatus> {
    nonnull(m, "model")?;
    Ok(&(*m).0)
}

unsafe fn write_grad(grad: &[f64], out: *mut f64, out_len: usize) -> Result<(), DftStatus> {
    if out.is_null() {
        return Ok(());
    }
    if out_len < grad.len() {
        return Err(fail(
            DftStatus::BufferTooSmall,
            format!("gradient needs {} entries, buffer holds {out_len}", grad.len()),
        ));
    }
    ptr::copy_nonoverlapping(grad.as_ptr(), out, grad.len());
    Ok(())
}

/// Copies the last error message on this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dft_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Seeded random model; `seed` selects the initialization stream.
///
/// # Safety
/// `out` must point to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dft_model_init(
    vocab_size: usize,
    d_model: usize,
    n_layers: usize,
    max_len: usize,
    seed: u64,
    out: *mut *mut DftModel,
) -> DftStatus {
    guard(|| {
        nonnull(out, "out")?;
        let cfg = ModelConfig::new(vocab_size, d_model, n_layers, max_len);
        lift(cfg.validate())?;
        *out = Box::into_raw(Box::new(DftModel(ModelParams::init(cfg, seed))));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to writable
/// storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dft_model_load(path: *const c_char, out: *mut *mut DftModel) -> DftStatus {
    guard(|| {
        nonnull(out, "out")?;
        let path = path_arg(path)?;
        let params = lift(load_params(path, None))?;
        *out = Box::into_raw(Box::new(DftModel(params)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dft_model_save(model: *const DftModel, path: *const c_char) -> DftStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = path_arg(path)?;
        lift(save_params(m, path))
    })
}

/// # Safety
/// `model` must be null or a handle from this library that is not used again.
#[no_mangle]
pub unsafe extern "C" fn dft_model_free(model: *mut DftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the flat parameter view, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dft_model_num_params(model: *const DftModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).0.len()
    }
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dft_model_vocab_size(model: *const DftModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).0.config().vocab_size
    }
}

/// `log P(y|x)` in nats. `y` must end with token 0.
///
/// # Safety
/// `x`/`y` must point to `x_len`/`y_len` readable ids; `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn dft_sequence_logprob(
    model: *const DftModel,
    x: *const u32,
    x_len: usize,
    y: *const u32,
    y_len: usize,
    out: *mut f64,
) -> DftStatus {
    guard(|| {
        let m = model_ref(model)?;
        nonnull(out, "out")?;
        let x = TokenSequence::prompt(tokens(x, x_len, "x")?.to_vec());
        let y = TokenSequence::answer(tokens(y, y_len, "y")?.to_vec());
        *out = lift(sequence_logprob(m, &x, &y))?;
        Ok(())
    })
}

/// `log P(y|x)` and its gradient. `grad` may be null to skip the copy;
/// otherwise it must hold `dft_model_num_params` doubles.
///
/// # Safety
/// Pointer arguments must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dft_logprob_grad(
    model: *const DftModel,
    x: *const u32,
    x_len: usize,
    y: *const u32,
    y_len: usize,
    out_value: *mut f64,
    grad: *mut f64,
    grad_len: usize,
) -> DftStatus {
    guard(|| {
        let m = model_ref(model)?;
        nonnull(out_value, "out_value")?;
        let x = TokenSequence::prompt(tokens(x, x_len, "x")?.to_vec());
        let y = TokenSequence::answer(tokens(y, y_len, "y")?.to_vec());
        let (v, g) = lift(logprob_grad(m, &x, &y))?;
        write_grad(&g, grad, grad_len)?;
        *out_value = v;
        Ok(())
    })
}

/// Exact candidate-set loss `−s(y_pos) + τ log mean_j w_j` and gradient.
/// Candidates are concatenated in `cand_tokens`; `cand_lens[j]` gives the
/// length of candidate `j` and `cand_logp_base[j]` its base log-probability.
///
/// # Safety
/// Pointer arguments must be valid for the stated lengths; the sum of
/// `cand_lens` must not exceed the length of `cand_tokens`.
#[no_mangle]
pub unsafe extern "C" fn dft_exact_loss(
    model: *const DftModel,
    x: *const u32,
    x_len: usize,
    y_pos: *const u32,
    y_pos_len: usize,
    cand_tokens: *const u32,
    cand_lens: *const usize,
    cand_logp_base: *const f64,
    n_cands: usize,
    tau: f64,
    mode: DftMode,
    variant: DftVariant,
    out_value: *mut f64,
    grad: *mut f64,
    grad_len: usize,
) -> DftStatus {
    guard(|| {
        let m = model_ref(model)?;
        nonnull(out_value, "out_value")?;
        if n_cands == 0 {
            return Err(fail(DftStatus::InvalidArgument, "at least one candidate is required"));
        }
        nonnull(cand_lens, "cand_lens")?;
        nonnull(cand_logp_base, "cand_logp_base")?;
        let lens = slice::from_raw_parts(cand_lens, n_cands);
        let bases = slice::from_raw_parts(cand_logp_base, n_cands);
        let flat = tokens(cand_tokens, lens.iter().sum(), "cand_tokens")?;
        let mut cands = Vec::with_capacity(n_cands);
        let mut at = 0;
        for (j, (&len, &lp)) in lens.iter().zip(bases).enumerate() {
            let y = TokenSequence::answer(flat[at..at + len].to_vec());
            at += len;
            cands.push(lift(Candidate::new(y, lp, j))?);
        }
        let x = TokenSequence::prompt(tokens(x, x_len, "x")?.to_vec());
        let y = TokenSequence::answer(tokens(y_pos, y_pos_len, "y_pos")?.to_vec());
        let mode = match mode {
            DftMode::Unnormalized => ScoringMode::Unnormalized,
            DftMode::LengthNormalized => ScoringMode::LengthNormalized,
        };
        let variant = match variant {
            DftVariant::Dft => Variant::Dft,
            DftVariant::Dft2 => Variant::Dft2,
        };
        let loss = lift(objectives::dft_exact_loss(m, &x, &y, &cands, tau, mode, variant))?;
        write_grad(&loss.grad, grad, grad_len)?;
        *out_value = loss.value;
        Ok(())
    })
}

/// One log-domain moving-average step on a bare value.
///
/// # Safety
/// `log_weights` must hold `n` doubles; `out` must point to one double.
#[no_mangle]
pub unsafe extern "C" fn dft_update_u_log(
    log_u: f64,
    log_weights: *const f64,
    n: usize,
    gamma: f64,
    out: *mut f64,
) -> DftStatus {
    guard(|| {
        nonnull(out, "out")?;
        nonnull(log_weights, "log_weights")?;
        *out = lift(update_u_log(log_u, slice::from_raw_parts(log_weights, n), gamma))?;
        Ok(())
    })
}

/// `n` estimators initialized to `log u = 0`.
///
/// # Safety
/// `out` must point to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dft_estimator_new(n: usize, out: *mut *mut DftEstimator) -> DftStatus {
    guard(|| {
        nonnull(out, "out")?;
        *out = Box::into_raw(Box::new(DftEstimator(EstimatorState::new(n))));
        Ok(())
    })
}

/// # Safety
/// `state` must be null or a handle from this library that is not used again.
#[no_mangle]
pub unsafe extern "C" fn dft_estimator_free(state: *mut DftEstimator) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Updates entry `i` and writes its new value to `out` (may be null).
///
/// # Safety
/// `state` must be a live handle; `log_weights` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dft_estimator_update(
    state: *mut DftEstimator,
    i: usize,
    log_weights: *const f64,
    n: usize,
    gamma: f64,
    out: *mut f64,
) -> DftStatus {
    guard(|| {
        nonnull(state, "state")?;
        nonnull(log_weights, "log_weights")?;
        let v = lift((*state).0.update(i, slice::from_raw_parts(log_weights, n), gamma))?;
        if !out.is_null() {
            *out = v;
        }
        Ok(())
    })
}

/// # Safety
/// `state` must be a live handle; `out` must point to one double.
#[no_mangle]
pub unsafe extern "C" fn dft_estimator_get(state: *const DftEstimator, i: usize, out: *mut f64) -> DftStatus {
    guard(|| {
        nonnull(state, "state")?;
        nonnull(out, "out")?;
        let st = &(*state).0;
        if i >= st.len() {
            return Err(fail(
                DftStatus::ShapeMismatch,
                format!("index {i} outside estimator of {} entries", st.len()),
            ));
        }
        *out = st.log_u(i);
        Ok(())
    })
}
