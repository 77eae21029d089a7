//! C ABI for the low-rank CME solver.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Every fallible call returns an
//! [`LrcmeStatus`]; on failure `lrcme_last_error` describes the cause.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use lowrank_cme::cli::SubstepSpec;
use lowrank_cme::coefficients::CoefficientMode;
use lowrank_cme::initial::InitialCondition;
use lowrank_cme::integrator::{DlrSolver, SplittingOrder, SubstepScheme};
use lowrank_cme::lowrank::{LowRankState, DEFAULT_DENSE_BUDGET};
use lowrank_cme::model::{parse_model, ReactionNetwork, TruncationSpec};
use lowrank_cme::statespace::TruncatedStateSpace;
use lowrank_cme::Error;
use serde::Deserialize;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrcmeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidModel = 3,
    BudgetExceeded = 4,
    Instability = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A parsed reaction network.
pub struct LrcmeNetwork {
    network: ReactionNetwork,
}

/// A low-rank state together with the integrator that advances it.
pub struct LrcmeSolver {
    space: TruncatedStateSpace,
    solver: DlrSolver,
    state: LowRankState,
    t: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> LrcmeStatus {
    match err {
        Error::Syntax { .. } | Error::InvalidModel(_) | Error::Domain(_) => LrcmeStatus::InvalidModel,
        Error::Budget(_) => LrcmeStatus::BudgetExceeded,
        Error::Instability(_) => LrcmeStatus::Instability,
        Error::Io { .. } | Error::Json { .. } => LrcmeStatus::Io,
        _ => LrcmeStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard<F>(f: F) -> LrcmeStatus
where
    F: FnOnce() -> Result<(), (LrcmeStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LrcmeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LrcmeStatus::Panic
        }
    }
}

fn fail(err: Error) -> (LrcmeStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (LrcmeStatus, String) {
    (LrcmeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (LrcmeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (LrcmeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lrcme_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lrcme_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a JSON model document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lrcme_network_from_json(json: *const c_char, out: *mut *mut LrcmeNetwork) -> LrcmeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(json, "json")?;
        let network = parse_model(text).map_err(fail)?;
        *out = Box::into_raw(Box::new(LrcmeNetwork { network }));
        Ok(())
    })
}

/// Number of species, or 0 for a null handle.
///
/// # Safety
/// `network` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrcme_network_species(network: *const LrcmeNetwork) -> usize {
    network.as_ref().map_or(0, |n| n.network.n_species())
}

/// Number of reaction channels, or 0 for a null handle.
///
/// # Safety
/// `network` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrcme_network_reactions(network: *const LrcmeNetwork) -> usize {
    network.as_ref().map_or(0, |n| n.network.n_channels())
}

/// # Safety
/// `network` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lrcme_network_free(network: *mut LrcmeNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

fn default_order() -> SplittingOrder {
    SplittingOrder::Strang
}

fn default_substeps() -> SubstepSpec {
    SubstepSpec::Uniform(10)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverSpec {
    #[serde(default)]
    space: Option<TruncationSpec>,
    initial: InitialCondition,
    rank: usize,
    #[serde(default = "default_order")]
    order: SplittingOrder,
    #[serde(default = "default_substeps")]
    substeps: SubstepSpec,
    #[serde(default)]
    scheme: SubstepScheme,
    #[serde(default)]
    coefficients: CoefficientMode,
}

/// Builds a solver from a JSON description:
/// `{"space": {...}?, "initial": {...}, "rank": r, "order": 1|2?,
/// "substeps": k?, "scheme": "euler"|"rk4"?}`. Without `space` the model's
/// own truncation is used.
///
/// # Safety
/// `network` must be a live handle, `config` a NUL-terminated string and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lrcme_solver_new(
    network: *const LrcmeNetwork,
    config: *const c_char,
    out: *mut *mut LrcmeSolver,
) -> LrcmeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let net = &network.as_ref().ok_or_else(|| null("network"))?.network;
        let spec: SolverSpec = serde_json::from_str(str_arg(config, "config")?)
            .map_err(|e| (LrcmeStatus::InvalidArgument, format!("solver config: {e}")))?;
        let space = match (&spec.space, &net.truncation) {
            (Some(s), _) | (None, Some(s)) => s.build().map_err(fail)?,
            (None, None) => {
                return Err((
                    LrcmeStatus::InvalidArgument,
                    "no state space given and the model has no truncation".into(),
                ))
            }
        };
        if space.n_species() != net.n_species() {
            return Err((LrcmeStatus::InvalidArgument, "space does not match the model".into()));
        }
        net.validate_domain(&space).map_err(fail)?;
        let state = spec
            .initial
            .materialize(&space, DEFAULT_DENSE_BUDGET)
            .and_then(|d| d.to_lowrank(&space, spec.rank, DEFAULT_DENSE_BUDGET))
            .map_err(fail)?;
        let solver = DlrSolver::new(
            net,
            &space,
            spec.order,
            spec.substeps.resolve(),
            spec.scheme,
            spec.coefficients,
        )
        .map_err(fail)?;
        *out = Box::into_raw(Box::new(LrcmeSolver {
            space,
            solver,
            state,
            t: 0.0,
        }));
        Ok(())
    })
}

/// Advances the state by one splitting step of size `tau`.
///
/// # Safety
/// `solver` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrcme_solver_step(solver: *mut LrcmeSolver, tau: f64) -> LrcmeStatus {
    guard(|| {
        let s = solver.as_mut().ok_or_else(|| null("solver"))?;
        if !(tau > 0.0 && tau.is_finite()) {
            return Err((LrcmeStatus::InvalidArgument, format!("tau must be positive, got {tau}")));
        }
        let next = s.solver.step(&s.state, tau).map_err(fail)?;
        if !next.is_finite() {
            return Err((LrcmeStatus::Instability, "non-finite factors".into()));
        }
        s.state = next;
        s.t += tau;
        Ok(())
    })
}

/// Current time of the solver.
///
/// # Safety
/// `solver` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lrcme_solver_time(solver: *const LrcmeSolver, out: *mut f64) -> LrcmeStatus {
    guard(|| {
        let s = solver.as_ref().ok_or_else(|| null("solver"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = s.t;
        Ok(())
    })
}

/// Total probability of the current state.
///
/// # Safety
/// `solver` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lrcme_solver_mass(solver: *const LrcmeSolver, out: *mut f64) -> LrcmeStatus {
    guard(|| {
        let s = solver.as_ref().ok_or_else(|| null("solver"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = s.state.mass();
        Ok(())
    })
}

/// Writes the marginal of `species` (0-based) into `buf`. `written` receives
/// the required length, also when the buffer is too small.
///
/// # Safety
/// `solver` must be a live handle, `buf` must hold `len` doubles and
/// `written` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lrcme_solver_marginal(
    solver: *const LrcmeSolver,
    species: usize,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> LrcmeStatus {
    guard(|| {
        let s = solver.as_ref().ok_or_else(|| null("solver"))?;
        let m = s.state.marginal(&s.space, species).map_err(fail)?;
        *written.as_mut().ok_or_else(|| null("written"))? = m.len();
        if len < m.len() {
            return Err((
                LrcmeStatus::BufferTooSmall,
                format!("marginal needs {} entries, buffer holds {len}", m.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::slice::from_raw_parts_mut(buf, m.len()).copy_from_slice(&m);
        Ok(())
    })
}

/// # Safety
/// `solver` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lrcme_solver_free(solver: *mut LrcmeSolver) {
    if !solver.is_null() {
        drop(Box::from_raw(solver));
    }
}
