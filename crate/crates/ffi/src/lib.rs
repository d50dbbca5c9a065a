//! C ABI over `qam`.
//!
//! Objects are opaque handles created by `qam_*_new` and released with the
//! matching `qam_*_free`. Every fallible call returns a [`QamStatus`]; the
//! message of the last failure on the calling thread is available from
//! [`qam_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use qam::epsmaps::{period_map, DeltaSequence, PhasePoint, TorusMapSpec};
use qam::orbits::{find_periodic_orbits, predict_acceleration, OrbitSearch, PeriodicOrbit};
use qam::quantum::{KickSchedule, RotorState};
use qam::resonance::gauss_coefficients;
use qam::QamError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QamStatus {
    Ok = 0,
    InvalidInput = 1,
    NotCoprime = 2,
    NotResonant = 3,
    Degenerate = 4,
    Truncation = 5,
    Io = 6,
    NullPointer = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Quantum state of one quasi-momentum component.
pub struct QamRotor(RotorState);

/// A period map `F^(T)_0` on the torus.
pub struct QamMap(TorusMapSpec);

/// Periodic orbits of one map for a fixed period and jumping index.
pub struct QamCatalog {
    orbits: Vec<PeriodicOrbit>,
    a_predicted: Vec<f64>,
}

/// One catalog row as plain data.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct QamOrbit {
    pub theta0: f64,
    pub j0: f64,
    pub trace: f64,
    pub residue: f64,
    pub stable: bool,
    pub a_predicted: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(e: QamError) -> QamStatus {
    let status = match e {
        QamError::InvalidInput(_) => QamStatus::InvalidInput,
        QamError::NotCoprime { .. } => QamStatus::NotCoprime,
        QamError::NotResonant { .. } => QamStatus::NotResonant,
        QamError::Degenerate(_) => QamStatus::Degenerate,
        QamError::Truncation(_) => QamStatus::Truncation,
        QamError::Io(_) => QamStatus::Io,
    };
    set_error(e.to_string());
    status
}

fn guard(f: impl FnOnce() -> QamStatus) -> QamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("panic inside qam".into());
            QamStatus::Panic
        }
    }
}

macro_rules! nonnull {
    ($($p:expr),+) => {
        $(if $p.is_null() {
            set_error(format!("{} is null", stringify!($p)));
            return QamStatus::NullPointer;
        })+
    };
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn qam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Writes the `q` Gauss coefficients of resonance `p/q` at quasi-momentum
/// `beta_num/beta_den` into `re`/`im`, which must hold `len >= q` values.
///
/// # Safety
/// `re` and `im` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn qam_gauss_coefficients(
    p: i64,
    q: i64,
    beta_num: i64,
    beta_den: i64,
    re: *mut f64,
    im: *mut f64,
    len: usize,
) -> QamStatus {
    guard(|| {
        nonnull!(re, im);
        if beta_den == 0 {
            return fail(QamError::InvalidInput("beta denominator is 0".into()));
        }
        let beta = num_rational::Rational64::new(beta_num, beta_den);
        let g = match gauss_coefficients(p, q, beta) {
            Ok(g) => g,
            Err(e) => return fail(e),
        };
        if len < g.values.len() {
            set_error(format!("need {} slots, got {len}", g.values.len()));
            return QamStatus::BufferTooSmall;
        }
        for (i, z) in g.values.iter().enumerate() {
            *re.add(i) = z.re;
            *im.add(i) = z.im;
        }
        QamStatus::Ok
    })
}

/// Plane wave `|m0>` at quasi-momentum `beta`, sized for kicks of strength `k`.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn qam_rotor_new(m0: i64, beta: f64, k: f64, out: *mut *mut QamRotor) -> QamStatus {
    guard(|| {
        nonnull!(out);
        match RotorState::plane_wave(m0, beta, k) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(QamRotor(s)));
                QamStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `rotor` must come from [`qam_rotor_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qam_rotor_free(rotor: *mut QamRotor) {
    if !rotor.is_null() {
        drop(Box::from_raw(rotor));
    }
}

/// Applies kicks `n_start .. n_start + n_kicks` of the gravity-kicked rotor.
///
/// # Safety
/// `rotor` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qam_rotor_evolve(
    rotor: *mut QamRotor,
    k: f64,
    tau: f64,
    eta: f64,
    n_start: i64,
    n_kicks: usize,
) -> QamStatus {
    guard(|| {
        nonnull!(rotor);
        let sched = KickSchedule { k, tau, eta };
        if let Err(e) = sched.validate() {
            return fail(e);
        }
        let state = &mut (*rotor).0;
        for n in 0..n_kicks as i64 {
            if let Err(e) = sched.one_kick(state, n_start + n) {
                return fail(e);
            }
        }
        QamStatus::Ok
    })
}

/// Lowest ladder index and number of amplitudes in the current window.
///
/// # Safety
/// `rotor` must be a live handle; outputs valid for one write.
#[no_mangle]
pub unsafe extern "C" fn qam_rotor_window(rotor: *const QamRotor, m_min: *mut i64, len: *mut usize) -> QamStatus {
    guard(|| {
        nonnull!(rotor, m_min, len);
        let s = &(*rotor).0;
        *m_min = s.m_min();
        *len = s.amplitudes().len();
        QamStatus::Ok
    })
}

/// Copies `|amplitude|^2` over the window returned by [`qam_rotor_window`].
///
/// # Safety
/// `rotor` must be a live handle; `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn qam_rotor_probabilities(rotor: *const QamRotor, out: *mut f64, len: usize) -> QamStatus {
    guard(|| {
        nonnull!(rotor, out);
        let probs = (*rotor).0.probabilities();
        if len < probs.len() {
            set_error(format!("need {} slots, got {len}", probs.len()));
            return QamStatus::BufferTooSmall;
        }
        ptr::copy_nonoverlapping(probs.as_ptr(), out, probs.len());
        QamStatus::Ok
    })
}

/// `<(m + beta)^2>`.
///
/// # Safety
/// `rotor` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn qam_rotor_second_moment(rotor: *const QamRotor, out: *mut f64) -> QamStatus {
    guard(|| {
        nonnull!(rotor, out);
        *out = (*rotor).0.second_moment();
        QamStatus::Ok
    })
}

/// Map with `delta_t = 2 pi d[t] / q`, `t < d_len`.
///
/// # Safety
/// `d` must be valid for `d_len` reads; `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn qam_map_new(
    k_tilde: f64,
    drift: f64,
    q: i64,
    d: *const i64,
    d_len: usize,
    out: *mut *mut QamMap,
) -> QamStatus {
    guard(|| {
        nonnull!(d, out);
        let d = std::slice::from_raw_parts(d, d_len).to_vec();
        let spec = DeltaSequence::new(q, d).and_then(|seq| TorusMapSpec::new(k_tilde, drift, seq));
        match spec {
            Ok(s) => {
                *out = Box::into_raw(Box::new(QamMap(s)));
                QamStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `map` must come from [`qam_map_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qam_map_free(map: *mut QamMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// One application of the period map starting at step `t_start`, in place.
///
/// # Safety
/// `map` must be a live handle; `theta` and `j` valid for read and write.
#[no_mangle]
pub unsafe extern "C" fn qam_map_apply(map: *const QamMap, t_start: usize, theta: *mut f64, j: *mut f64) -> QamStatus {
    guard(|| {
        nonnull!(map, theta, j);
        let x = period_map(PhasePoint::new(*theta, *j), &(*map).0, t_start);
        *theta = x.theta;
        *j = x.j;
        QamStatus::Ok
    })
}

/// Searches periodic orbits of period `period_p` and jumping index `jump_j`
/// on a `grid x grid` seed lattice. `epsilon` sets the predicted
/// accelerations; pass 0 to leave them NaN.
///
/// # Safety
/// `map` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn qam_catalog_new(
    map: *const QamMap,
    period_p: usize,
    jump_j: i64,
    epsilon: f64,
    grid: usize,
    out: *mut *mut QamCatalog,
) -> QamStatus {
    guard(|| {
        nonnull!(map, out);
        let search = OrbitSearch {
            seeds_theta: grid,
            seeds_j: grid,
            ..OrbitSearch::default()
        };
        let orbits = match find_periodic_orbits(&(*map).0, period_p, jump_j, &search) {
            Ok(o) => o,
            Err(e) => return fail(e),
        };
        let mut a_predicted = Vec::with_capacity(orbits.len());
        for o in &orbits {
            if epsilon == 0.0 {
                a_predicted.push(f64::NAN);
            } else {
                match predict_acceleration(o, epsilon) {
                    Ok(a) => a_predicted.push(a.a),
                    Err(e) => return fail(e),
                }
            }
        }
        *out = Box::into_raw(Box::new(QamCatalog { orbits, a_predicted }));
        QamStatus::Ok
    })
}

/// # Safety
/// `catalog` must come from [`qam_catalog_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qam_catalog_free(catalog: *mut QamCatalog) {
    if !catalog.is_null() {
        drop(Box::from_raw(catalog));
    }
}

/// Number of orbits, or 0 for a null handle.
///
/// # Safety
/// `catalog` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn qam_catalog_len(catalog: *const QamCatalog) -> usize {
    if catalog.is_null() {
        0
    } else {
        (*catalog).orbits.len()
    }
}

/// # Safety
/// `catalog` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn qam_catalog_get(catalog: *const QamCatalog, index: usize, out: *mut QamOrbit) -> QamStatus {
    guard(|| {
        nonnull!(catalog, out);
        let c = &*catalog;
        let Some(o) = c.orbits.get(index) else {
            set_error(format!("index {index} out of range for {} orbits", c.orbits.len()));
            return QamStatus::InvalidInput;
        };
        *out = QamOrbit {
            theta0: o.points[0].theta,
            j0: o.points[0].j,
            trace: o.trace,
            residue: o.residue,
            stable: o.stable(),
            a_predicted: c.a_predicted[index],
        };
        QamStatus::Ok
    })
}
