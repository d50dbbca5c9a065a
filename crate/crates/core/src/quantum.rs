//! Exact quantum evolution of the gravity-kicked rotor at fixed
//! quasi-momentum.
//!
//! States live on a finite window of the integer momentum ladder. The kick
//! `exp(-i k cos theta)` is applied on an angle grid through FFTs; the free
//! part is diagonal in momentum. The window grows whenever amplitude reaches
//! its edges.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use num_rational::Rational64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{ensure_finite, QamError, Result};
use crate::resonance::{gauss_coefficients, rational_to_f64, DetuningContext, ResonanceSpec};

pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-12;

/// Complex amplitudes on the momentum ladder `m_min ..= m_max` at fixed
/// quasi-momentum `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotorState {
    beta: f64,
    m_min: i64,
    amps: Vec<Complex64>,
    tol: f64,
}

impl RotorState {
    /// Plane wave `|m0>` with the window sized for kicks of strength `k`.
    pub fn plane_wave(m0: i64, beta: f64, k: f64) -> Result<Self> {
        ensure_finite("beta", beta)?;
        ensure_finite("k", k)?;
        let half = k.abs().ceil() as i64 + 16;
        let mut amps = vec![Complex64::new(0.0, 0.0); (2 * half + 1) as usize];
        amps[half as usize] = Complex64::new(1.0, 0.0);
        Ok(Self {
            beta,
            m_min: m0 - half,
            amps,
            tol: DEFAULT_TRUNCATION_TOL,
        })
    }

    /// Builds a state from raw amplitudes starting at `m_min`; the amplitudes
    /// are normalized.
    pub fn from_amplitudes(beta: f64, m_min: i64, mut amps: Vec<Complex64>) -> Result<Self> {
        ensure_finite("beta", beta)?;
        let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if amps.is_empty() || !(norm > 0.0) || !norm.is_finite() {
            return Err(QamError::InvalidInput(
                "state amplitudes must be finite and not all zero".into(),
            ));
        }
        amps.iter_mut().for_each(|a| *a /= norm);
        Ok(Self {
            beta,
            m_min,
            amps,
            tol: DEFAULT_TRUNCATION_TOL,
        })
    }

    pub fn with_truncation_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn m_min(&self) -> i64 {
        self.m_min
    }

    pub fn m_max(&self) -> i64 {
        self.m_min + self.amps.len() as i64 - 1
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn amplitude(&self, m: i64) -> Complex64 {
        let i = m - self.m_min;
        if i < 0 || i >= self.amps.len() as i64 {
            Complex64::new(0.0, 0.0)
        } else {
            self.amps[i as usize]
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    /// `<(m+beta)^2>`.
    pub fn second_moment(&self) -> f64 {
        self.amps
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let x = (self.m_min + i as i64) as f64 + self.beta;
                x * x * a.norm_sqr()
            })
            .sum()
    }

    /// Multiplication by `exp(i shift theta)`: a rigid shift of the ladder.
    pub fn shift_momentum(&mut self, shift: i64) {
        self.m_min += shift;
    }

    /// Euclidean distance between two states over the union of their windows.
    pub fn distance(&self, other: &Self) -> f64 {
        let lo = self.m_min.min(other.m_min);
        let hi = self.m_max().max(other.m_max());
        (lo..=hi)
            .map(|m| (self.amplitude(m) - other.amplitude(m)).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// Distance after aligning the global phase of `other` to `self` at the
    /// largest-magnitude amplitude of `self`.
    pub fn distance_modulo_phase(&self, other: &Self) -> f64 {
        let (imax, _) = self
            .amps
            .iter()
            .enumerate()
            .fold((0, -1.0), |(bi, bv), (i, a)| {
                if a.norm() > bv {
                    (i, a.norm())
                } else {
                    (bi, bv)
                }
            });
        let m = self.m_min + imax as i64;
        let (a, b) = (self.amplitude(m), other.amplitude(m));
        if b.norm() == 0.0 {
            return self.distance(other);
        }
        let rot = (a / b) / (a / b).norm();
        let mut aligned = other.clone();
        aligned.amps.iter_mut().for_each(|z| *z *= rot);
        self.distance(&aligned)
    }

    fn multiply_diagonal(&mut self, f: impl Fn(i64) -> Complex64) {
        let m_min = self.m_min;
        for (i, a) in self.amps.iter_mut().enumerate() {
            *a *= f(m_min + i as i64);
        }
    }
}

struct FftCache {
    planner: FftPlanner<f64>,
    plans: HashMap<usize, FftPair>,
    kick_phases: HashMap<(usize, u64), Arc<Vec<Complex64>>>,
}

thread_local! {
    static FFT_CACHE: RefCell<FftCache> = RefCell::new(FftCache {
        planner: FftPlanner::new(),
        plans: HashMap::new(),
        kick_phases: HashMap::new(),
    });
}

/// Applies `exp(-i k cos theta)`.
///
/// The state is transformed on a power-of-two angle grid at least twice the
/// size of the window padded by `ceil(|k|) + 8` momenta per side. Afterwards
/// the window grows per side, in steps of `ceil(|k|) + 8`, until every
/// amplitude above the truncation tolerance lies inside it; if significant
/// amplitude reaches the edge of the grid the grid is doubled and the kick
/// redone.
pub fn apply_kick(state: &mut RotorState, k: f64) -> Result<()> {
    ensure_finite("k", k)?;
    if k == 0.0 {
        return Ok(());
    }
    let w = state.amps.len();
    let step = k.abs().ceil() as usize + 8;
    let mut n = (2 * (w + 2 * step)).next_power_of_two();
    loop {
        let (fwd, inv, phases) = fft_resources(n, k);
        let pad = (n - w) / 2;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[pad..pad + w].copy_from_slice(&state.amps);
        inv.process(&mut buf);
        for (z, ph) in buf.iter_mut().zip(phases.iter()) {
            *z *= ph;
        }
        fwd.process(&mut buf);
        let scale = 1.0 / n as f64;
        buf.iter_mut().for_each(|z| *z *= scale);

        let tol = state.tol;
        let first = buf.iter().position(|z| z.norm() > tol).unwrap_or(pad);
        let last = buf.iter().rposition(|z| z.norm() > tol).unwrap_or(pad + w - 1);
        if first == 0 || last == n - 1 {
            if n > 1 << 26 {
                return Err(QamError::Truncation(format!(
                    "kick k={k} needs an angle grid beyond {n} points"
                )));
            }
            n *= 2;
            continue;
        }
        // grow each side by whole increments until [first, last] is covered
        let grow_left = (pad.saturating_sub(first)).div_ceil(step) * step;
        let grow_right = (last.saturating_sub(pad + w - 1)).div_ceil(step) * step;
        let lo = pad.saturating_sub(grow_left);
        let hi = (pad + w - 1 + grow_right).min(n - 1);
        state.m_min = state.m_min - (pad - lo) as i64;
        state.amps = buf[lo..=hi].to_vec();
        return Ok(());
    }
}

type FftPair = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

fn fft_resources(n: usize, k: f64) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>, Arc<Vec<Complex64>>) {
    FFT_CACHE.with(|c| {
        let mut c = c.borrow_mut();
        let (fwd, inv): FftPair = match c.plans.get(&n) {
            Some(p) => p.clone(),
            None => {
                let p = (c.planner.plan_fft_forward(n), c.planner.plan_fft_inverse(n));
                c.plans.insert(n, p.clone());
                p
            }
        };
        let key = (n, k.to_bits());
        let phases = match c.kick_phases.get(&key) {
            Some(ph) => ph.clone(),
            None => {
                let ph: Arc<Vec<Complex64>> = Arc::new(
                    (0..n)
                        .map(|j| {
                            let theta = 2.0 * PI * j as f64 / n as f64;
                            Complex64::from_polar(1.0, -k * theta.cos())
                        })
                        .collect(),
                );
                if c.kick_phases.len() > 64 {
                    c.kick_phases.clear();
                }
                c.kick_phases.insert(key, ph.clone());
                ph
            }
        };
        (fwd, inv, phases)
    })
}

/// Multiplies by `exp(-i (tau/2) (m + beta + eta/2 + eta n)^2)`.
pub fn apply_free(state: &mut RotorState, tau: f64, eta: f64, n: i64) {
    let shift = state.beta + eta / 2.0 + eta * n as f64;
    state.multiply_diagonal(|m| {
        let x = m as f64 + shift;
        Complex64::from_polar(1.0, -0.5 * tau * x * x)
    });
}

/// Parameters of the one-kick propagator `U_n`; the quasi-momentum is carried
/// by the state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KickSchedule {
    pub k: f64,
    pub tau: f64,
    pub eta: f64,
}

impl KickSchedule {
    pub fn validate(&self) -> Result<()> {
        ensure_finite("k", self.k)?;
        ensure_finite("tau", self.tau)?;
        ensure_finite("eta", self.eta)
    }

    /// `psi <- U_n psi`: free evolution with kick index `n`, then the kick.
    pub fn one_kick(&self, state: &mut RotorState, n: i64) -> Result<()> {
        apply_free(state, self.tau, self.eta, n);
        apply_kick(state, self.k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordPolicy {
    Nothing,
    Final,
    EveryKick,
}

/// Evolves `state` through kicks `0..n_kicks` and returns the recorded
/// momentum distributions `|amps|^2`, each paired with its `m_min`.
pub fn evolve(
    state: &mut RotorState,
    schedule: &KickSchedule,
    n_kicks: usize,
    record: RecordPolicy,
) -> Result<Vec<(i64, Vec<f64>)>> {
    schedule.validate()?;
    let mut out = Vec::new();
    for n in 0..n_kicks {
        schedule.one_kick(state, n as i64)?;
        if record == RecordPolicy::EveryKick || (record == RecordPolicy::Final && n + 1 == n_kicks)
        {
            out.push((state.m_min, state.probabilities()));
        }
    }
    Ok(out)
}

fn check_beta(state: &RotorState, beta: f64) -> Result<()> {
    if (state.beta - beta).abs() > 1e-12 {
        return Err(QamError::InvalidInput(format!(
            "state quasi-momentum {} does not match {}",
            state.beta, beta
        )));
    }
    Ok(())
}

/// Exact resonant step `psi <- exp(-ik cos theta) sum_s G_s psi(theta - 2 pi s/q)`.
pub fn resonant_step(
    state: &mut RotorState,
    spec: &ResonanceSpec,
    beta_r: Rational64,
    k: f64,
) -> Result<()> {
    let g = gauss_coefficients(spec.p, spec.q, beta_r)?;
    check_beta(state, rational_to_f64(beta_r))?;
    state.multiply_diagonal(|m| g.translation_weight(m));
    apply_kick(state, k)
}

/// Near-resonant step written as the free rotor with Planck constant
/// `epsilon`, followed by the `G_s`-weighted translations by
/// `2 pi s/q + tau phi_n` and the kick. Agrees with [`KickSchedule::one_kick`]
/// up to a global phase depending on `beta` and `n` only.
pub fn factorized_step(state: &mut RotorState, ctx: &DetuningContext, n: i64) -> Result<()> {
    check_beta(state, ctx.beta())?;
    let g = gauss_coefficients(ctx.spec.p, ctx.spec.q, ctx.beta_r)?;
    let beta_r = rational_to_f64(ctx.beta_r);
    let eps = ctx.epsilon;
    let drift = ctx.tau * ctx.phi(n);
    state.multiply_diagonal(|m| {
        let x = m as f64 + beta_r;
        let free = Complex64::from_polar(1.0, -0.5 * eps * x * x);
        let translate = Complex64::from_polar(1.0, -(m as f64) * drift);
        free * g.translation_weight(m) * translate
    });
    apply_kick(state, ctx.k)
}

/// Gravity parameter, either absolute or proportional to `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaSpec {
    Absolute(f64),
    Ratio(f64),
}

impl EtaSpec {
    pub fn eta(&self, tau: f64) -> f64 {
        match *self {
            EtaSpec::Absolute(e) => e,
            EtaSpec::Ratio(r) => r * tau,
        }
    }
}

/// Probability on uniform momentum bins; bin `b` is centered at `b * width`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDistribution {
    pub origin: i64,
    pub width: f64,
    pub probs: Vec<f64>,
}

impl BinnedDistribution {
    pub fn empty(width: f64) -> Self {
        Self {
            origin: 0,
            width,
            probs: Vec::new(),
        }
    }

    pub fn bin_of(&self, momentum: f64) -> i64 {
        (momentum / self.width).round() as i64
    }

    pub fn momentum(&self, index: usize) -> f64 {
        (self.origin + index as i64) as f64 * self.width
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn last_bin(&self) -> i64 {
        self.origin + self.probs.len() as i64 - 1
    }

    pub fn get(&self, bin: i64) -> f64 {
        let i = bin - self.origin;
        if i < 0 || i >= self.probs.len() as i64 {
            0.0
        } else {
            self.probs[i as usize]
        }
    }

    fn ensure_range(&mut self, lo: i64, hi: i64) {
        if self.probs.is_empty() {
            self.origin = lo;
            self.probs = vec![0.0; (hi - lo + 1) as usize];
            return;
        }
        if lo < self.origin {
            let extra = (self.origin - lo) as usize;
            let mut v = vec![0.0; extra];
            v.extend_from_slice(&self.probs);
            self.probs = v;
            self.origin = lo;
        }
        if hi > self.last_bin() {
            self.probs.resize((hi - self.origin + 1) as usize, 0.0);
        }
    }

    /// Adds `weight * |amps|^2` of a state, binned at `m + beta`.
    pub fn add_state(&mut self, state: &RotorState, weight: f64) {
        let lo = self.bin_of(state.m_min as f64 + state.beta);
        let hi = self.bin_of(state.m_max() as f64 + state.beta);
        self.ensure_range(lo, hi);
        for (i, a) in state.amps.iter().enumerate() {
            let b = self.bin_of((state.m_min + i as i64) as f64 + state.beta);
            self.probs[(b - self.origin) as usize] += weight * a.norm_sqr();
        }
    }

    pub fn add(&mut self, other: &BinnedDistribution, weight: f64) {
        if other.probs.is_empty() {
            return;
        }
        self.ensure_range(other.origin, other.last_bin());
        for (i, p) in other.probs.iter().enumerate() {
            self.probs[(other.origin - self.origin) as usize + i] += weight * p;
        }
    }

    /// Re-expresses the distribution on `lo ..= hi`, dropping anything outside.
    pub fn on_range(&self, lo: i64, hi: i64) -> Vec<f64> {
        (lo..=hi).map(|b| self.get(b)).collect()
    }
}

/// Configuration of a tau sweep over a Gaussian ensemble of plane waves.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanConfig {
    pub tau_grid: Vec<f64>,
    pub k: f64,
    pub eta: EtaSpec,
    pub n_kicks: usize,
    pub ensemble_size: usize,
    pub momentum_mean: f64,
    pub momentum_sigma: f64,
    pub seed: u64,
    pub bin_width: f64,
    /// Indices into `tau_grid` for which per-kick history is kept.
    pub history: HistoryPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HistoryPolicy {
    None,
    All,
    Indices(Vec<usize>),
}

impl HistoryPolicy {
    fn wants(&self, i: usize) -> bool {
        match self {
            HistoryPolicy::None => false,
            HistoryPolicy::All => true,
            HistoryPolicy::Indices(v) => v.contains(&i),
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_finite("k", self.k)?;
        ensure_finite("momentum_mean", self.momentum_mean)?;
        ensure_finite("momentum_sigma", self.momentum_sigma)?;
        ensure_finite("bin_width", self.bin_width)?;
        match self.eta {
            EtaSpec::Absolute(e) | EtaSpec::Ratio(e) => ensure_finite("eta", e)?,
        }
        if self.tau_grid.is_empty() {
            return Err(QamError::InvalidInput("empty tau grid".into()));
        }
        for &t in &self.tau_grid {
            ensure_finite("tau", t)?;
        }
        if self.ensemble_size == 0 {
            return Err(QamError::InvalidInput("ensemble size must be >= 1".into()));
        }
        if !(self.momentum_sigma >= 0.0) || !(self.bin_width > 0.0) {
            return Err(QamError::InvalidInput(
                "momentum sigma must be >= 0 and bin width > 0".into(),
            ));
        }
        Ok(())
    }

    /// Initial momenta `m0 + beta` drawn from the seeded Gaussian.
    pub fn initial_momenta(&self) -> Result<Vec<(i64, f64)>> {
        let normal = Normal::new(self.momentum_mean, self.momentum_sigma)
            .map_err(|e| QamError::InvalidInput(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.ensemble_size)
            .map(|_| {
                let p0: f64 = normal.sample(&mut rng);
                let m0 = p0.floor();
                (m0 as i64, p0 - m0)
            })
            .collect())
    }
}

/// Ensemble-averaged momentum distributions over a tau grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumScan {
    pub tau_grid: Vec<f64>,
    pub n_kicks: usize,
    pub bin_width: f64,
    /// Final distribution per tau, all on the common bin range `bin_lo ..= bin_hi`.
    pub bin_lo: i64,
    pub bin_hi: i64,
    pub prob: Vec<Vec<f64>>,
    /// Per-kick distributions for the tau indices selected in the config.
    pub history: Vec<(usize, Vec<BinnedDistribution>)>,
}

impl MomentumScan {
    pub fn momentum_grid(&self) -> Vec<f64> {
        (self.bin_lo..=self.bin_hi)
            .map(|b| b as f64 * self.bin_width)
            .collect()
    }

    pub fn history_for(&self, tau_index: usize) -> Option<&[BinnedDistribution]> {
        self.history
            .iter()
            .find(|(i, _)| *i == tau_index)
            .map(|(_, h)| h.as_slice())
    }
}

/// Per-kick ensemble-averaged distributions for a single tau.
pub fn ensemble_history(
    tau: f64,
    cfg: &ScanConfig,
    members: &[(i64, f64)],
) -> Result<Vec<BinnedDistribution>> {
    let schedule = KickSchedule {
        k: cfg.k,
        tau,
        eta: cfg.eta.eta(tau),
    };
    schedule.validate()?;
    let weight = 1.0 / members.len() as f64;
    let mut acc = vec![BinnedDistribution::empty(cfg.bin_width); cfg.n_kicks.max(1)];
    for &(m0, beta) in members {
        let mut state = RotorState::plane_wave(m0, beta, cfg.k)?;
        if cfg.n_kicks == 0 {
            acc[0].add_state(&state, weight);
            continue;
        }
        for n in 0..cfg.n_kicks {
            schedule.one_kick(&mut state, n as i64)?;
            acc[n].add_state(&state, weight);
        }
    }
    Ok(acc)
}

/// Runs the full sweep. Columns are computed in parallel; within a column
/// the ensemble is accumulated in member order, so results do not depend on
/// the thread count.
pub fn scan_tau(cfg: &ScanConfig) -> Result<MomentumScan> {
    cfg.validate()?;
    let members = cfg.initial_momenta()?;
    let columns: Vec<(BinnedDistribution, Option<Vec<BinnedDistribution>>)> = cfg
        .tau_grid
        .par_iter()
        .enumerate()
        .map(|(i, &tau)| -> Result<_> {
            if cfg.history.wants(i) {
                let h = ensemble_history(tau, cfg, &members)?;
                Ok((h.last().cloned().unwrap(), Some(h)))
            } else {
                Ok((final_distribution(tau, cfg, &members)?, None))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let bin_lo = columns
        .iter()
        .filter(|(d, _)| !d.probs.is_empty())
        .map(|(d, _)| d.origin)
        .min()
        .unwrap_or(0);
    let bin_hi = columns
        .iter()
        .filter(|(d, _)| !d.probs.is_empty())
        .map(|(d, _)| d.last_bin())
        .max()
        .unwrap_or(0);
    let prob = columns.iter().map(|(d, _)| d.on_range(bin_lo, bin_hi)).collect();
    let history = columns
        .into_iter()
        .enumerate()
        .filter_map(|(i, (_, h))| h.map(|h| (i, h)))
        .collect();
    Ok(MomentumScan {
        tau_grid: cfg.tau_grid.clone(),
        n_kicks: cfg.n_kicks,
        bin_width: cfg.bin_width,
        bin_lo,
        bin_hi,
        prob,
        history,
    })
}

fn final_distribution(
    tau: f64,
    cfg: &ScanConfig,
    members: &[(i64, f64)],
) -> Result<BinnedDistribution> {
    let schedule = KickSchedule {
        k: cfg.k,
        tau,
        eta: cfg.eta.eta(tau),
    };
    let weight = 1.0 / members.len() as f64;
    let mut acc = BinnedDistribution::empty(cfg.bin_width);
    for &(m0, beta) in members {
        let mut state = RotorState::plane_wave(m0, beta, cfg.k)?;
        evolve(&mut state, &schedule, cfg.n_kicks, RecordPolicy::Nothing)?;
        acc.add_state(&state, weight);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_state(seed: u64, beta: f64, half: i64) -> RotorState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amps = (0..2 * half + 1)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        RotorState::from_amplitudes(beta, -half, amps).unwrap()
    }

    /// `(1/2pi) int exp(-i k cos t) exp(-i m t) dt` by the trapezoid rule,
    /// which is spectrally accurate for periodic integrands.
    fn kick_coefficient_quadrature(k: f64, m: i64) -> Complex64 {
        let n = 4096;
        (0..n)
            .map(|j| {
                let t = 2.0 * PI * j as f64 / n as f64;
                Complex64::from_polar(1.0, -k * t.cos() - m as f64 * t)
            })
            .sum::<Complex64>()
            / n as f64
    }

    #[test]
    fn zero_kick_is_identity() {
        let mut s = random_state(1, 0.3, 6);
        let before = s.clone();
        apply_kick(&mut s, 0.0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn plane_wave_kick_matches_quadrature() {
        let k = 2.7;
        let mut s = RotorState::plane_wave(0, 0.0, k).unwrap();
        apply_kick(&mut s, k).unwrap();
        for m in -20..=20 {
            let expect = kick_coefficient_quadrature(k, m);
            assert!(
                (s.amplitude(m) - expect).norm() < 1e-13,
                "m={m}: {} vs {}",
                s.amplitude(m),
                expect
            );
        }
    }

    #[test]
    fn successive_kicks_add() {
        let mut a = random_state(2, 0.1, 5);
        let mut b = a.clone();
        apply_kick(&mut a, 1.1).unwrap();
        apply_kick(&mut a, 0.7).unwrap();
        apply_kick(&mut b, 1.8).unwrap();
        assert!(a.distance(&b) < 1e-12, "{}", a.distance(&b));
    }

    #[test]
    fn window_grows_under_many_kicks() {
        let mut s = RotorState::plane_wave(0, 0.0, 1.0).unwrap();
        let w0 = s.amplitudes().len();
        for _ in 0..30 {
            apply_kick(&mut s, 1.0).unwrap();
        }
        assert!(s.amplitudes().len() > w0);
        assert!((s.norm_sqr() - 1.0).abs() < 1e-9);
        assert!(s.amplitudes()[0].norm() < 1e-12);
        assert!(s.amplitudes().last().unwrap().norm() < 1e-12);
    }

    #[test]
    fn talbot_free_step_is_identity() {
        let mut s = random_state(3, 0.0, 8);
        let before = s.clone();
        apply_free(&mut s, 4.0 * PI, 0.0, 0);
        assert!(s.distance(&before) < 1e-12);
    }

    #[test]
    fn half_talbot_phase() {
        let mut s = RotorState::from_amplitudes(0.0, 1, vec![Complex64::new(1.0, 0.0)]).unwrap();
        apply_free(&mut s, PI, 0.0, 0);
        let expect = Complex64::from_polar(1.0, -PI / 2.0);
        assert!((s.amplitude(1) - expect).norm() < 1e-15);
    }

    #[test]
    fn free_phase_kick_index_difference() {
        // ratio of phases at n+1 and n, expanded algebraically
        let (tau, eta, beta, n) = (2.1, 0.37, 0.25, 3_i64);
        for m in -5..=5 {
            let mut a = RotorState::from_amplitudes(beta, m, vec![Complex64::new(1.0, 0.0)]).unwrap();
            let mut b = a.clone();
            apply_free(&mut a, tau, eta, n);
            apply_free(&mut b, tau, eta, n + 1);
            let ratio = b.amplitude(m) / a.amplitude(m);
            let x = m as f64 + beta + eta / 2.0;
            let expect = Complex64::from_polar(
                1.0,
                -tau * x * eta - tau * eta * eta * (2 * n + 1) as f64 / 2.0,
            );
            assert!((ratio - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn free_evolution_preserves_distribution() {
        let mut s = random_state(4, 0.4, 6);
        let p0 = s.probabilities();
        let sched = KickSchedule {
            k: 0.0,
            tau: 2.3,
            eta: 0.2,
        };
        let hist = evolve(&mut s, &sched, 10, RecordPolicy::EveryKick).unwrap();
        for (m_min, p) in hist {
            assert_eq!(m_min, -6);
            for (x, y) in p.iter().zip(&p0) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn resonant_step_rejects_wrong_beta() {
        let spec = ResonanceSpec::new(1, 2).unwrap();
        let mut s = random_state(5, 0.3, 4);
        assert!(resonant_step(&mut s, &spec, Rational64::new(0, 1), 1.0).is_err());
    }

    #[test]
    fn resonant_step_q1_is_kick_up_to_phase() {
        let spec = ResonanceSpec::new(2, 1).unwrap();
        let beta_r = spec.beta_r_set[0];
        let mut a = random_state(6, rational_to_f64(beta_r), 5);
        let mut b = a.clone();
        resonant_step(&mut a, &spec, beta_r, 1.3).unwrap();
        apply_kick(&mut b, 1.3).unwrap();
        assert!(b.distance_modulo_phase(&a) < 1e-12);
        assert!((a.norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn factorized_reduces_to_resonant_at_zero_detuning() {
        let spec = ResonanceSpec::new(1, 2).unwrap();
        let beta_r = Rational64::new(0, 1);
        let ctx = DetuningContext::new(spec.clone(), beta_r, PI, 2.0, 0.0, 0.0).unwrap();
        let mut a = random_state(7, 0.0, 5);
        let mut b = a.clone();
        factorized_step(&mut a, &ctx, 0).unwrap();
        resonant_step(&mut b, &spec, beta_r, 2.0).unwrap();
        assert!(a.distance(&b) < 1e-12);
    }

    #[test]
    fn binned_accumulation_sums_to_one() {
        let s = random_state(8, 0.6, 7);
        let mut d = BinnedDistribution::empty(1.0);
        d.add_state(&s, 0.5);
        d.add_state(&s, 0.5);
        assert!((d.total() - 1.0).abs() < 1e-12);
        let mut e = BinnedDistribution::empty(1.0);
        e.add(&d, 1.0);
        assert_eq!(e, d);
    }

    #[test]
    fn scan_rejects_bad_config() {
        let cfg = ScanConfig {
            tau_grid: vec![f64::NAN],
            k: 1.0,
            eta: EtaSpec::Ratio(0.1),
            n_kicks: 2,
            ensemble_size: 2,
            momentum_mean: 0.0,
            momentum_sigma: 2.5,
            seed: 1,
            bin_width: 1.0,
            history: HistoryPolicy::None,
        };
        assert!(scan_tau(&cfg).is_err());
    }

    #[test]
    fn scan_columns_normalized() {
        let cfg = ScanConfig {
            tau_grid: vec![3.0, 3.1, 3.2],
            k: 0.8 * PI,
            eta: EtaSpec::Ratio(0.126),
            n_kicks: 15,
            ensemble_size: 6,
            momentum_mean: 0.0,
            momentum_sigma: 2.5,
            seed: 42,
            bin_width: 1.0,
            history: HistoryPolicy::Indices(vec![1]),
        };
        let scan = scan_tau(&cfg).unwrap();
        for col in &scan.prob {
            assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let h = scan.history_for(1).unwrap();
        assert_eq!(h.len(), 15);
        assert!(h.iter().all(|d| (d.total() - 1.0).abs() < 1e-6));
        assert!(scan.history_for(0).is_none());
    }
}
