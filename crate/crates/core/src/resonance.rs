//! Arithmetic of kicked-rotor resonances.
//!
//! A primary resonance sits at `tau = 2*pi*p/q` with `gcd(p, q) = 1`. The
//! resonant quasi-momenta are `(nu/p + q/2) mod 1`, and the free evolution
//! over one period is then a sum of `q` rigid rotations weighted by the
//! Gauss coefficients `G_s`.

use std::f64::consts::PI;

use num_complex::Complex64;
use num_integer::Integer;
use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_finite, QamError, Result};
use crate::quantum::{KickSchedule, RotorState};

/// A primary resonance `tau = 2*pi*p/q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceSpec {
    pub p: i64,
    pub q: i64,
    pub tau_res: f64,
    /// Order `l` of the resonance; always `q` for primary resonances.
    pub order: i64,
    pub beta_r_set: Vec<Rational64>,
}

impl ResonanceSpec {
    pub fn new(p: i64, q: i64) -> Result<Self> {
        let beta_r_set = resonant_quasimomenta(p, q)?;
        Ok(Self {
            p,
            q,
            tau_res: 2.0 * PI * p as f64 / q as f64,
            order: q,
            beta_r_set,
        })
    }

    pub fn is_resonant_beta(&self, beta: Rational64) -> bool {
        let b = reduce_mod_one(beta);
        self.beta_r_set.iter().any(|&r| r == b)
    }

    /// Detuning of `tau` from this resonance.
    pub fn epsilon(&self, tau: f64) -> f64 {
        tau - self.tau_res
    }
}

/// The `q` Gauss coefficients of a resonance at a given resonant
/// quasi-momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussCoefficients {
    pub q: i64,
    pub values: Vec<Complex64>,
}

impl GaussCoefficients {
    pub fn max_modulus_error(&self) -> f64 {
        let target = (self.q as f64).powf(-0.5);
        self.values
            .iter()
            .map(|g| (g.norm() - target).abs())
            .fold(0.0, f64::max)
    }

    /// Multiplier of momentum component `m` produced by
    /// `sum_s G_s psi(theta - 2*pi*s/q)`.
    pub fn translation_weight(&self, m: i64) -> Complex64 {
        let q = self.q;
        self.values
            .iter()
            .enumerate()
            .map(|(s, g)| {
                let k = (m * s as i64).rem_euclid(q);
                g * Complex64::from_polar(1.0, -2.0 * PI * k as f64 / q as f64)
            })
            .sum()
    }
}

/// Everything needed to describe a kick period detuned from a resonance.
#[derive(Debug, Clone, PartialEq)]
pub struct DetuningContext {
    pub spec: ResonanceSpec,
    pub beta_r: Rational64,
    pub tau: f64,
    /// `tau - 2*pi*p/q`; negative values are kept as is.
    pub epsilon: f64,
    pub k: f64,
    pub k_tilde: f64,
    pub eta: f64,
    pub delta_beta: f64,
}

impl DetuningContext {
    pub fn new(
        spec: ResonanceSpec,
        beta_r: Rational64,
        tau: f64,
        k: f64,
        eta: f64,
        delta_beta: f64,
    ) -> Result<Self> {
        for (name, x) in [("tau", tau), ("k", k), ("eta", eta), ("delta_beta", delta_beta)] {
            ensure_finite(name, x)?;
        }
        if !spec.is_resonant_beta(beta_r) {
            return Err(QamError::NotResonant {
                p: spec.p,
                q: spec.q,
                beta: beta_r.to_string(),
            });
        }
        let epsilon = spec.epsilon(tau);
        Ok(Self {
            beta_r: reduce_mod_one(beta_r),
            tau,
            epsilon,
            k,
            k_tilde: k * epsilon,
            eta,
            delta_beta,
            spec,
        })
    }

    pub fn beta(&self) -> f64 {
        rational_to_f64(self.beta_r) + self.delta_beta
    }

    /// `phi_n = delta_beta + eta/2 + eta*n`.
    pub fn phi(&self, n: i64) -> f64 {
        self.delta_beta + self.eta / 2.0 + self.eta * n as f64
    }
}

pub fn rational_to_f64(r: Rational64) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn reduce_mod_one(r: Rational64) -> Rational64 {
    r - r.floor()
}

/// The `p` distinct primary resonant quasi-momenta `(nu/p + q/2) mod 1`.
pub fn resonant_quasimomenta(p: i64, q: i64) -> Result<Vec<Rational64>> {
    if p < 1 || q < 1 {
        return Err(QamError::InvalidInput(format!(
            "resonance needs positive p and q, got p={p}, q={q}"
        )));
    }
    if p.gcd(&q) != 1 {
        return Err(QamError::NotCoprime { p, q });
    }
    let half_q = Rational64::new(q, 2);
    let mut out: Vec<Rational64> = (0..p)
        .map(|nu| reduce_mod_one(Rational64::new(nu, p) + half_q))
        .collect();
    out.sort();
    Ok(out)
}

/// `G_s = (1/q) sum_l exp(-i pi p (l+beta_r)^2 / q) exp(2 pi i s l / q)`.
///
/// Quadratic phases are reduced modulo `2*pi` in integer arithmetic before
/// conversion to floating point.
pub fn gauss_coefficients(p: i64, q: i64, beta_r: Rational64) -> Result<GaussCoefficients> {
    if p < 1 || q < 1 {
        return Err(QamError::InvalidInput(format!(
            "resonance needs positive p and q, got p={p}, q={q}"
        )));
    }
    if p.gcd(&q) != 1 {
        return Err(QamError::NotCoprime { p, q });
    }
    // beta_r = nu/p + q/2 mod 1  <=>  p (beta_r - q/2) is an integer
    if !((beta_r - Rational64::new(q, 2)) * p).is_integer() {
        return Err(QamError::NotResonant {
            p,
            q,
            beta: beta_r.to_string(),
        });
    }
    let beta_r = reduce_mod_one(beta_r);
    let a = *beta_r.numer() as i128;
    let b = *beta_r.denom() as i128;
    let (p128, q128) = (p as i128, q as i128);
    // phase = -pi * p (l b + a)^2 / (q b^2), periodic in the numerator mod 2 q b^2
    let modulus = 2 * q128 * b * b;
    let quad: Vec<Complex64> = (0..q128)
        .map(|l| {
            let x = l * b + a;
            let num = (p128 * ((x * x) % modulus)).rem_euclid(modulus);
            Complex64::from_polar(1.0, -PI * num as f64 / (q128 * b * b) as f64)
        })
        .collect();
    let roots: Vec<Complex64> = (0..q)
        .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / q as f64))
        .collect();
    let values = (0..q)
        .map(|s| {
            let step = s as usize;
            let mut idx = 0;
            let mut sum = Complex64::new(0.0, 0.0);
            for z in &quad {
                sum += z * roots[idx];
                idx += step;
                if idx >= roots.len() {
                    idx -= roots.len();
                }
            }
            sum / q as f64
        })
        .collect();
    Ok(GaussCoefficients { q, values })
}

/// Default half-width of the search window in `tau/(2 pi)`.
pub fn default_window(q_max: i64) -> f64 {
    1.0 / (2.0 * (q_max as f64).powi(2))
}

/// Rationals `p/q` with `q <= q_max` and `|tau/(2 pi) - p/q| <= window`,
/// sorted by `|epsilon|` (ties: smaller `q` first).
///
/// The candidates are produced by walking the Farey sequence of order
/// `q_max` with the next-term recurrence, so every rational appears once and
/// no floating-point rounding decides membership of the sequence itself.
pub fn nearest_resonances(
    tau: f64,
    q_max: i64,
    window: Option<f64>,
) -> Result<Vec<(ResonanceSpec, f64)>> {
    ensure_finite("tau", tau)?;
    if tau <= 0.0 {
        return Err(QamError::InvalidInput(format!("tau must be positive, got {tau}")));
    }
    if q_max < 1 {
        return Err(QamError::InvalidInput(format!("q_max must be >= 1, got {q_max}")));
    }
    let w = window.unwrap_or_else(|| default_window(q_max));
    if !(w >= 0.0) {
        return Err(QamError::InvalidInput(format!("window must be >= 0, got {w}")));
    }
    let x = tau / (2.0 * PI);
    let lo = x - w;
    let hi = x + w;
    let mut out = Vec::new();
    // Farey walk starting at the integer floor(lo) = a/1; its successor in
    // F_n is (a n + 1)/n.
    let start = lo.floor().max(0.0) as i64;
    let (mut a, mut b, mut c, mut d) = (start, 1_i64, start * q_max + 1, q_max);
    let consider = |p: i64, q: i64, out: &mut Vec<(ResonanceSpec, f64)>| -> Result<()> {
        let r = p as f64 / q as f64;
        if p >= 1 && r >= lo && r <= hi {
            let spec = ResonanceSpec::new(p, q)?;
            let eps = spec.epsilon(tau);
            out.push((spec, eps));
        }
        Ok(())
    };
    consider(a, b, &mut out)?;
    while (c as f64 / d as f64) <= hi {
        consider(c, d, &mut out)?;
        let k = (q_max + b) / d;
        let (e, f) = (k * c - a, k * d - b);
        a = c;
        b = d;
        c = e;
        d = f;
    }
    out.sort_by(|(s1, e1), (s2, e2)| {
        e1.abs()
            .total_cmp(&e2.abs())
            .then(s1.q.cmp(&s2.q))
            .then(s1.p.cmp(&s2.p))
    });
    Ok(out)
}

/// Nearest rational with denominator at most `q_max`, regardless of window.
pub fn closest_resonance(tau: f64, q_max: i64) -> Result<(ResonanceSpec, f64)> {
    nearest_resonances(tau, q_max, Some(1.0))?
        .into_iter()
        .next()
        .ok_or_else(|| QamError::InvalidInput(format!("no resonance found near tau={tau}")))
}

/// Norm of `[U, exp(i q theta)] psi` for the one-kick propagator at
/// `tau = 2 pi p / q`, `eta = 0` and quasi-momentum `beta`, with `psi` a
/// pseudo-random normalized state.
pub fn check_commutation(p: i64, q: i64, beta: f64, k: f64) -> Result<f64> {
    check_commutation_seeded(p, q, beta, k, 0x5eed_c0de)
}

pub fn check_commutation_seeded(p: i64, q: i64, beta: f64, k: f64, seed: u64) -> Result<f64> {
    let spec = ResonanceSpec::new(p, q)?;
    ensure_finite("beta", beta)?;
    ensure_finite("k", k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amps: Vec<Complex64> = (0..17)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let psi = RotorState::from_amplitudes(beta, -8, amps)?;
    let schedule = KickSchedule {
        k,
        tau: spec.tau_res,
        eta: 0.0,
    };

    let mut a = psi.clone();
    a.shift_momentum(q);
    schedule.one_kick(&mut a, 0)?;

    let mut b = psi;
    schedule.one_kick(&mut b, 0)?;
    b.shift_momentum(q);

    Ok(a.distance(&b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: i64, d: i64) -> Rational64 {
        Rational64::new(n, d)
    }

    #[test]
    fn quasimomenta_examples() {
        assert_eq!(resonant_quasimomenta(1, 1).unwrap(), vec![r(1, 2)]);
        assert_eq!(resonant_quasimomenta(1, 2).unwrap(), vec![r(0, 1)]);
        let b = resonant_quasimomenta(7, 13).unwrap();
        assert_eq!(b.len(), 7);
        for nu in 0..7 {
            assert!(b.contains(&reduce_mod_one(r(1, 2) + r(nu, 7))));
        }
    }

    #[test]
    fn quasimomenta_reject_non_coprime() {
        assert_eq!(
            resonant_quasimomenta(2, 4),
            Err(QamError::NotCoprime { p: 2, q: 4 })
        );
        assert!(resonant_quasimomenta(0, 3).is_err());
    }

    #[test]
    fn gauss_q1_is_pure_phase() {
        let beta = r(1, 2);
        let g = gauss_coefficients(3, 1, beta).unwrap();
        let expect = Complex64::from_polar(1.0, -PI * 3.0 * 0.25);
        assert!((g.values[0] - expect).norm() < 1e-15);
    }

    #[test]
    fn gauss_half_resonance_two_terms() {
        let g = gauss_coefficients(1, 2, r(0, 1)).unwrap();
        assert!((g.values[0] - Complex64::new(0.5, -0.5)).norm() < 1e-15);
        assert!((g.values[1] - Complex64::new(0.5, 0.5)).norm() < 1e-15);
    }

    #[test]
    fn gauss_rejects_non_resonant_beta() {
        assert!(matches!(
            gauss_coefficients(1, 2, r(1, 3)),
            Err(QamError::NotResonant { .. })
        ));
    }

    #[test]
    fn gauss_q13_modulus() {
        let g = gauss_coefficients(7, 13, r(1, 2)).unwrap();
        assert!(g.max_modulus_error() < 1e-12);
    }

    #[test]
    fn nearest_includes_exact_half() {
        let res = nearest_resonances(PI, 2, None).unwrap();
        assert_eq!((res[0].0.p, res[0].0.q), (1, 2));
        assert_eq!(res[0].1, 0.0);
    }

    #[test]
    fn nearest_fig_values() {
        let res = nearest_resonances(2.0 * PI * 0.541, 13, None).unwrap();
        let hit = res.iter().find(|(s, _)| s.p == 7 && s.q == 13).unwrap();
        assert!((hit.1 - 0.016).abs() < 5e-4);

        let res = nearest_resonances(2.0 * PI * 0.475, 2, None).unwrap();
        assert_eq!((res[0].0.p, res[0].0.q), (1, 2));
        assert!((res[0].1 + 0.157).abs() < 5e-4);
    }

    #[test]
    fn nearest_empty_window() {
        let res = nearest_resonances(2.0 * PI * 0.3, 2, Some(0.01)).unwrap();
        assert!(res.is_empty());
    }

    #[test]
    fn nearest_matches_brute_force() {
        for &(x, qmax, w) in &[(0.541, 13, 0.05), (1.37, 7, 0.2), (0.02, 20, 0.031)] {
            let tau = 2.0 * PI * x;
            let got: Vec<(i64, i64)> = nearest_resonances(tau, qmax, Some(w))
                .unwrap()
                .iter()
                .map(|(s, _)| (s.p, s.q))
                .collect();
            let mut brute = Vec::new();
            for q in 1..=qmax {
                for p in 1..=((x + w) * q as f64).ceil() as i64 {
                    let v = p as f64 / q as f64;
                    if p.gcd(&q) == 1 && (v - x).abs() <= w {
                        brute.push((p, q));
                    }
                }
            }
            let mut g = got.clone();
            g.sort();
            brute.sort();
            assert_eq!(g, brute, "x={x}");
        }
    }

    #[test]
    fn commutation_examples() {
        assert!(check_commutation(1, 2, 0.0, 2.5).unwrap() < 1e-10);
        assert!(check_commutation(1, 2, 0.3, 2.5).unwrap() > 1e-3);
        assert!(check_commutation(1, 1, 0.5, 2.5).unwrap() < 1e-10);
    }

    #[test]
    fn detuning_context_k_tilde() {
        let spec = ResonanceSpec::new(7, 13).unwrap();
        let tau = 2.0 * PI * 0.541;
        let ctx = DetuningContext::new(spec, r(1, 2), tau, 0.8 * PI, 0.1, 0.0).unwrap();
        assert_eq!(ctx.k_tilde, ctx.k * ctx.epsilon);
        let spec = ResonanceSpec::new(1, 2).unwrap();
        let ctx = DetuningContext::new(spec, r(0, 1), 2.0 * PI * 0.475, 1.0, 0.0, 0.0).unwrap();
        assert!(ctx.epsilon < 0.0);
    }
}
