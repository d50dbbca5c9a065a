//! The epsilon-classical maps
//!
//! ```text
//! theta' = theta + J            (mod 2 pi)
//! J'     = J + delta_t + tau*eta + k_tilde * sin(theta')
//! ```
//!
//! indexed by a periodic sequence `delta_t = 2 pi d_t / q`, and their
//! period-`T` compositions on the 2-torus.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{ensure_finite, QamError, Result};

pub const TWO_PI: f64 = 2.0 * PI;

/// Reduces into `[0, 2 pi)` via `floor`.
pub fn wrap_angle(x: f64) -> f64 {
    let r = x - TWO_PI * (x / TWO_PI).floor();
    // rounding can land exactly on 2 pi
    if r >= TWO_PI {
        0.0
    } else {
        r
    }
}

/// Signed representative in `(-pi, pi]`.
pub fn wrap_signed(x: f64) -> f64 {
    let r = wrap_angle(x);
    if r > PI {
        r - TWO_PI
    } else {
        r
    }
}

/// Distance between two torus points (max-norm on the angular differences).
pub fn torus_distance(a: PhasePoint, b: PhasePoint) -> f64 {
    wrap_signed(a.theta - b.theta)
        .abs()
        .max(wrap_signed(a.j - b.j).abs())
}

/// A periodic delta-sequence stored as integer numerators over `q`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeltaSequence {
    pub q: i64,
    pub d: Vec<i64>,
}

impl DeltaSequence {
    pub fn new(q: i64, d: Vec<i64>) -> Result<Self> {
        if q < 1 {
            return Err(QamError::InvalidInput(format!("q must be >= 1, got {q}")));
        }
        if d.is_empty() {
            return Err(QamError::InvalidInput("delta sequence needs period >= 1".into()));
        }
        Ok(Self { q, d })
    }

    pub fn constant_zero(q: i64) -> Self {
        Self { q, d: vec![0] }
    }

    pub fn period(&self) -> usize {
        self.d.len()
    }

    pub fn delta(&self, t: usize) -> f64 {
        TWO_PI * self.d[t % self.d.len()] as f64 / self.q as f64
    }

    pub fn sum_d(&self) -> i64 {
        self.d.iter().sum()
    }

    /// `Delta_T = T^{-1} sum_s delta_s`.
    pub fn mean_delta(&self) -> f64 {
        TWO_PI * self.sum_d() as f64 / (self.q * self.period() as i64) as f64
    }

    /// Same sequence with every `d_t` shifted by `q` (each `delta_t` by 2 pi).
    pub fn relabeled(&self, shift: i64) -> Self {
        Self {
            q: self.q,
            d: self.d.iter().map(|x| x + shift * self.q).collect(),
        }
    }

    /// Label such as `"-1;1"`.
    pub fn d_list(&self) -> String {
        self.d
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(";")
    }

    fn canonical_rotation(d: &[i64]) -> Vec<i64> {
        (0..d.len())
            .map(|r| {
                let mut v = d[r..].to_vec();
                v.extend_from_slice(&d[..r]);
                v
            })
            .min()
            .unwrap()
    }
}

/// One member of the map family.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusMapSpec {
    pub k_tilde: f64,
    /// `tau * eta`.
    pub drift: f64,
    pub deltas: DeltaSequence,
}

impl TorusMapSpec {
    pub fn new(k_tilde: f64, drift: f64, deltas: DeltaSequence) -> Result<Self> {
        ensure_finite("k_tilde", k_tilde)?;
        ensure_finite("drift", drift)?;
        Ok(Self {
            k_tilde,
            drift,
            deltas,
        })
    }

    pub fn period(&self) -> usize {
        self.deltas.period()
    }

    /// Jacobian of the single step `F_t` at the image angle `theta'`.
    pub fn step_jacobian(&self, theta_next: f64) -> [[f64; 2]; 2] {
        let c = self.k_tilde * theta_next.cos();
        [[1.0, 1.0], [c, 1.0 + c]]
    }
}

/// A phase-space point; `j` is the momentum-like variable `J`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePoint {
    pub theta: f64,
    pub j: f64,
}

impl PhasePoint {
    pub fn new(theta: f64, j: f64) -> Self {
        Self { theta, j }
    }

    pub fn reduced(self) -> Self {
        Self {
            theta: wrap_angle(self.theta),
            j: wrap_angle(self.j),
        }
    }
}

/// `F_t`: theta is advanced with the old `J`, then `J` is kicked at the new
/// theta. With `lifted` neither coordinate is reduced.
pub fn step(pt: PhasePoint, t: usize, spec: &TorusMapSpec, lifted: bool) -> PhasePoint {
    let theta = pt.theta + pt.j;
    let j = pt.j + spec.deltas.delta(t) + spec.drift + spec.k_tilde * theta.sin();
    let out = PhasePoint { theta, j };
    if lifted {
        out
    } else {
        out.reduced()
    }
}

/// `F^(T)_{t_start} = F_{t_start+T-1} o ... o F_{t_start}`, reduced to the torus.
pub fn period_map(pt: PhasePoint, spec: &TorusMapSpec, t_start: usize) -> PhasePoint {
    let mut x = pt;
    for t in t_start..t_start + spec.period() {
        x = step(x, t, spec, true);
    }
    x.reduced()
}

/// Seed grid of `n_theta x n_j` points, row-major in theta, cell-centred in
/// `[0, 2 pi)^2`.
pub fn seed_grid(n_theta: usize, n_j: usize) -> Vec<PhasePoint> {
    let mut out = Vec::with_capacity(n_theta * n_j);
    for a in 0..n_theta {
        for b in 0..n_j {
            out.push(PhasePoint::new(
                TWO_PI * (a as f64 + 0.5) / n_theta as f64,
                TWO_PI * (b as f64 + 0.5) / n_j as f64,
            ));
        }
    }
    out
}

/// Torus orbits of `F^(T)_0`: `iters` points per seed (the seed itself is
/// not included), grouped by seed in input order.
pub fn portrait(spec: &TorusMapSpec, seeds: &[PhasePoint], iters: usize) -> Result<Vec<Vec<PhasePoint>>> {
    if iters == 0 {
        return Err(QamError::InvalidInput("portrait needs iters >= 1".into()));
    }
    Ok(seeds
        .par_iter()
        .map(|&s| {
            let mut x = s.reduced();
            (0..iters)
                .map(|_| {
                    x = period_map(x, spec, 0);
                    x
                })
                .collect()
        })
        .collect())
}

/// All delta-sequences of period `T` obtained from strings
/// `s_0 .. s_{T-1}` in `{0..q-1}` with per-period winding `c = s_T - s_0`,
/// `d_t = s_{t+1} - s_t`. Sequences equal up to a cyclic shift are reported
/// once, as their lexicographically smallest rotation.
pub fn enumerate_delta_sequences(
    q: i64,
    period: usize,
    c_range: std::ops::RangeInclusive<i64>,
) -> Result<Vec<DeltaSequence>> {
    if q < 1 || period < 1 {
        return Err(QamError::InvalidInput(format!(
            "need q >= 1 and T >= 1, got q={q}, T={period}"
        )));
    }
    let total = (q as u128).checked_pow(period as u32).unwrap_or(u128::MAX);
    if total > 1 << 22 {
        return Err(QamError::InvalidInput(format!(
            "q^T = {q}^{period} strings is too many to enumerate"
        )));
    }
    let mut seen = BTreeSet::new();
    for c in c_range {
        let mut s = vec![0_i64; period];
        loop {
            let d: Vec<i64> = (0..period)
                .map(|t| {
                    let next = if t + 1 < period { s[t + 1] } else { s[0] + c };
                    next - s[t]
                })
                .collect();
            seen.insert(DeltaSequence::canonical_rotation(&d));
            // odometer increment
            let mut i = 0;
            while i < period {
                s[i] += 1;
                if s[i] < q {
                    break;
                }
                s[i] = 0;
                i += 1;
            }
            if i == period {
                break;
            }
        }
    }
    Ok(seen.into_iter().map(|d| DeltaSequence { q, d }).collect())
}
