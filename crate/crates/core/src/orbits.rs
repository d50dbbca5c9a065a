//! Periodic orbits of the period maps, their stability, the acceleration
//! they predict, and the stability of the associated rays through the
//! tridiagonal Hessian of the action.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::epsmaps::{
    period_map, seed_grid, step, torus_distance, wrap_angle, wrap_signed, PhasePoint,
    TorusMapSpec, TWO_PI,
};
use crate::error::{QamError, Result};

pub const PARABOLIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Elliptic,
    Parabolic,
    Hyperbolic,
}

impl Stability {
    pub fn from_trace(trace: f64) -> Self {
        if (trace.abs() - 2.0).abs() <= PARABOLIC_TOL {
            Stability::Parabolic
        } else if trace.abs() < 2.0 {
            Stability::Elliptic
        } else {
            Stability::Hyperbolic
        }
    }
}

type Mat2 = [[f64; 2]; 2];

fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

/// A periodic orbit of `F^(T)_0` on the torus.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicOrbit {
    pub spec: TorusMapSpec,
    /// Number of period-map iterations before closure.
    pub period_p: usize,
    /// `J` advances by `2 pi * jump_j` over `period_p * T` steps on the cylinder.
    pub jump_j: i64,
    /// Torus points at every `T`-th kick.
    pub points: Vec<PhasePoint>,
    /// Turns of theta over one orbit period, with `J` taken in `[0, 2 pi)` at
    /// every step.
    pub theta_winding: i64,
    /// Tangent map over `period_p * T` steps.
    pub tangent: Mat2,
    pub trace: f64,
    pub residue: f64,
    pub stability: Stability,
}

impl PeriodicOrbit {
    pub fn stable(&self) -> bool {
        self.stability == Stability::Elliptic
    }

    pub fn steps(&self) -> usize {
        self.period_p * self.spec.period()
    }

    /// `(1/(p T)) ln rho` of the tangent map, `rho` its spectral radius.
    pub fn tangent_lyapunov(&self) -> f64 {
        let tr = self.trace;
        let det = self.tangent[0][0] * self.tangent[1][1] - self.tangent[0][1] * self.tangent[1][0];
        let disc = tr * tr - 4.0 * det;
        let rho = if disc <= 0.0 {
            det.abs().sqrt()
        } else {
            (tr.abs() + disc.sqrt()) / 2.0
        };
        rho.ln() / self.steps() as f64
    }

    fn from_point(spec: &TorusMapSpec, p: usize, j: i64, x0: PhasePoint) -> Self {
        let x0 = x0.reduced();
        let (_, tangent, theta_winding) = lifted_orbit(spec, x0, p * spec.period());
        let mut points = Vec::with_capacity(p);
        let mut x = x0;
        for _ in 0..p {
            points.push(x);
            x = period_map(x, spec, 0);
        }
        let trace = tangent[0][0] + tangent[1][1];
        Self {
            spec: spec.clone(),
            period_p: p,
            jump_j: j,
            points,
            theta_winding,
            tangent,
            trace,
            residue: (2.0 - trace) / 4.0,
            stability: Stability::from_trace(trace),
        }
    }

    /// Rotates `points` so the lexicographically smallest one comes first.
    fn canonicalize(&mut self) {
        let i = self
            .points
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.theta.total_cmp(&b.theta).then(a.j.total_cmp(&b.j)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if i != 0 {
            self.points.rotate_left(i);
            // the tangent map depends on the base point, trace does not
            let (_, tangent, w) = lifted_orbit(&self.spec, self.points[0], self.steps());
            self.tangent = tangent;
            self.theta_winding = w;
        }
    }

    pub fn same_orbit(&self, other: &Self, tol: f64) -> bool {
        if self.period_p != other.period_p || self.points.is_empty() {
            return false;
        }
        let n = self.points.len();
        (0..n).any(|r| {
            (0..n).all(|i| torus_distance(self.points[i], other.points[(i + r) % n]) < tol)
        })
    }
}

/// Iterates `steps` single steps on the cylinder from `x0`. Returns the lifted
/// end point, the tangent map, and the theta winding counted with `J`
/// reduced to `[0, 2 pi)`.
fn lifted_orbit(spec: &TorusMapSpec, x0: PhasePoint, steps: usize) -> (PhasePoint, Mat2, i64) {
    let mut x = x0;
    let mut m = IDENTITY;
    let mut theta_torus_lift = x0.theta;
    for t in 0..steps {
        theta_torus_lift += wrap_angle(x.j);
        x = step(x, t, spec, true);
        m = mat_mul(&spec.step_jacobian(x.theta), &m);
    }
    let w = ((theta_torus_lift - x0.theta) / TWO_PI).round() as i64;
    (x, m, w)
}

/// Newton and seeding parameters for orbit searches.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitSearch {
    pub seeds_theta: usize,
    pub seeds_j: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub dedup_tol: f64,
}

impl Default for OrbitSearch {
    fn default() -> Self {
        Self {
            seeds_theta: 64,
            seeds_j: 64,
            tol: 1e-12,
            max_iter: 50,
            dedup_tol: 1e-6,
        }
    }
}

/// Closed-form period-1 orbits for `T = 1`:
/// `sin theta* = (2 pi j - delta_0 - tau eta) / k_tilde`, `J* = 0`.
pub fn fixed_points_analytic(spec: &TorusMapSpec, j: i64) -> Result<Vec<PeriodicOrbit>> {
    if spec.period() != 1 {
        return Err(QamError::InvalidInput(format!(
            "analytic fixed points need T = 1, got T = {}",
            spec.period()
        )));
    }
    if spec.k_tilde == 0.0 {
        return Err(QamError::Degenerate("k_tilde = 0".into()));
    }
    let rhs = (TWO_PI * j as f64 - spec.deltas.delta(0) - spec.drift) / spec.k_tilde;
    if rhs.abs() > 1.0 {
        return Ok(Vec::new());
    }
    let t1 = rhs.asin();
    let mut roots = vec![wrap_angle(t1)];
    let t2 = wrap_angle(PI - t1);
    if wrap_signed(t2 - roots[0]).abs() > 1e-15 {
        roots.push(t2);
    }
    Ok(roots
        .into_iter()
        .map(|theta| {
            let trace = 2.0 + spec.k_tilde * theta.cos();
            let c = spec.k_tilde * theta.cos();
            PeriodicOrbit {
                spec: spec.clone(),
                period_p: 1,
                jump_j: j,
                points: vec![PhasePoint::new(theta, 0.0)],
                theta_winding: 0,
                tangent: [[1.0, 1.0], [c, 1.0 + c]],
                trace,
                residue: (2.0 - trace) / 4.0,
                stability: Stability::from_trace(trace),
            }
        })
        .collect())
}

/// Newton solve of `theta_{pT} = theta_0 (mod 2 pi)`,
/// `J_{pT} = J_0 + 2 pi j` from one seed.
fn newton_from_seed(
    spec: &TorusMapSpec,
    steps: usize,
    j: i64,
    seed: PhasePoint,
    search: &OrbitSearch,
) -> Option<PhasePoint> {
    let mut x = seed;
    for _ in 0..=search.max_iter {
        let (end, m, _) = lifted_orbit(spec, x, steps);
        let g0 = wrap_signed(end.theta - x.theta);
        let g1 = end.j - x.j - TWO_PI * j as f64;
        let res = g0.abs().max(g1.abs());
        if !res.is_finite() {
            return None;
        }
        if res < search.tol {
            return Some(x.reduced());
        }
        let a = [[m[0][0] - 1.0, m[0][1]], [m[1][0], m[1][1] - 1.0]];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        if det.abs() < 1e-14 {
            return None;
        }
        let dx = (-g0 * a[1][1] + g1 * a[0][1]) / det;
        let dj = (g0 * a[1][0] - g1 * a[0][0]) / det;
        x = PhasePoint::new(x.theta + dx, x.j + dj);
        // accept at the roundoff floor
        if dx.abs().max(dj.abs()) < 1e-15 * (1.0 + x.theta.abs() + x.j.abs()) && res < 1e3 * search.tol {
            return Some(x.reduced());
        }
    }
    None
}

fn has_smaller_period(spec: &TorusMapSpec, x: PhasePoint, p: usize, tol: f64) -> bool {
    let mut y = x;
    for d in 1..p {
        y = period_map(y, spec, 0);
        if p % d == 0 && torus_distance(x, y) < tol {
            return true;
        }
    }
    false
}

/// Periodic orbits of prime period `p` (in period-map iterations) and jumping
/// index `j`, seeded from a uniform grid. Returned sorted by their canonical
/// first point.
pub fn find_periodic_orbits(
    spec: &TorusMapSpec,
    p: usize,
    j: i64,
    search: &OrbitSearch,
) -> Result<Vec<PeriodicOrbit>> {
    if p < 1 {
        return Err(QamError::InvalidInput("orbit period must be >= 1".into()));
    }
    let steps = p * spec.period();
    let seeds = seed_grid(search.seeds_theta, search.seeds_j);
    let roots: Vec<Option<PhasePoint>> = seeds
        .par_iter()
        .map(|&s| newton_from_seed(spec, steps, j, s, search))
        .collect();
    let mut out: Vec<PeriodicOrbit> = Vec::new();
    for x in roots.into_iter().flatten() {
        if has_smaller_period(spec, x, p, search.dedup_tol) {
            continue;
        }
        let mut orbit = PeriodicOrbit::from_point(spec, p, j, x);
        if out.iter().any(|o| o.same_orbit(&orbit, search.dedup_tol)) {
            continue;
        }
        orbit.canonicalize();
        out.push(orbit);
    }
    out.sort_by(|a, b| {
        a.points[0]
            .theta
            .total_cmp(&b.points[0].theta)
            .then(a.points[0].j.total_cmp(&b.points[0].j))
    });
    Ok(out)
}

/// Acceleration of the accelerator mode attached to an orbit, in momentum
/// ladder units per kick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelerationPrediction {
    pub a: f64,
    pub jump_j: i64,
    pub period_p: usize,
    pub period_t: usize,
    pub mean_delta: f64,
    pub drift: f64,
    pub epsilon: f64,
}

/// `a = (2 pi j / (p T) - Delta_T - tau eta) / epsilon`.
///
/// `J` is `epsilon` times the physical momentum (plus bookkeeping terms), so
/// for negative `epsilon` the sign flips and `a` is already the physical
/// momentum gained per kick.
pub fn acceleration(
    jump_j: i64,
    period_p: usize,
    period_t: usize,
    mean_delta: f64,
    drift: f64,
    epsilon: f64,
) -> Result<AccelerationPrediction> {
    if epsilon == 0.0 || !epsilon.is_finite() {
        return Err(QamError::InvalidInput(format!(
            "acceleration needs a finite non-zero detuning, got {epsilon}"
        )));
    }
    if period_p == 0 || period_t == 0 {
        return Err(QamError::InvalidInput("periods must be >= 1".into()));
    }
    let a = (TWO_PI * jump_j as f64 / (period_p * period_t) as f64 - mean_delta - drift) / epsilon;
    Ok(AccelerationPrediction {
        a,
        jump_j,
        period_p,
        period_t,
        mean_delta,
        drift,
        epsilon,
    })
}

pub fn predict_acceleration(orbit: &PeriodicOrbit, epsilon: f64) -> Result<AccelerationPrediction> {
    acceleration(
        orbit.jump_j,
        orbit.period_p,
        orbit.spec.period(),
        orbit.spec.deltas.mean_delta(),
        orbit.spec.drift,
        epsilon,
    )
}

/// Angles `theta_0 .. theta_{n-1}` along the ray of a periodic orbit. One
/// orbit period is unrolled from the orbit's first point and repeated, so
/// the sequence is exactly `pT`-periodic even for unstable orbits.
pub fn orbit_to_ray(orbit: &PeriodicOrbit, n_kicks: usize) -> Vec<f64> {
    let steps = orbit.steps();
    let mut cycle = Vec::with_capacity(steps);
    let mut x = orbit.points[0];
    for t in 0..steps {
        cycle.push(x.theta);
        x = step(x, t, &orbit.spec, false);
    }
    (0..n_kicks).map(|i| cycle[i % steps]).collect()
}

/// Lifted trajectory of the map itself from the orbit's first point
/// (`theta` reduced, `J` on the cylinder); `n + 1` points.
pub fn lifted_trajectory(spec: &TorusMapSpec, start: PhasePoint, n: usize) -> Vec<PhasePoint> {
    let mut out = Vec::with_capacity(n + 1);
    let mut x = start;
    out.push(x);
    for t in 0..n {
        x = step(x, t, spec, true);
        x.theta = wrap_angle(x.theta);
        out.push(x);
    }
    out
}

/// Angles `theta_1 .. theta_n` along a ray whose labels `s_t` are drawn
/// uniformly from `0..q`, so that `delta_t = 2 pi (s_{t+1} - s_t) / q` is
/// aperiodic.
pub fn random_delta_ray(
    k_tilde: f64,
    drift: f64,
    q: i64,
    start: PhasePoint,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if q < 1 {
        return Err(QamError::InvalidInput(format!("q must be >= 1, got {q}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = rng.gen_range(0..q);
    let (mut theta, mut j) = (start.theta, start.j);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let next = rng.gen_range(0..q);
        let delta = TWO_PI * (next - s) as f64 / q as f64;
        s = next;
        theta = wrap_angle(theta + j);
        j += delta + drift + k_tilde * theta.sin();
        out.push(theta);
    }
    Ok(out)
}

/// Symmetric tridiagonal matrix with off-diagonal `-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RayHessian {
    pub diag: Vec<f64>,
}

impl RayHessian {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub const OFF_DIAGONAL: f64 = -1.0;
}

/// `diag_t = 2 - k_tilde V''(theta_t) = 2 + k_tilde cos theta_t`.
pub fn build_ray_hessian(thetas: &[f64], k_tilde: f64) -> RayHessian {
    RayHessian {
        diag: thetas.iter().map(|t| 2.0 + k_tilde * t.cos()).collect(),
    }
}

const RESCALE_EXP: i32 = 512;

/// `ln |D_t|` for the leading principal minors, `D_0 = diag_0`,
/// `D_1 = diag_1 D_0 - 1`, `D_t = diag_t D_{t-1} - D_{t-2}`. The pair
/// `(D_t, D_{t-1})` is rescaled by `2^-512` whenever `|D_t|` exceeds
/// `2^512`.
pub fn det_growth(h: &RayHessian) -> Vec<f64> {
    let big = 2f64.powi(RESCALE_EXP);
    let shrink = 2f64.powi(-RESCALE_EXP);
    let mut out = Vec::with_capacity(h.len());
    let (mut prev, mut prev2) = (1.0_f64, 0.0_f64);
    let mut log_scale = 0.0;
    for &a in &h.diag {
        let cur = a * prev - prev2;
        prev2 = prev;
        prev = cur;
        if prev.abs() > big {
            prev *= shrink;
            prev2 *= shrink;
            log_scale += RESCALE_EXP as f64 * LN_2;
        }
        out.push(prev.abs().ln() + log_scale);
    }
    out
}

/// Least-squares slope of `ys` against their index, ignoring non-finite
/// entries.
pub fn growth_slope(ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = ys
        .iter()
        .enumerate()
        .filter(|(_, y)| y.is_finite())
        .map(|(i, &y)| (i as f64, y))
        .collect();
    crate::detect::linear_fit(&pts).0
}

/// Top Lyapunov exponent of the transfer-matrix product
/// `prod_t [[diag_t, -1], [1, 0]]`, renormalizing the propagated vector at
/// every step.
pub fn ray_lyapunov(thetas: &[f64], k_tilde: f64) -> f64 {
    transfer_lyapunov(&build_ray_hessian(thetas, k_tilde).diag)
}

pub fn transfer_lyapunov(diag: &[f64]) -> f64 {
    if diag.is_empty() {
        return 0.0;
    }
    let (mut u, mut v) = (1.0_f64, 0.0_f64);
    let mut acc = 0.0;
    for &a in diag {
        let nu = a * u - v;
        v = u;
        u = nu;
        let norm = u.hypot(v);
        acc += norm.ln();
        u /= norm;
        v /= norm;
    }
    acc / diag.len() as f64
}

/// One row of an orbit catalog: an orbit together with the resonance it was
/// computed for and its predicted acceleration.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub res_p: i64,
    pub res_q: i64,
    pub epsilon: f64,
    pub orbit: PeriodicOrbit,
    pub a_predicted: f64,
}

/// A single orbit search request.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogQuery {
    pub res_p: i64,
    pub res_q: i64,
    pub epsilon: f64,
    pub spec: TorusMapSpec,
    pub period_p: usize,
    pub jump_j: i64,
}

/// Runs every query and concatenates results in query order.
pub fn build_catalog(queries: &[CatalogQuery], search: &OrbitSearch) -> Result<Vec<CatalogEntry>> {
    let mut out = Vec::new();
    for q in queries {
        for orbit in find_periodic_orbits(&q.spec, q.period_p, q.jump_j, search)? {
            let a = predict_acceleration(&orbit, q.epsilon)?.a;
            out.push(CatalogEntry {
                res_p: q.res_p,
                res_q: q.res_q,
                epsilon: q.epsilon,
                orbit,
                a_predicted: a,
            });
        }
    }
    Ok(out)
}

/// Jumping indices worth searching for period `p`: the integers nearest to
/// `p T (Delta_T + tau eta) / (2 pi)`, plus/minus `spread`.
pub fn candidate_jumps(spec: &TorusMapSpec, p: usize, spread: i64) -> Vec<i64> {
    let pt = (p * spec.period()) as f64;
    let center = (pt * (spec.deltas.mean_delta() + spec.drift) / TWO_PI).round() as i64;
    (center - spread..=center + spread).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epsmaps::DeltaSequence;

    fn spec(k: f64, drift: f64, q: i64, d: Vec<i64>) -> TorusMapSpec {
        TorusMapSpec::new(k, drift, DeltaSequence::new(q, d).unwrap()).unwrap()
    }

    #[test]
    fn analytic_no_solution() {
        let s = spec(0.01, 0.0, 1, vec![0]);
        assert!(fixed_points_analytic(&s, 1).unwrap().is_empty());
    }

    #[test]
    fn analytic_symmetric_case() {
        for k in [0.3, -0.7] {
            let s = spec(k, TWO_PI, 1, vec![0]);
            let fps = fixed_points_analytic(&s, 1).unwrap();
            assert_eq!(fps.len(), 2);
            let mut thetas: Vec<f64> = fps.iter().map(|o| o.points[0].theta).collect();
            thetas.sort_by(f64::total_cmp);
            assert!(thetas[0].abs() < 1e-15 && (thetas[1] - PI).abs() < 1e-15);
            assert_eq!(fps.iter().filter(|o| o.stable()).count(), 1);
            let st = fps.iter().find(|o| o.stable()).unwrap();
            assert!(k * st.points[0].theta.cos() < 0.0);
        }
    }

    #[test]
    fn analytic_rejects_degenerate() {
        assert!(fixed_points_analytic(&spec(0.0, 1.0, 1, vec![0]), 0).is_err());
        assert!(fixed_points_analytic(&spec(0.2, 1.0, 2, vec![0, 0]), 0).is_err());
    }

    #[test]
    fn newton_recovers_analytic_roots() {
        let s = spec(0.4, 4.0, 3, vec![1]);
        let analytic = fixed_points_analytic(&s, 1).unwrap();
        assert_eq!(analytic.len(), 2);
        let search = OrbitSearch {
            seeds_theta: 16,
            seeds_j: 16,
            ..Default::default()
        };
        let found = find_periodic_orbits(&s, 1, 1, &search).unwrap();
        assert_eq!(found.len(), 2);
        for a in &analytic {
            let hit = found
                .iter()
                .find(|f| torus_distance(f.points[0], a.points[0]) < 1e-10);
            let hit = hit.expect("analytic root missing");
            assert!((hit.trace - a.trace).abs() < 1e-10);
        }
    }

    #[test]
    fn period_zero_rejected() {
        let s = spec(0.4, 1.0, 1, vec![0]);
        assert!(find_periodic_orbits(&s, 0, 0, &OrbitSearch::default()).is_err());
    }

    #[test]
    fn acceleration_zero_and_root() {
        let a = acceleration(1, 5, 1, 0.0, TWO_PI / 5.0, 0.1).unwrap();
        assert!(a.a.abs() < 1e-14);
        // eta = 0.126 tau: zero at tau^2 = 2 pi / (5 * 0.126)
        let tau_root = (TWO_PI / (5.0 * 0.126)).sqrt();
        assert!((tau_root / TWO_PI - 0.5026).abs() < 1e-4);
        let tau = TWO_PI * 0.51;
        let a = acceleration(1, 5, 1, 0.0, 0.126 * tau * tau, tau - PI).unwrap();
        assert!((a.a + 0.59).abs() < 0.01, "{}", a.a);
        assert!(acceleration(1, 5, 1, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn det_growth_closed_forms() {
        let h = RayHessian { diag: vec![2.0; 50] };
        let d = det_growth(&h);
        for (t, l) in d.iter().enumerate() {
            assert!((l - ((t + 2) as f64).ln()).abs() < 1e-12);
        }
        let h = RayHessian { diag: vec![1.7] };
        assert!((det_growth(&h)[0] - 1.7_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn det_growth_rescaling_matches_log_space() {
        // diag 3: D_t = ((3+r)/2)^(t+2)-((3-r)/2)^(t+2) over r, r = sqrt 5
        let h = RayHessian { diag: vec![3.0; 5000] };
        let d = det_growth(&h);
        let lam = (3.0 + 5f64.sqrt()) / 2.0;
        let t = 4999.0;
        let expect = (t + 2.0) * lam.ln() - 5f64.sqrt().ln();
        assert!((d[4999] - expect).abs() < 1e-8 * expect);
    }

    #[test]
    fn lyapunov_of_constant_hyperbolic_diag() {
        let a: f64 = 2.5;
        let exp = ((a + (a * a - 4.0).sqrt()) / 2.0).ln();
        assert!((transfer_lyapunov(&vec![a; 4000]) - exp).abs() < 1e-3);
        assert!(transfer_lyapunov(&vec![1.3; 4000]).abs() < 1e-3);
    }

    #[test]
    fn ray_of_fixed_point_is_constant() {
        let s = spec(0.4, 4.0, 3, vec![1]);
        let fp = &fixed_points_analytic(&s, 1).unwrap()[0];
        let ray = orbit_to_ray(fp, 20);
        assert!(ray.iter().all(|t| (t - ray[0]).abs() < 1e-14));
    }

    #[test]
    fn candidate_jumps_center() {
        let s = spec(0.1, TWO_PI / 5.0 + 0.01, 1, vec![0]);
        assert_eq!(candidate_jumps(&s, 5, 0), vec![1]);
    }
}
