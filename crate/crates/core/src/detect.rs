//! Accelerator-mode detection in simulated momentum distributions.
//!
//! Per kick, local maxima outside the bulk are located and reduced to
//! mass-weighted centroids; maxima are linked across kicks into tracks, the
//! tracks are fitted with a straight line and the slope is compared to the
//! orbit catalog.

use rayon::prelude::*;

use crate::error::{QamError, Result};
use crate::orbits::CatalogEntry;
use crate::quantum::{scan_tau, BinnedDistribution, HistoryPolicy, MomentumScan, ScanConfig};

/// Ordinary least squares `y = slope x + intercept`. Returns
/// `(slope, intercept, r2)`; fewer than two distinct abscissae or a constant
/// ordinate give slope 0 and r2 0.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    if points.len() < 2 {
        let y = points.first().map(|p| p.1).unwrap_or(0.0);
        return (0.0, y, 0.0);
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return (0.0, my, 0.0);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        0.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    (slope, my - slope * mx, r2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Momentum interval treated as the bulk of the cloud.
    pub bulk_window: (f64, f64),
    /// Minimum probability inside the centroid window for a maximum to count.
    pub mass_threshold: f64,
    /// Half-width (momentum units) of the centroid window.
    pub centroid_halfwidth: f64,
    /// Maximum distance between a track's predicted and observed centroid.
    pub gate: f64,
    /// Kicks a track may skip before it is closed.
    pub max_gap: usize,
    /// Minimum fraction of kicks a surviving track must cover.
    pub min_fraction: f64,
    /// Leading kicks excluded from the slope fit.
    pub transient: usize,
    /// Half-width in bins of the boxcar applied before maxima are searched.
    pub smoothing: usize,
    /// Half-width in kicks of the running average over the history.
    pub time_smoothing: usize,
    /// Half-width in bins of the running mean taken as the local background;
    /// 0 disables subtraction.
    pub background: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            bulk_window: (-6.0, 6.0),
            mass_threshold: 1e-3,
            centroid_halfwidth: 2.0,
            gate: 5.0,
            max_gap: 5,
            min_fraction: 0.6,
            transient: 10,
            smoothing: 2,
            time_smoothing: 3,
            background: 8,
        }
    }
}

/// Central interval holding `fraction` of the probability, dilated by
/// `dilation` on each side.
pub fn bulk_window_from_control(control: &BinnedDistribution, fraction: f64, dilation: f64) -> (f64, f64) {
    let total = control.total();
    let tail = (1.0 - fraction) / 2.0 * total;
    let mut cum = 0.0;
    let mut lo = None;
    let mut hi = None;
    for (i, p) in control.probs.iter().enumerate() {
        let before = cum;
        cum += p;
        if lo.is_none() && cum > tail {
            lo = Some(control.momentum(i));
        }
        if hi.is_none() && before < total - tail && cum >= total - tail {
            hi = Some(control.momentum(i));
        }
    }
    let lo = lo.unwrap_or(0.0);
    let hi = hi.unwrap_or(lo);
    (lo - dilation, hi + dilation)
}

const PREDICT_POINTS: usize = 8;

/// Bulk window from the `k = 0` control run of `cfg`: free evolution leaves
/// the momentum distribution unchanged, so one kick suffices.
pub fn control_bulk_window(cfg: &ScanConfig, fraction: f64, dilation: f64) -> Result<(f64, f64)> {
    let tau = *cfg
        .tau_grid
        .first()
        .ok_or_else(|| QamError::InvalidInput("empty tau grid".into()))?;
    let control = ScanConfig {
        tau_grid: vec![tau],
        k: 0.0,
        n_kicks: 1,
        history: HistoryPolicy::None,
        ..cfg.clone()
    };
    let scan = scan_tau(&control)?;
    let d = BinnedDistribution {
        origin: scan.bin_lo,
        width: scan.bin_width,
        probs: scan.prob[0].clone(),
    };
    Ok(bulk_window_from_control(&d, fraction, dilation))
}

/// A maximum linked across kicks. Kicks are 1-based.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Track {
    pub kicks: Vec<usize>,
    pub centroids: Vec<f64>,
    pub masses: Vec<f64>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.kicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kicks.is_empty()
    }

    /// Extrapolation from a straight line through the last few centroids.
    fn predict(&self, kick: usize) -> f64 {
        let n = self.len();
        let from = n.saturating_sub(PREDICT_POINTS);
        let pts: Vec<(f64, f64)> = (from..n)
            .map(|i| (self.kicks[i] as f64, self.centroids[i]))
            .collect();
        if pts.len() < 3 {
            return self.centroids[n - 1];
        }
        let (slope, intercept, _) = linear_fit(&pts);
        slope * kick as f64 + intercept
    }

    pub fn mean_mass(&self) -> f64 {
        if self.masses.is_empty() {
            0.0
        } else {
            self.masses.iter().sum::<f64>() / self.masses.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub centroid: f64,
    pub mass: f64,
}

fn boxcar(p: &[f64], half: usize) -> Vec<f64> {
    if half == 0 {
        return p.to_vec();
    }
    let n = p.len();
    let width = (2 * half + 1) as f64;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n.saturating_sub(1));
            p[lo..=hi].iter().sum::<f64>() / width
        })
        .collect()
}

pub fn peaks_outside_bulk(d: &BinnedDistribution, cfg: &DetectorConfig) -> Vec<Peak> {
    let n = d.probs.len();
    // excess over a broad local mean; the diffusive bulk is smooth on that scale
    let excess: Vec<f64> = if cfg.background == 0 {
        d.probs.clone()
    } else {
        let bg = boxcar(&d.probs, cfg.background);
        d.probs.iter().zip(&bg).map(|(p, b)| p - b).collect()
    };
    let p = boxcar(&excess, cfg.smoothing);
    let half = (cfg.centroid_halfwidth / d.width).round().max(0.0) as usize;
    let mut out: Vec<Peak> = Vec::new();
    for i in 0..n {
        let left = if i > 0 { p[i - 1] } else { 0.0 };
        let right = if i + 1 < n { p[i + 1] } else { 0.0 };
        if !(p[i] >= left && p[i] > right && p[i] > 0.0) {
            continue;
        }
        let x = d.momentum(i);
        if x >= cfg.bulk_window.0 && x <= cfg.bulk_window.1 {
            continue;
        }
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let w: Vec<f64> = (lo..=hi).map(|k| excess[k].max(0.0)).collect();
        let mass: f64 = w.iter().sum();
        if mass < cfg.mass_threshold || mass <= 0.0 {
            continue;
        }
        let centroid = (lo..=hi).zip(&w).map(|(k, w)| d.momentum(k) * w).sum::<f64>() / mass;
        if centroid >= cfg.bulk_window.0 && centroid <= cfg.bulk_window.1 {
            continue;
        }
        match out.last_mut() {
            Some(prev) if (centroid - prev.centroid).abs() <= cfg.centroid_halfwidth => {
                if mass > prev.mass {
                    *prev = Peak { centroid, mass };
                }
            }
            _ => out.push(Peak { centroid, mass }),
        }
    }
    out
}

/// Running mean of `history` over `half` kicks on either side (truncated at
/// the ends), on a common bin range.
pub fn time_average(history: &[BinnedDistribution], half: usize) -> Vec<BinnedDistribution> {
    if half == 0 || history.is_empty() {
        return history.to_vec();
    }
    let n = history.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let w = 1.0 / (hi - lo + 1) as f64;
            let mut acc = BinnedDistribution::empty(history[i].width);
            for d in &history[lo..=hi] {
                acc.add(d, w);
            }
            acc
        })
        .collect()
}

/// Links maxima outside the bulk into tracks; returns those spanning at
/// least `min_fraction` of the kicks. `history[n]` is the distribution after
/// kick `n + 1`.
pub fn track_peaks(history: &[BinnedDistribution], cfg: &DetectorConfig) -> Result<Vec<Track>> {
    if history.len() < 20 {
        return Err(QamError::InvalidInput(format!(
            "peak tracking needs at least 20 kicks of history, got {}",
            history.len()
        )));
    }
    let averaged = time_average(history, cfg.time_smoothing);
    let mut active: Vec<Track> = Vec::new();
    let mut closed: Vec<Track> = Vec::new();
    for (n, d) in averaged.iter().enumerate() {
        let kick = n + 1;
        let peaks = peaks_outside_bulk(d, cfg);
        // greedy assignment by increasing distance; ties by index
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, t) in active.iter().enumerate() {
            let pred = t.predict(kick);
            for (pi, pk) in peaks.iter().enumerate() {
                let dist = (pk.centroid - pred).abs();
                if dist <= cfg.gate {
                    pairs.push((dist, ti, pi));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; active.len()];
        let mut peak_used = vec![false; peaks.len()];
        for (_, ti, pi) in pairs {
            if track_used[ti] || peak_used[pi] {
                continue;
            }
            track_used[ti] = true;
            peak_used[pi] = true;
            let t = &mut active[ti];
            t.kicks.push(kick);
            t.centroids.push(peaks[pi].centroid);
            t.masses.push(peaks[pi].mass);
        }
        for (pi, pk) in peaks.iter().enumerate() {
            if !peak_used[pi] {
                active.push(Track {
                    kicks: vec![kick],
                    centroids: vec![pk.centroid],
                    masses: vec![pk.mass],
                });
            }
        }
        let (keep, done): (Vec<Track>, Vec<Track>) = active
            .into_iter()
            .partition(|t| kick - t.kicks.last().copied().unwrap_or(kick) <= cfg.max_gap);
        active = keep;
        closed.extend(done);
    }
    closed.extend(active);
    let min_len = (cfg.min_fraction * history.len() as f64).ceil() as usize;
    let mut out: Vec<Track> = closed.into_iter().filter(|t| t.len() >= min_len).collect();
    out.sort_by(|a, b| a.kicks[0].cmp(&b.kicks[0]).then(a.centroids[0].total_cmp(&b.centroids[0])));
    Ok(out)
}

/// Slope and r2 of centroid against kick number, with kicks up to
/// `transient` discarded.
pub fn fit_acceleration(track: &Track, transient: usize) -> Result<(f64, f64)> {
    if track.len() < 10 {
        return Err(QamError::InvalidInput(format!(
            "acceleration fit needs a track of length >= 10, got {}",
            track.len()
        )));
    }
    let pts: Vec<(f64, f64)> = track
        .kicks
        .iter()
        .zip(&track.centroids)
        .filter(|(k, _)| **k > transient)
        .map(|(&k, &c)| (k as f64, c))
        .collect();
    let (a, _, r2) = linear_fit(&pts);
    Ok((a, r2))
}

/// The catalog orbit a detection was attributed to.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitMatch {
    pub res_p: i64,
    pub res_q: i64,
    pub jump_j: i64,
    pub period_p: usize,
    pub period_t: usize,
    pub d_list: String,
    pub epsilon: f64,
    pub a_predicted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QamDetection {
    pub tau: f64,
    pub fitted_a: f64,
    pub fit_r2: f64,
    pub peak_mass: f64,
    pub track: Vec<(usize, f64)>,
    pub matched_orbit: Option<OrbitMatch>,
    pub relative_error: Option<f64>,
}

/// Tracks and fits every accelerated structure in one tau column.
pub fn detect_column(tau: f64, history: &[BinnedDistribution], cfg: &DetectorConfig) -> Result<Vec<QamDetection>> {
    let tracks = track_peaks(history, cfg)?;
    let mut out = Vec::new();
    for t in tracks {
        let (a, r2) = fit_acceleration(&t, cfg.transient)?;
        out.push(QamDetection {
            tau,
            fitted_a: a,
            fit_r2: r2,
            peak_mass: t.mean_mass(),
            track: t.kicks.iter().copied().zip(t.centroids.iter().copied()).collect(),
            matched_orbit: None,
            relative_error: None,
        });
    }
    Ok(out)
}

/// Runs [`detect_column`] on every column of `scan` that carries a history.
/// Columns are processed in parallel; output is ordered by tau.
pub fn detect_scan(scan: &MomentumScan, cfg: &DetectorConfig) -> Result<Vec<QamDetection>> {
    let per_column: Vec<Vec<QamDetection>> = scan
        .history
        .par_iter()
        .map(|(i, h)| detect_column(scan.tau_grid[*i], h, cfg))
        .collect::<Result<_>>()?;
    Ok(per_column.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchTolerances {
    pub relative: f64,
    pub a_floor: f64,
    /// Detections with a worse linear fit are left unmatched.
    pub min_r2: f64,
}

impl Default for MatchTolerances {
    fn default() -> Self {
        Self {
            relative: 0.15,
            a_floor: 0.05,
            min_r2: 0.9,
        }
    }
}

pub fn relative_error(fitted: f64, predicted: f64, a_floor: f64) -> f64 {
    (fitted - predicted).abs() / predicted.abs().max(a_floor)
}

/// Attributes each detection to the stable catalog orbit with the smallest
/// relative acceleration error (ties: smaller `|epsilon|`), if within
/// tolerance. Unmatched detections keep `matched_orbit = None`.
pub fn match_predictions(detections: &mut [QamDetection], catalog: &[CatalogEntry], tol: &MatchTolerances) {
    for det in detections.iter_mut() {
        det.matched_orbit = None;
        det.relative_error = None;
        if det.fit_r2 < tol.min_r2 {
            continue;
        }
        let best = catalog
            .iter()
            .filter(|e| e.orbit.stable())
            .map(|e| (relative_error(det.fitted_a, e.a_predicted, tol.a_floor), e))
            .filter(|(r, _)| *r <= tol.relative)
            .min_by(|(r1, e1), (r2, e2)| {
                r1.total_cmp(r2).then(e1.epsilon.abs().total_cmp(&e2.epsilon.abs()))
            });
        if let Some((r, e)) = best {
            det.relative_error = Some(r);
            det.matched_orbit = Some(OrbitMatch {
                res_p: e.res_p,
                res_q: e.res_q,
                jump_j: e.orbit.jump_j,
                period_p: e.orbit.period_p,
                period_t: e.orbit.spec.period(),
                d_list: e.orbit.spec.deltas.d_list(),
                epsilon: e.epsilon,
                a_predicted: e.a_predicted,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epsmaps::{DeltaSequence, PhasePoint, TorusMapSpec};
    use crate::orbits::{PeriodicOrbit, Stability};

    fn moving_delta(n_kicks: usize, a: f64) -> Vec<BinnedDistribution> {
        // unit mass split between two bins so the centroid is exactly x
        (1..=n_kicks)
            .map(|k| {
                let x = 20.0 + a * k as f64;
                let b = x.floor();
                let f = x - b;
                let mut d = BinnedDistribution {
                    origin: -10,
                    width: 1.0,
                    probs: vec![0.0; 400],
                };
                d.probs[5] = 0.5;
                d.probs[10] = 0.5;
                let i = (b as i64 + 10) as usize;
                d.probs[i] = 0.3 * (1.0 - f);
                d.probs[i + 1] = 0.3 * f;
                let s: f64 = d.probs.iter().sum();
                d.probs.iter_mut().for_each(|p| *p /= s);
                d
            })
            .collect()
    }

    #[test]
    fn linear_fit_exact() {
        let pts: Vec<(f64, f64)> = (0..30).map(|i| (i as f64, 0.37 * i as f64 - 2.0)).collect();
        let (a, b, r2) = linear_fit(&pts);
        assert!((a - 0.37).abs() < 1e-12 && (b + 2.0).abs() < 1e-10 && (r2 - 1.0).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = (0..30).map(|i| (i as f64, 3.0)).collect();
        assert_eq!(linear_fit(&flat), (0.0, 3.0, 0.0));
    }

    #[test]
    fn synthetic_moving_peak() {
        let a = 0.83;
        let hist = moving_delta(60, a);
        let raw = DetectorConfig {
            bulk_window: (-12.0, 6.0),
            gate: 3.0,
            smoothing: 0,
            time_smoothing: 0,
            background: 0,
            ..Default::default()
        };
        let dets = detect_column(1.0, &hist, &raw).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].fitted_a - a).abs() < 1e-9, "{}", dets[0].fitted_a);

        let smoothed = DetectorConfig {
            bulk_window: (-12.0, 6.0),
            gate: 3.0,
            ..Default::default()
        };
        let dets = detect_column(1.0, &hist, &smoothed).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].fitted_a - a).abs() < 0.01 * a, "{}", dets[0].fitted_a);
    }

    #[test]
    fn short_history_rejected() {
        let hist = moving_delta(10, 0.5);
        assert!(track_peaks(&hist, &DetectorConfig::default()).is_err());
    }

    #[test]
    fn short_track_fit_rejected() {
        let t = Track {
            kicks: vec![1, 2, 3],
            centroids: vec![0.0, 1.0, 2.0],
            masses: vec![0.1; 3],
        };
        assert!(fit_acceleration(&t, 0).is_err());
    }

    #[test]
    fn bulk_window_of_gaussian() {
        let probs: Vec<f64> = (-30..=30)
            .map(|m| (-(m as f64).powi(2) / (2.0 * 2.5 * 2.5)).exp())
            .collect();
        let s: f64 = probs.iter().sum();
        let d = BinnedDistribution {
            origin: -30,
            width: 1.0,
            probs: probs.iter().map(|p| p / s).collect(),
        };
        let (lo, hi) = bulk_window_from_control(&d, 0.9, 2.0);
        assert_eq!((lo, hi), (-6.0, 6.0));
    }

    fn entry(a: f64, eps: f64, stable: bool) -> CatalogEntry {
        let spec = TorusMapSpec::new(0.1, 1.0, DeltaSequence::constant_zero(1)).unwrap();
        CatalogEntry {
            res_p: 1,
            res_q: 2,
            epsilon: eps,
            orbit: PeriodicOrbit {
                spec,
                period_p: 1,
                jump_j: 0,
                points: vec![PhasePoint::new(0.0, 0.0)],
                theta_winding: 0,
                tangent: [[1.0, 0.0], [0.0, 1.0]],
                trace: if stable { 1.0 } else { 3.0 },
                residue: 0.0,
                stability: if stable { Stability::Elliptic } else { Stability::Hyperbolic },
            },
            a_predicted: a,
        }
    }

    fn det(a: f64) -> QamDetection {
        QamDetection {
            tau: 3.0,
            fitted_a: a,
            fit_r2: 0.99,
            peak_mass: 0.1,
            track: vec![],
            matched_orbit: None,
            relative_error: None,
        }
    }

    #[test]
    fn exact_match_and_tie_break() {
        let cat = vec![entry(0.5, 0.05, true), entry(-0.5, 0.01, true), entry(0.5, 0.01, true)];
        let mut d = vec![det(0.5)];
        match_predictions(&mut d, &cat, &MatchTolerances::default());
        assert_eq!(d[0].relative_error, Some(0.0));
        assert_eq!(d[0].matched_orbit.as_ref().unwrap().epsilon, 0.01);
    }

    #[test]
    fn unmatched_cases() {
        let mut d = vec![det(0.5)];
        match_predictions(&mut d, &[], &MatchTolerances::default());
        assert!(d[0].matched_orbit.is_none());
        // unstable orbits never match
        match_predictions(&mut d, &[entry(0.5, 0.01, false)], &MatchTolerances::default());
        assert!(d[0].matched_orbit.is_none());
        let mut low = vec![QamDetection { fit_r2: 0.3, ..det(0.5) }];
        match_predictions(&mut low, &[entry(0.5, 0.01, true)], &MatchTolerances::default());
        assert!(low[0].matched_orbit.is_none());
    }

    #[test]
    fn a_floor_normalization() {
        assert!((relative_error(0.01, 0.0, 0.05) - 0.2).abs() < 1e-15);
        assert!((relative_error(1.1, 1.0, 0.05) - 0.1).abs() < 1e-12);
    }
}
