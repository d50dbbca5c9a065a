//! CSV output shared by the command-line tool and the tests.
//!
//! Every file starts with `# key=value` comment lines, then a header row.
//! Floats are written with 17 significant digits, `,` separated, LF endings.

use std::io::Write;

use crate::detect::QamDetection;
use crate::epsmaps::PhasePoint;
use crate::error::Result;
use crate::orbits::CatalogEntry;
use crate::quantum::{BinnedDistribution, MomentumScan};

pub const TOOL_VERSION: &str = concat!("qam ", env!("CARGO_PKG_VERSION"));

/// 17 significant digits, round-trippable.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        // normalizes -0
        return "0.0000000000000000e0".to_string();
    }
    format!("{x:.16e}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub struct CsvWriter<W: Write> {
    out: W,
}

impl<W: Write> CsvWriter<W> {
    /// Writes the config echo (plus tool version) and the header row.
    pub fn new(mut out: W, echo: &[(String, String)], header: &[&str]) -> Result<Self> {
        writeln!(out, "# tool={TOOL_VERSION}")?;
        for (k, v) in echo {
            writeln!(out, "# {k}={v}")?;
        }
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn comment(&mut self, key: &str, value: &str) -> Result<()> {
        writeln!(self.out, "# {key}={value}")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

fn tau_over_2pi(tau: f64) -> f64 {
    tau / (2.0 * std::f64::consts::PI)
}

/// `tau_over_2pi,momentum,probability`, one row per tau and bin.
pub fn write_scan<W: Write>(out: W, echo: &[(String, String)], scan: &MomentumScan) -> Result<W> {
    let mut w = CsvWriter::new(out, echo, &["tau_over_2pi", "momentum", "probability"])?;
    let grid = scan.momentum_grid();
    for (tau, col) in scan.tau_grid.iter().zip(&scan.prob) {
        let t = fmt_f64(tau_over_2pi(*tau));
        for (m, p) in grid.iter().zip(col) {
            w.row(&[t.clone(), fmt_f64(*m), fmt_f64(*p)])?;
        }
    }
    w.finish()
}

/// Same layout as [`write_scan`] with each column divided by its maximum.
pub fn write_heatmap<W: Write>(out: W, echo: &[(String, String)], scan: &MomentumScan) -> Result<W> {
    let mut w = CsvWriter::new(out, echo, &["tau_over_2pi", "momentum", "normalized_probability"])?;
    let grid = scan.momentum_grid();
    for (tau, col) in scan.tau_grid.iter().zip(&scan.prob) {
        let t = fmt_f64(tau_over_2pi(*tau));
        let max = col.iter().cloned().fold(0.0, f64::max);
        for (m, p) in grid.iter().zip(col) {
            let v = if max > 0.0 { p / max } else { 0.0 };
            w.row(&[t.clone(), fmt_f64(*m), fmt_f64(v)])?;
        }
    }
    w.finish()
}

/// `kick,momentum,probability` for one tau column.
pub fn write_history<W: Write>(out: W, echo: &[(String, String)], history: &[BinnedDistribution]) -> Result<W> {
    let mut w = CsvWriter::new(out, echo, &["kick", "momentum", "probability"])?;
    for (n, d) in history.iter().enumerate() {
        for (i, p) in d.probs.iter().enumerate() {
            w.row(&[(n + 1).to_string(), fmt_f64(d.momentum(i)), fmt_f64(*p)])?;
        }
    }
    w.finish()
}

/// `seed_index,iter,theta,J`.
pub fn write_portrait<W: Write>(out: W, echo: &[(String, String)], orbits: &[Vec<PhasePoint>]) -> Result<W> {
    let mut w = CsvWriter::new(out, echo, &["seed_index", "iter", "theta", "J"])?;
    for (s, orbit) in orbits.iter().enumerate() {
        for (i, p) in orbit.iter().enumerate() {
            w.row(&[s.to_string(), (i + 1).to_string(), fmt_f64(p.theta), fmt_f64(p.j)])?;
        }
    }
    w.finish()
}

pub const CATALOG_HEADER: [&str; 14] = [
    "q", "T", "d_list", "k_tilde", "drift", "p", "j", "theta0", "J0", "trace", "residue", "stable",
    "a_predicted", "epsilon",
];

pub fn write_catalog<W: Write>(out: W, echo: &[(String, String)], catalog: &[CatalogEntry]) -> Result<W> {
    let mut w = CsvWriter::new(out, echo, &CATALOG_HEADER)?;
    for e in catalog {
        let o = &e.orbit;
        w.row(&[
            o.spec.deltas.q.to_string(),
            o.spec.period().to_string(),
            o.spec.deltas.d_list(),
            fmt_f64(o.spec.k_tilde),
            fmt_f64(o.spec.drift),
            o.period_p.to_string(),
            o.jump_j.to_string(),
            fmt_f64(o.points[0].theta),
            fmt_f64(o.points[0].j),
            fmt_f64(o.trace),
            fmt_f64(o.residue),
            o.stable().to_string(),
            fmt_f64(e.a_predicted),
            fmt_f64(e.epsilon),
        ])?;
    }
    w.finish()
}

pub const DETECTION_HEADER: [&str; 10] = [
    "tau_over_2pi", "fitted_a", "r2", "peak_mass", "matched_q", "matched_p", "matched_j",
    "matched_pp", "a_predicted", "relative_error",
];

pub fn write_detections<W: Write>(out: W, echo: &[(String, String)], dets: &[QamDetection]) -> Result<W> {
    let mut w = CsvWriter::new(out, echo, &DETECTION_HEADER)?;
    for d in dets {
        let m = d.matched_orbit.as_ref();
        w.row(&[
            fmt_f64(tau_over_2pi(d.tau)),
            fmt_f64(d.fitted_a),
            fmt_f64(d.fit_r2),
            fmt_f64(d.peak_mass),
            m.map(|m| m.res_q.to_string()).unwrap_or_default(),
            m.map(|m| m.res_p.to_string()).unwrap_or_default(),
            m.map(|m| m.jump_j.to_string()).unwrap_or_default(),
            m.map(|m| m.period_p.to_string()).unwrap_or_default(),
            fmt_opt(m.map(|m| m.a_predicted)),
            fmt_opt(d.relative_error),
        ])?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_has_17_digits_and_round_trips() {
        for x in [0.1, -1.0 / 3.0, 6.02214076e23, 1e-300, -0.0] {
            let s = fmt_f64(x);
            let digits: String = s.split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).collect();
            assert_eq!(digits.len(), 17, "{s}");
            assert_eq!(s.parse::<f64>().unwrap(), if x == 0.0 { 0.0 } else { x });
        }
    }

    #[test]
    fn header_and_echo() {
        let echo = vec![("k".to_string(), "2.5".to_string())];
        let w = CsvWriter::new(Vec::new(), &echo, &["a", "b"]).unwrap();
        let bytes = w.finish().unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text, format!("# tool={TOOL_VERSION}\n# k=2.5\na,b\n"));
    }
}
