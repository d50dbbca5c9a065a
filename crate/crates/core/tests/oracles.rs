use std::f64::consts::PI;

use qam::epsmaps::{enumerate_delta_sequences, period_map, torus_distance, DeltaSequence, PhasePoint, TorusMapSpec};
use qam::orbits::{acceleration, find_periodic_orbits, OrbitSearch};
use qam::resonance::{closest_resonance, nearest_resonances};

fn half_integer_spec(x: f64) -> (TorusMapSpec, f64) {
    let tau = 2.0 * PI * x;
    let eps = tau - PI;
    let spec = TorusMapSpec::new(0.8 * PI * eps, 0.126 * tau * tau, DeltaSequence::new(2, vec![0]).unwrap()).unwrap();
    (spec, eps)
}

#[test]
fn detunings_quoted_for_portraits() {
    let list = nearest_resonances(2.0 * PI * 0.541, 13, None).unwrap();
    let (s, eps) = &list[0];
    assert_eq!((s.p, s.q), (7, 13));
    assert!((eps - 0.016).abs() < 5e-4);

    let (s, eps) = closest_resonance(2.0 * PI * 0.475, 2).unwrap();
    assert_eq!((s.p, s.q), (1, 2));
    assert!((eps + 0.157).abs() < 5e-4);
}

#[test]
fn delta_sequences_of_the_two_families() {
    let q13 = enumerate_delta_sequences(13, 1, 10..=10).unwrap();
    assert_eq!(q13.len(), 1);
    assert_eq!(q13[0].d, vec![10]);
    assert!((q13[0].mean_delta() - 20.0 * PI / 13.0).abs() < 1e-15);

    let alt = enumerate_delta_sequences(2, 2, 0..=0).unwrap();
    let s = alt.iter().find(|s| s.d.iter().any(|&d| d != 0)).expect("alternating sequence");
    assert_eq!(s.d, vec![-1, 1]);
    assert!((s.delta(0) + PI).abs() < 1e-15 && (s.delta(1) - PI).abs() < 1e-15);
    assert_eq!(s.sum_d(), 0);
}

#[test]
fn period_three_island_chain_for_alternating_deltas() {
    let spec = TorusMapSpec::new(-0.395, 1.122, DeltaSequence::new(2, vec![-1, 1]).unwrap()).unwrap();
    let orbits = find_periodic_orbits(&spec, 3, 1, &OrbitSearch::default()).unwrap();
    assert!(orbits.iter().any(|o| o.stable()), "{} orbits, none stable", orbits.len());
}

#[test]
fn period_five_island_is_bounded() {
    let spec = TorusMapSpec::new(0.032, 1.253, DeltaSequence::new(1, vec![0]).unwrap()).unwrap();
    let orbits = find_periodic_orbits(&spec, 5, 1, &OrbitSearch::default()).unwrap();
    let o = orbits.iter().find(|o| o.stable()).expect("stable period-5 orbit");
    let start = PhasePoint::new(o.points[0].theta + 0.05, o.points[0].j);
    let mut y = start;
    let mut worst = 0.0_f64;
    for _ in 0..2000 {
        for _ in 0..5 {
            y = period_map(y, &spec, 0);
        }
        worst = worst.max(torus_distance(y, o.points[0]));
    }
    assert!(worst < 0.5, "left the island: {worst}");
}

#[test]
fn stable_period_five_near_half_integer_resonance() {
    let (spec, _) = half_integer_spec(0.502);
    let orbits = find_periodic_orbits(&spec, 5, 1, &OrbitSearch::default()).unwrap();
    assert!(orbits.iter().any(|o| o.stable()));
}

/// `(2 pi j / (p T) - Delta - tau eta) / eps` worked by hand for the values
/// used in the scans.
#[test]
fn accelerations_by_hand() {
    // q = 2, T = 1, p = 5, j = 1, Delta = 0
    let a_half = |x: f64| {
        let tau = 2.0 * PI * x;
        acceleration(1, 5, 1, 0.0, 0.126 * tau * tau, tau - PI).unwrap().a
    };
    assert!((a_half(0.51) + 0.5926).abs() < 2e-3);
    // the root sits between 0.5026 and 0.5027
    assert!(a_half(0.5026) > 0.0 && a_half(0.5027) < 0.0);
    // q = 13, T = 1, p = 1, j = 1, Delta = 20 pi / 13
    for (x, expected) in [(0.541, -0.3707), (0.542, -0.5082), (0.543, -0.5854)] {
        let tau = 2.0 * PI * x;
        let eps = tau - 14.0 * PI / 13.0;
        let a = acceleration(1, 1, 1, 20.0 * PI / 13.0, 0.126 * tau * tau, eps).unwrap().a;
        assert!((a - expected).abs() < 1e-3, "x={x}: {a}");
    }
}

#[test]
fn fixed_point_sine_for_q13_island() {
    let spec = TorusMapSpec::new(0.040, 1.455, DeltaSequence::new(13, vec![10]).unwrap()).unwrap();
    let orbits = find_periodic_orbits(&spec, 1, 1, &OrbitSearch::default()).unwrap();
    let stable = orbits.iter().find(|o| o.stable()).unwrap();
    assert!((stable.points[0].theta.sin() + 0.1257).abs() < 2e-4);
    assert!(stable.residue > 0.0 && stable.residue < 1.0);
}
