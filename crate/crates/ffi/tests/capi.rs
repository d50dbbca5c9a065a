use std::f64::consts::PI;
use std::ffi::CStr;
use std::path::Path;
use std::process::Command;
use std::ptr;

use qam_ffi::*;

#[test]
fn gauss_modulus_through_abi() {
    let (mut re, mut im) = ([0.0; 13], [0.0; 13]);
    // beta_r = 1/2 is resonant for 7/13
    let s = unsafe { qam_gauss_coefficients(7, 13, 1, 2, re.as_mut_ptr(), im.as_mut_ptr(), 13) };
    assert_eq!(s, QamStatus::Ok);
    for (a, b) in re.iter().zip(&im) {
        assert!(((a * a + b * b).sqrt() - 13f64.powf(-0.5)).abs() < 1e-12);
    }
}

#[test]
fn error_codes_and_message() {
    let (mut re, mut im) = ([0.0; 4], [0.0; 4]);
    let s = unsafe { qam_gauss_coefficients(2, 4, 0, 1, re.as_mut_ptr(), im.as_mut_ptr(), 4) };
    assert_eq!(s, QamStatus::NotCoprime);
    let msg = unsafe { CStr::from_ptr(qam_last_error()) }.to_str().unwrap();
    assert!(msg.contains("coprime"), "{msg}");

    let s = unsafe { qam_gauss_coefficients(1, 2, 1, 3, re.as_mut_ptr(), im.as_mut_ptr(), 4) };
    assert_eq!(s, QamStatus::NotResonant);

    let s = unsafe { qam_gauss_coefficients(1, 3, 1, 2, re.as_mut_ptr(), im.as_mut_ptr(), 2) };
    assert_eq!(s, QamStatus::BufferTooSmall);

    let s = unsafe { qam_gauss_coefficients(1, 2, 0, 1, ptr::null_mut(), im.as_mut_ptr(), 4) };
    assert_eq!(s, QamStatus::NullPointer);
}

#[test]
fn rotor_ballistic_growth() {
    let k = 0.8 * PI;
    let mut rotor = ptr::null_mut();
    unsafe {
        assert_eq!(qam_rotor_new(0, 0.0, k, &mut rotor), QamStatus::Ok);
        assert_eq!(qam_rotor_evolve(rotor, k, 4.0 * PI, 0.0, 0, 10), QamStatus::Ok);
        let mut m2 = 0.0;
        assert_eq!(qam_rotor_second_moment(rotor, &mut m2), QamStatus::Ok);
        assert!((m2 / 2.0 - (10.0 * k).powi(2) / 4.0).abs() < 1e-9 * m2);

        let (mut m_min, mut len) = (0_i64, 0_usize);
        assert_eq!(qam_rotor_window(rotor, &mut m_min, &mut len), QamStatus::Ok);
        let mut probs = vec![0.0; len];
        assert_eq!(qam_rotor_probabilities(rotor, probs.as_mut_ptr(), len), QamStatus::Ok);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(qam_rotor_probabilities(rotor, probs.as_mut_ptr(), 0), QamStatus::BufferTooSmall);
        qam_rotor_free(rotor);
    }
}

#[test]
fn map_and_catalog() {
    let d = [10_i64];
    let mut map = ptr::null_mut();
    unsafe {
        assert_eq!(qam_map_new(0.040, 1.455, 13, d.as_ptr(), 1, &mut map), QamStatus::Ok);
        let mut cat = ptr::null_mut();
        assert_eq!(qam_catalog_new(map, 1, 1, 0.0222, 32, &mut cat), QamStatus::Ok);
        let n = qam_catalog_len(cat);
        assert_eq!(n, 2);
        let mut stable = 0;
        for i in 0..n {
            let mut row = QamOrbit::default();
            assert_eq!(qam_catalog_get(cat, i, &mut row), QamStatus::Ok);
            assert!(row.a_predicted.is_finite());
            let (mut th, mut j) = (row.theta0, row.j0);
            assert_eq!(qam_map_apply(map, 0, &mut th, &mut j), QamStatus::Ok);
            let dist = (th - row.theta0).sin().abs() + (j - row.j0).sin().abs();
            assert!(dist < 1e-9);
            if row.stable {
                stable += 1;
                assert!(row.residue > 0.0 && row.residue < 1.0);
            }
        }
        assert_eq!(stable, 1);
        let mut row = QamOrbit::default();
        assert_eq!(qam_catalog_get(cat, n, &mut row), QamStatus::InvalidInput);
        qam_catalog_free(cat);
        qam_map_free(map);
        assert_eq!(qam_catalog_len(ptr::null()), 0);
        qam_map_free(ptr::null_mut());
    }
}

#[test]
fn bad_map_is_rejected() {
    let d = [1_i64];
    let mut map = ptr::null_mut();
    let s = unsafe { qam_map_new(0.1, 0.0, 0, d.as_ptr(), 1, &mut map) };
    assert_eq!(s, QamStatus::InvalidInput);
    assert!(map.is_null());
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/qam.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["qam_rotor_new", "qam_catalog_get", "QAM_STATUS_NOT_COPRIME", "QamOrbit"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-std=c99"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler, skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
