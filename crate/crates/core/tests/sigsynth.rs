use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use rfssl::sigsynth::{
    gen_baseband, phase_difference_aoa, steering_vector, synthesize_recording, ArrayGeometry, DatasetGrid, Modulation,
    SynthConfig,
};

fn config(modulation: Modulation, az: f64, el: f64, snr_db: f64, len: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        modulation,
        azimuth_deg: az,
        elevation_deg: el,
        snr_db,
        samples_per_symbol: 8,
        phase_noise_std_rad: 0.0,
        recording_len: len,
        seed,
    }
}

fn c64(c: num_complex::Complex32) -> Complex64 {
    Complex64::new(c.re as f64, c.im as f64)
}

#[test]
fn snr_zero_db_matches_measured_power_ratio() {
    let geom = ArrayGeometry::default();
    // 4 antennas × 250 000 samples = 10⁶ noisy samples.
    let noisy = synthesize_recording(&config(Modulation::Qpsk, 20.0, -10.0, 0.0, 250_000, 7), &geom).unwrap();
    let clean = synthesize_recording(&config(Modulation::Qpsk, 20.0, -10.0, f64::INFINITY, 250_000, 7), &geom).unwrap();
    let (mut ps, mut pn) = (0.0, 0.0);
    for (a, b) in noisy.iq.data().iter().zip(clean.iq.data()) {
        ps += c64(*b).norm_sqr();
        pn += (c64(*a) - c64(*b)).norm_sqr();
    }
    let ratio_db = 10.0 * (ps / pn).log10();
    assert!(ratio_db.abs() < 0.5, "measured SNR {ratio_db:.3} dB");
}

#[test]
fn half_wavelength_pair_at_thirty_degrees() {
    let a = steering_vector(&ArrayGeometry::line(2, 0.5), 30.0, 0.0).unwrap();
    let dphi = (a[1] * a[0].conj()).arg();
    assert!((dphi - PI * 30f64.to_radians().sin()).abs() < 1e-12);
    assert!((dphi - PI / 2.0).abs() < 1e-12);
}

#[test]
fn noiseless_rows_are_scaled_copies_of_the_source() {
    let geom = ArrayGeometry::default();
    let rec = synthesize_recording(&config(Modulation::Qam16, -35.0, 50.0, f64::INFINITY, 4096, 3), &geom).unwrap();
    let a = steering_vector(&geom, -35.0, 50.0).unwrap();
    let s: Vec<Complex64> = rec.iq.row(0).iter().map(|&x| c64(x) / a[0]).collect();
    for i in 0..geom.n_rx {
        for (t, &x) in rec.iq.row(i).iter().enumerate() {
            assert!((c64(x) - a[i] * s[t]).norm() < 1e-5, "row {i} sample {t}");
        }
    }
}

#[test]
fn noiseless_recordings_give_back_their_angles() {
    let geom = ArrayGeometry::default();
    for &az in &DatasetGrid::even_angles(5) {
        for &el in &DatasetGrid::even_angles(5) {
            let rec = synthesize_recording(&config(Modulation::Bpsk, az, el, f64::INFINITY, 2048, 11), &geom).unwrap();
            let (az_hat, el_hat) = phase_difference_aoa(&rec.iq, &geom).unwrap();
            assert!(
                (az_hat - az).abs() < 1.0 && (el_hat - el).abs() < 1.0,
                "({az}, {el}) -> ({az_hat}, {el_hat})"
            );
        }
    }
}

#[test]
fn same_seed_same_recording() {
    let geom = ArrayGeometry::default();
    let mut cfg = config(Modulation::Pam4, 10.0, 5.0, 8.0, 3000, 99);
    cfg.phase_noise_std_rad = 0.05;
    let a = synthesize_recording(&cfg, &geom).unwrap();
    assert_eq!(a, synthesize_recording(&cfg, &geom).unwrap());
    cfg.seed += 1;
    assert_ne!(a, synthesize_recording(&cfg, &geom).unwrap());
}

#[test]
fn baseband_power_is_normalized() {
    for i in 0..6 {
        let m = Modulation::from_index(i).unwrap();
        let s = gen_baseband(m, 10_000, 8, 5).unwrap();
        let p = s.iter().map(|c| c.norm_sqr()).sum::<f64>() / s.len() as f64;
        assert!((p - 1.0).abs() < 0.02, "{} power {p}", m.name());
    }
}

proptest! {
    #[test]
    fn steering_entries_have_unit_magnitude(az in -70.0..70.0f64, el in -70.0..70.0f64) {
        for a in steering_vector(&ArrayGeometry::default(), az, el).unwrap() {
            prop_assert!((a.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_angles_are_rejected(az in 70.001..180.0f64) {
        let cfg = config(Modulation::Bpsk, az, 0.0, 10.0, 1024, 0);
        prop_assert!(synthesize_recording(&cfg, &ArrayGeometry::default()).is_err());
    }
}
