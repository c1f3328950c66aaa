use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfssl::augment::{dropout_gates, make_view, make_views, zero_mask, AugmentConfig, Augmentation};
use rfssl::datastore::{slice_frames, IQFrame};
use rfssl::sigsynth::{phase_difference_aoa, synthesize_recording, ArrayGeometry, Modulation, SynthConfig};
use rfssl::FRAME_LEN;

fn noiseless_frame(modulation: Modulation, az: f64, el: f64, seed: u64) -> IQFrame {
    let cfg = SynthConfig {
        modulation,
        azimuth_deg: az,
        elevation_deg: el,
        snr_db: f64::INFINITY,
        samples_per_symbol: 8,
        phase_noise_std_rad: 0.0,
        recording_len: FRAME_LEN,
        seed,
    };
    let rec = synthesize_recording(&cfg, &ArrayGeometry::default()).unwrap();
    slice_frames(&rec, 0, FRAME_LEN).remove(0)
}

fn energy(f: &IQFrame) -> f64 {
    f.iq.data().iter().map(|c| c.norm_sqr() as f64).sum()
}

#[test]
fn per_row_drop_rate_before_rescue() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials = 100_000;
    let mut drops = [0usize; 4];
    for _ in 0..trials {
        let g = dropout_gates(4, 0.2, &mut rng);
        for (d, &x) in drops.iter_mut().zip(&g.dropped) {
            *d += x as usize;
        }
        assert!(g.kept.iter().any(|&k| k));
    }
    for d in drops {
        let f = d as f64 / trials as f64;
        assert!((f - 0.2).abs() < 0.01, "drop frequency {f}");
    }
}

#[test]
fn surviving_energy_matches_keep_rate() {
    let frame = noiseless_frame(Modulation::Qpsk, 0.0, 0.0, 2);
    let total = energy(&frame);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trials = 10_000;
    let kept: f64 = (0..trials)
        .map(|_| energy(&zero_mask(&frame, 0.2, 64, &mut rng)) / total)
        .sum::<f64>()
        / trials as f64;
    assert!((kept - 0.8).abs() < 0.02 * 0.8, "kept fraction {kept}");
}

#[test]
fn masked_views_keep_the_angle() {
    let geom = ArrayGeometry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (i, &(az, el)) in [(-60.0, 10.0), (0.0, 0.0), (25.0, -40.0), (70.0, 70.0)]
        .iter()
        .enumerate()
    {
        let frame = noiseless_frame(Modulation::Qam16, az, el, i as u64);
        let (a0, e0) = phase_difference_aoa(&frame.iq, &geom).unwrap();
        for _ in 0..20 {
            let v = zero_mask(&frame, 0.2, 64, &mut rng);
            if energy(&v) == 0.0 {
                continue;
            }
            let (a1, e1) = phase_difference_aoa(&v.iq, &geom).unwrap();
            assert!((a1 - a0).abs() < 1.0 && (e1 - e0).abs() < 1.0);
        }
    }
}

#[test]
fn same_seed_gives_identical_views() {
    let frame = noiseless_frame(Modulation::Bpsk, 10.0, 10.0, 4);
    let cfg = AugmentConfig::default();
    let a = make_view(&frame, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
    let b = make_view(&frame, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
}

#[test]
fn ablation_configs_touch_only_their_axis() {
    let frame = noiseless_frame(Modulation::Qam64, -20.0, 30.0, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let only_drop = AugmentConfig::only(Augmentation::AntennaDropout);
    let only_mask = AugmentConfig::only(Augmentation::ZeroMask);
    for _ in 0..200 {
        // Dropout zeroes whole rows; masking zeroes whole columns.
        let v = make_view(&frame, &only_drop, &mut rng);
        for r in 0..v.iq.rows() {
            let z = v.iq.row(r).iter().filter(|c| c.norm_sqr() == 0.0).count();
            assert!(z == 0 || z == FRAME_LEN);
        }
        let v = make_view(&frame, &only_mask, &mut rng);
        for t in 0..FRAME_LEN {
            let z = (0..v.iq.rows()).filter(|&r| v.iq.row(r)[t].norm_sqr() == 0.0).count();
            assert!(z == 0 || z == v.iq.rows());
        }
    }
}

proptest! {
    #[test]
    fn views_preserve_labels_and_shape(
        seed in any::<u64>(),
        p1 in 0.0..=1.0f64,
        p2 in 0.0..=1.0f64,
        block in 1usize..=FRAME_LEN,
    ) {
        let frame = noiseless_frame(Modulation::Pam4, 15.0, -5.0, seed % 7);
        let cfg = AugmentConfig { p_antenna_dropout: p1, p_zero_mask: p2, mask_block_len: block, ..AugmentConfig::default() };
        let (a, b) = make_views(&frame, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        for v in [&a, &b] {
            prop_assert_eq!(&v.labels, &frame.labels);
            prop_assert_eq!(v.iq.shape(), frame.iq.shape());
            // Every sample is either untouched or zeroed.
            for (x, y) in v.iq.data().iter().zip(frame.iq.data()) {
                prop_assert!(*x == *y || x.norm_sqr() == 0.0);
            }
            // At least one antenna row survives dropout.
            let live_rows = (0..v.iq.rows()).filter(|&r| v.iq.row(r).iter().any(|c| c.norm_sqr() > 0.0)).count();
            prop_assert!(live_rows >= 1 || p2 > 0.0);
        }
    }
}
