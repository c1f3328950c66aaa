mod common;

use common::Toy;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfssl::ssl::{contrastive_loss_value, ema_update, momentum_schedule, tau_schedule, TauRule};
use rfssl_numerics::{Module, Param, ScheduleConfig, Tensor};

#[test]
fn symmetric_loss_gradients_over_ten_seeds() {
    for seed in 0..10 {
        let r = common::symmetric_loss_gradcheck(seed, 4, 24, 1e-5);
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
        assert!(r.checked >= 24, "seed {seed}: {r:?}");
    }
}

#[test]
fn loss_oracles() {
    let one = Tensor::new(vec![1, 3], vec![0.6, 0.0, 0.8]).unwrap();
    assert_eq!(contrastive_loss_value(&one, &one, 0.2).unwrap(), 0.0);

    for (b, tau) in [(2usize, 0.2), (5, 0.1), (16, 0.7)] {
        let rows = Tensor::from_fn(vec![b, 4], |i| [0.5, -0.5, 0.5, 0.5][i % 4]);
        let l = contrastive_loss_value(&rows, &rows, tau).unwrap();
        assert!((l - (b as f64).ln() * 2.0 * tau).abs() < 1e-9, "B={b}: {l}");
    }

    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let l = contrastive_loss_value(&eye, &eye, 0.2).unwrap();
    // 2τ·ln(1 + e^{-1/τ}) at τ = 0.2.
    assert!((l - 0.4 * (1.0 + (-5f64).exp()).ln()).abs() < 1e-12);
    assert!((l - 0.002686).abs() < 1e-6, "{l}");
}

#[test]
fn schedule_endpoints_are_exact() {
    let total = 1000;
    assert_eq!(momentum_schedule(0.996, 0, total).unwrap(), 0.996);
    assert_eq!(momentum_schedule(0.996, total, total).unwrap(), 1.0);
    assert!(momentum_schedule(0.996, total + 1, total).is_err());

    let lr = ScheduleConfig::cosine(total);
    assert_eq!(lr.value(0.05, 0).unwrap(), 0.05);
    assert_eq!(lr.value(0.05, total).unwrap(), 0.0);
    let warm = ScheduleConfig::warmup_cosine(total, 40);
    assert_eq!(warm.value(0.05, 0).unwrap(), 0.0);
    assert_eq!(warm.value(0.05, 40).unwrap(), 0.05);
    assert_eq!(warm.value(0.05, total).unwrap(), 0.0);

    assert_eq!(tau_schedule(TauRule::CosineRamp, 0.1, 0.2, 0, total).unwrap(), 0.1);
    assert_eq!(tau_schedule(TauRule::CosineRamp, 0.1, 0.2, total, total).unwrap(), 0.2);
}

#[test]
fn momentum_encoder_follows_the_scalar_recurrence() {
    let steps = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut online = Toy::new(0.3, -1.2);
    let mut target = Toy::new(0.3, -1.2);
    let (mut gw, mut gb) = (0.3f64, -1.2f64);
    for t in 0..steps {
        // Arbitrary optimizer-like drift of the online parameters.
        online.w.value.data_mut()[0] -= 0.01 * rng.random_range(-1.0..1.0);
        online.b.value.data_mut()[0] += 0.02 * (t as f64 * 0.01).sin();
        let m = momentum_schedule(0.99, t, steps).unwrap();
        ema_update(&mut target, &online, m).unwrap();
        let (fw, fb) = online.values();
        gw = m * gw + (1.0 - m) * fw;
        gb = m * gb + (1.0 - m) * fb;
        let (tw, tb) = target.values();
        assert!((tw - gw).abs() < 1e-12 && (tb - gb).abs() < 1e-12, "step {t}");
    }
}

#[test]
fn ema_rejects_mismatched_trees() {
    struct One(Param<f64>);
    impl Module<f64> for One {
        fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(&format!("{p}w"), &self.0);
        }
        fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&format!("{p}w"), &mut self.0);
        }
    }
    let mut one = One(Param::new(Tensor::new(vec![1], vec![0.0]).unwrap()));
    assert!(ema_update(&mut one, &Toy::new(1.0, 1.0), 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn momentum_and_tau_stay_in_range(m0 in 0.9..1.0f64, total in 1usize..5000, frac in 0.0..=1.0f64) {
        let step = ((total as f64) * frac) as usize;
        let m = momentum_schedule(m0, step, total).unwrap();
        prop_assert!(m >= m0 - 1e-15 && m <= 1.0);
        let tau = tau_schedule(TauRule::CosineRamp, 0.1, 0.2, step, total).unwrap();
        prop_assert!((0.1 - 1e-15..=0.2 + 1e-15).contains(&tau));
    }

    #[test]
    fn loss_is_nonnegative_and_bounded(seed in any::<u64>(), b in 2usize..8, tau in 0.05..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = |rng: &mut ChaCha8Rng| {
            let mut t = Tensor::from_fn(vec![b, 6], |_| rng.random_range(-1.0..1.0f64));
            for r in 0..b {
                let row = &mut t.data_mut()[r * 6..(r + 1) * 6];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= n);
            }
            t
        };
        let (q, k) = (unit(&mut rng), unit(&mut rng));
        let l = contrastive_loss_value(&q, &k, tau).unwrap();
        // Logits lie in [-1/τ, 1/τ], so the cross-entropy is at most ln(B) + 2/τ.
        prop_assert!(l >= 0.0 && l <= 2.0 * tau * ((b as f64).ln() + 2.0 / tau) + 1e-12);
    }
}
