use mflab::harness::RowTable;
use mflab::mfc::{apply_stopping, is_dominated, multisets};
use mflab::numeric::pairwise_sum;
use mflab::streams::{substream, Cohort, Purpose};
use mflab::wentzell::Schedule;
use mflab::{CylindricalFunctional, EmpiricalMeasure};
use proptest::prelude::*;
use rand::Rng;

fn points(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0_f64, 1..=max)
}

fn flagged(max: usize) -> impl Strategy<Value = EmpiricalMeasure> {
    prop::collection::vec((-3i32..3, any::<bool>(), 1u32..5), 1..=max).prop_map(|atoms| {
        let total: u32 = atoms.iter().map(|a| a.2).sum();
        EmpiricalMeasure::flagged(atoms.into_iter().map(|(x, alive, w)| (x as f64 * 0.5, alive, w as f64 / total as f64)))
            .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn stopping_is_dominated(m in flagged(6), ps in prop::collection::vec(0.0..=1.0_f64, 12)) {
        let p = |x: f64| ps[((x * 2.0).round() as i64 + 6) as usize];
        let stopped = apply_stopping(&m, p).unwrap();
        prop_assert!(is_dominated(&stopped, &m));
        prop_assert!(stopped.alive_mass() <= m.alive_mass() + 1e-12);
    }
}

proptest! {
    #[test]
    fn wasserstein_is_a_metric(a in points(6), b in points(6), c in points(6)) {
        let (a, b, c) = (
            EmpiricalMeasure::uniform(&a).unwrap(),
            EmpiricalMeasure::uniform(&b).unwrap(),
            EmpiricalMeasure::uniform(&c).unwrap(),
        );
        for order in [1, 2] {
            let ab = a.wasserstein(&b, order).unwrap();
            prop_assert!((ab - b.wasserstein(&a, order).unwrap()).abs() <= 1e-12);
            prop_assert!(a.wasserstein(&a, order).unwrap() <= 1e-12);
            prop_assert!(ab <= a.wasserstein(&c, order).unwrap() + c.wasserstein(&b, order).unwrap() + 1e-9);
        }
        prop_assert!(a.wasserstein(&b, 1).unwrap() <= a.wasserstein(&b, 2).unwrap() + 1e-12);
    }

    #[test]
    fn mixture_endpoints(a in points(5), b in points(5)) {
        let (a, b) = (EmpiricalMeasure::uniform(&a).unwrap(), EmpiricalMeasure::uniform(&b).unwrap());
        prop_assert!(a.mix(&b, 0.0).unwrap().wasserstein(&a, 2).unwrap() <= 1e-12);
        prop_assert!(a.mix(&b, 1.0).unwrap().wasserstein(&b, 2).unwrap() <= 1e-12);
        prop_assert!((a.mix(&b, 0.25).unwrap().mean() - (0.75 * a.mean() + 0.25 * b.mean())).abs() <= 1e-12);
    }

    #[test]
    fn translation_shifts_w1(a in points(5), s in -2.0..2.0_f64) {
        let m = EmpiricalMeasure::uniform(&a).unwrap();
        let shifted = m.pushforward(|x| x + s);
        prop_assert!((m.wasserstein(&shifted, 1).unwrap() - s.abs()).abs() <= 1e-12);
    }

    #[test]
    fn pairwise_sum_is_close_to_naive(xs in prop::collection::vec(-1e3..1e3_f64, 0..300)) {
        let naive: f64 = xs.iter().sum();
        let scale: f64 = xs.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        prop_assert!((pairwise_sum(&xs) - naive).abs() <= 1e-12 * scale);
    }

    #[test]
    fn schedule_integral_is_additive(a in 0.0..1.0_f64, b in 0.0..1.0_f64, c in 0.0..1.0_f64) {
        let s = Schedule { breakpoints: vec![0.0, 0.3, 0.7], pieces: vec![vec![1.0, -2.0], vec![0.5], vec![0.0, 1.0, 1.0]] };
        s.validate().unwrap();
        let lhs = s.integral(a, b) + s.integral(b, c);
        prop_assert!((lhs - s.integral(a, c)).abs() <= 1e-12);
    }

    #[test]
    fn cylindrical_value_is_permutation_invariant(seed in any::<u64>(), xs in points(8)) {
        let mut rng = substream(seed, Purpose::Oracle, Cohort::Particles, 0);
        let u = CylindricalFunctional::random(&mut rng, 2, 3, 2);
        let mut rev = xs.clone();
        rev.reverse();
        let (a, b) = (u.value_uniform(&xs), u.value_uniform(&rev));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn substreams_are_reproducible(master in any::<u64>(), index in 0u64..1000) {
        let mut a = substream(master, Purpose::IdioDiffusion, Cohort::Particles, index);
        let mut b = substream(master, Purpose::IdioDiffusion, Cohort::Particles, index);
        let mut c = substream(master, Purpose::IdioDiffusion, Cohort::Copies, index);
        let (x, y, z): (u64, u64, u64) = (a.random(), b.random(), c.random());
        prop_assert_eq!(x, y);
        prop_assert_ne!(x, z);
    }

    #[test]
    fn row_tables_round_trip(vals in prop::collection::vec(any::<f64>(), 1..20)) {
        let t = RowTable {
            header: vec!["i".into(), "v".into()],
            rows: vals.iter().enumerate().map(|(i, v)| vec![i.to_string(), format!("{v:e}")]).collect(),
        };
        let back = RowTable::from_csv(&t.to_csv().unwrap()).unwrap();
        prop_assert_eq!(&back, &t);
        for (r, v) in back.rows.iter().zip(&vals) {
            let parsed: f64 = r[1].parse().unwrap();
            prop_assert!(parsed.to_bits() == v.to_bits() || (parsed.is_nan() && v.is_nan()));
        }
    }

    #[test]
    fn multisets_are_canonical(lo in -3i32..0, width in 0i32..4, n in 1usize..4) {
        let all = multisets(lo, lo + width, n);
        prop_assert!(all.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(all.iter().all(|c| c.windows(2).all(|p| p[0] <= p[1])));
    }
}
