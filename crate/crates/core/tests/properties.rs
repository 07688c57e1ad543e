use lfact::act::halt_schedule;
use lfact::data::{gen_modsum, modsum_difficulty, Split, MODSUM_DIGITS};
use lfact::lfact::{transmission_state, CombinerKind, KeyCache, LfactParams, Strategy as Transmit};
use lfact::numeric::{
    grad_check, softmax, BoundParams, NumericError, ParamStore, Rng, Tape, Tensor, Var,
};
use proptest::prelude::*;

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-500.0f64..500.0, 1..20)) {
        let p = softmax(&Tensor::vector(&v)).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn softmax_ignores_shifts(v in finite_vec(6), c in -100.0f64..100.0) {
        let a = softmax(&Tensor::vector(&v)).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let b = softmax(&Tensor::vector(&shifted)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences(seed in 0u64..1000) {
        let mut rng = Rng::seeded(seed);
        let mut params = ParamStore::new();
        let w: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        params.insert("w", Tensor::matrix(3, 4, &w).unwrap());
        params.insert("b", Tensor::vector(&[rng.normal(), rng.normal(), rng.normal()]));
        let x = Tensor::vector(&[rng.normal(), rng.normal(), rng.normal(), rng.normal()]);
        let f = |t: &Tape, p: &BoundParams| -> Result<Var, NumericError> {
            let xv = t.constant(x.clone());
            let z = t.tanh(t.add(t.matmul(p.get("w")?, xv)?, p.get("b")?)?)?;
            let s = t.softmax(z)?;
            let l = t.log(t.pick(s, 0)?)?;
            let g = t.sum(t.mul(t.sigmoid(z)?, z)?)?;
            t.sub(g, l)
        };
        let report = grad_check(f, &params, 1e-4).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn halting_records_are_consistent(
        h in prop::collection::vec(1e-6f64..0.999_999, 5),
        cap in 1usize..=5,
        eps in prop::sample::select(vec![0.01, 0.05, 0.2]),
    ) {
        let r = halt_schedule(|n| h[n - 1], eps, cap).unwrap();
        prop_assert!(r.validate(eps, cap).is_ok(), "{:?}", r);
        prop_assert!(r.ponder() > r.n_t as f64 && r.ponder() <= r.n_t as f64 + 1.0);
    }

    #[test]
    fn transmission_is_a_convex_combination(
        seed in 0u64..500,
        count in 1usize..=4,
        layer in 1usize..=4,
        ltd in any::<bool>(),
    ) {
        let hidden = 5;
        let mut rng = Rng::seeded(seed);
        let mut store = ParamStore::new();
        LfactParams::init(&mut store, "m", 2, hidden, 4, CombinerKind::Affine, &mut rng);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let strategy = if ltd { Transmit::Ltd } else { Transmit::All };
        let p = LfactParams::bind(&b, "m", None, CombinerKind::Affine, strategy, 4).unwrap();
        let prims: Vec<Tensor> = (0..count)
            .map(|_| Tensor::vector(&(0..hidden).map(|_| 3.0 * rng.normal()).collect::<Vec<_>>()))
            .collect();
        let vars: Vec<Var> = prims.iter().map(|t| tape.constant(t.clone())).collect();
        let query = tape.constant(Tensor::vector(&(0..hidden).map(|_| rng.normal()).collect::<Vec<_>>()));
        let (u, alpha) = transmission_state(&tape, &vars, query, layer, &p, &mut KeyCache::new(count)).unwrap();
        let used = if ltd { count.min(layer) } else { count };
        prop_assert_eq!(alpha.len(), used);
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let u = tape.value(u);
        for i in 0..hidden {
            let col = prims[..used].iter().map(|t| t.data()[i]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            let v = u.data()[i];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn modsum_targets_recompute(seed in 0u64..10_000, len in 5usize..40) {
        let data = gen_modsum(&mut Rng::seeded(seed), 3, len, Split::Train).unwrap();
        for s in &data.samples {
            let digits: Vec<usize> = s.inputs.iter().map(|x| x.data()[..MODSUM_DIGITS].iter().position(|&v| v == 1.0).unwrap()).collect();
            for t in 0..len {
                let d = modsum_difficulty(&s.inputs[t]);
                prop_assert!([1, 3, 5].contains(&d));
                prop_assert_eq!(d, modsum_difficulty(&s.inputs[t - t % 5]));
                let mut total = 0;
                let mut j = t as i64;
                while j >= 0 && j > t as i64 - d as i64 {
                    total += digits[j as usize];
                    j -= 1;
                }
                prop_assert_eq!(s.targets[t][0], total % 10);
            }
        }
    }
}
