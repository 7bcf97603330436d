use amd_core::ams::topk_scale;
use amd_core::checkpoint::{from_bytes, to_bytes, TrainingMeta};
use amd_core::config::{toy_config, MixtureMode};
use amd_core::data::{Series, Standardizer};
use amd_core::ddi::{patchify, unpatchify};
use amd_core::mdm::avg_downsample;
use amd_core::model::AmdModel;
use amd_core::nn::ParamStore;
use amd_core::revin::{Revin, RevinState};
use amd_core::theory::{theorem1_bound_check, BoundCheckSpec};
use amd_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn revin_round_trip(x in values(3 * 12 * 2), seed in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Revin::new(&mut store, "revin", 2, true, 1e-5, &mut rng).unwrap();
        store.by_name_mut("revin.affine_scale").unwrap().data_mut().copy_from_slice(&[0.7, 1.9]);
        store.by_name_mut("revin.affine_bias").unwrap().data_mut().copy_from_slice(&[-0.3, 2.0]);
        let xt = Tensor::from_f64(&[3, 12, 2], &x).unwrap();
        let mut st = RevinState::new();
        let z = r.norm_values(&store, &xt, &mut st).unwrap();
        let back = r.denorm_values(&store, &z, &st).unwrap();
        for (a, b) in back.data().iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn gates_are_distributions(x in values(2 * 16 * 2), seed in 0u64..50, sparse in any::<bool>()) {
        let mut cfg = toy_config();
        cfg.ams.num_predictors = 4;
        cfg.ams.top_k = 2;
        if sparse {
            cfg.ams.mode = MixtureMode::Sparse;
        }
        let model = AmdModel::<f64>::new(cfg, seed).unwrap();
        let (y, gates) = model.predict(&Tensor::from_f64(&[2, 16, 2], &x).unwrap()).unwrap();
        prop_assert!(y.data().iter().all(|v| v.is_finite()));
        for row in gates.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_scale_keeps_the_leader(raw in prop::collection::vec(0.0f64..1.0, 2..9), k in 1usize..9) {
        let k = k.min(raw.len());
        let out = topk_scale(&raw, k, 1.0).unwrap();
        let lead = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap()).unwrap();
        prop_assert_eq!(raw[lead(&raw)], raw[lead(&out)]);
    }

    #[test]
    fn pooling_preserves_the_mean(x in values(24), d in prop::sample::select(vec![2usize, 3, 4, 6])) {
        let pooled = avg_downsample(&x, d).unwrap();
        prop_assert_eq!(pooled.len(), 24 / d);
        let a = x.iter().sum::<f64>() / 24.0;
        let b = pooled.iter().sum::<f64>() / pooled.len() as f64;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn patches_round_trip(x in values(2 * 3 * 12), p in prop::sample::select(vec![1usize, 2, 3, 4, 6, 12])) {
        let t = Tensor::from_f64(&[2, 3, 12], &x).unwrap();
        let patched = patchify(&t, p).unwrap();
        prop_assert_eq!(patched.shape(), &[2, 3, 12 / p, p]);
        prop_assert_eq!(unpatchify(&patched).unwrap(), t);
    }

    #[test]
    fn standardizer_inverts(x in values(30 * 3)) {
        let s = Series::new(x.clone(), 3, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let st = Standardizer::fit(&s, 0..20).unwrap();
        let back = st.inverse(&st.transform(&s).unwrap()).unwrap();
        for (a, b) in back.values().iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn bound_holds_for_any_seed(seed in any::<u64>(), period in 4usize..30) {
        let spec = BoundCheckSpec { period, length: 4 * period, horizon: 2 * period, trials: 3, seed, ..BoundCheckSpec::default() };
        let report = theorem1_bound_check(&spec).unwrap();
        prop_assert!(report.passed, "{:?}", report.violations.first());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), epoch in 0usize..100) {
        let model = AmdModel::<f64>::new(toy_config(), seed).unwrap();
        let meta = TrainingMeta { epoch, best_val_mse: Some(0.5), ..TrainingMeta::default() };
        let bytes = to_bytes(&model, &meta).unwrap();
        let (back, meta2) = from_bytes::<f64>(&bytes).unwrap();
        prop_assert!(back.params.bitwise_eq(&model.params));
        prop_assert_eq!(meta2.epoch, epoch);
        prop_assert_eq!(to_bytes(&back, &meta2).unwrap(), bytes);
    }
}
