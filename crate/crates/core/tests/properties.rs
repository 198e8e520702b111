use feature_cp::bounds::{crown_propagate_ball, propagate_ball, sample_ball};
use feature_cp::conformal::{conformal_quantile, empirical_quantile, Band, OutputBand};
use feature_cp::data::{split, standardize, Dataset, Matrix};
use feature_cp::feature::{fcqr_combine, surrogate_score, FeatureBand, FeatureNorm, SurrogateSearchConfig};
use feature_cp::metrics::avg_length;
use feature_cp::nn::{Mlp, MlpSpec, SplitModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 0..80)
}

fn norm() -> impl Strategy<Value = FeatureNorm> {
    prop_oneof![Just(FeatureNorm::Linf), Just(FeatureNorm::L2)]
}

fn net(seed: u64) -> SplitModel {
    SplitModel::new(Mlp::init(MlpSpec::relu(vec![3, 6, 7, 5, 2]).unwrap(), seed).unwrap(), 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantile_is_nonincreasing_in_alpha(s in scores(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(conformal_quantile(&s, lo).unwrap() >= conformal_quantile(&s, hi).unwrap());
    }

    #[test]
    fn quantile_is_an_order_statistic_or_infinite(s in scores(), a in 0.01f64..0.99) {
        let q = conformal_quantile(&s, a).unwrap();
        prop_assert!(q == f64::INFINITY || s.contains(&q));
        if q.is_finite() {
            let below = s.iter().filter(|&&v| v <= q).count() as f64;
            prop_assert!(below >= (1.0 - a) * (s.len() + 1) as f64 - 1e-9);
        }
    }

    #[test]
    fn quantile_ignores_input_order(mut s in scores(), a in 0.01f64..0.99) {
        let q = conformal_quantile(&s, a).unwrap();
        s.reverse();
        prop_assert_eq!(q, conformal_quantile(&s, a).unwrap());
    }

    #[test]
    fn empirical_quantile_reaches_its_level(s in prop::collection::vec(-5.0f64..5.0, 1..40), level in 0.0f64..=1.0) {
        let q = empirical_quantile(&s, level).unwrap();
        let frac = s.iter().filter(|&&v| v <= q).count() as f64 / s.len() as f64;
        prop_assert!(frac >= level - 1e-12);
        prop_assert!(s.iter().filter(|&&v| v < q).count() as f64 / (s.len() as f64) < level + 1e-12 || level == 0.0);
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 3usize..400, seed in any::<u64>(), r in prop::array::uniform3(0.1f64..5.0)) {
        let sp = split(n, r, seed).unwrap();
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.cal).chain(&sp.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn standardized_training_fold_is_centered(seed in any::<u64>(), rows in prop::collection::vec(prop::array::uniform3(-100.0f64..100.0), 8..40)) {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let n = rows.len();
        let ds = Dataset::new(Matrix::new(n, 2, flat.chunks(3).flat_map(|c| [c[0], c[1]]).collect()).unwrap(),
                              Matrix::new(n, 1, flat.chunks(3).map(|c| c[2]).collect()).unwrap()).unwrap();
        let sp = split(n, [2.0, 1.0, 1.0], seed).unwrap();
        let (out, _) = standardize(&ds, &sp.train).unwrap();
        for j in 0..2 {
            let mean = sp.train.iter().map(|&i| out.x.row(i)[j]).sum::<f64>() / sp.train.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn bounds_enclose_sampled_images(seed in 0u64..1000, r in 0.0f64..1.5, n in norm()) {
        let m = net(seed);
        let v = m.feature_forward(&[0.3, -0.2, 0.9]).unwrap();
        let band = FeatureBand::new(v, r, n).unwrap();
        let ibp = propagate_ball(&m, &band).unwrap();
        let crown = crown_propagate_ball(&m, &band).unwrap();
        prop_assert!(ibp.encloses(&crown));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = vec![0.0; band.center.len()];
        for _ in 0..200 {
            sample_ball(&band, &mut rng, &mut u);
            let y = m.head_forward(&u).unwrap();
            prop_assert!(ibp.contains(&y) && crown.contains(&y));
        }
    }

    #[test]
    fn interval_bounds_grow_with_radius(seed in 0u64..1000, a in 0.0f64..1.0, b in 0.0f64..1.0, n in norm()) {
        let m = net(seed);
        let v = m.feature_forward(&[-0.4, 0.1, 0.5]).unwrap();
        let (small, large) = if a < b { (a, b) } else { (b, a) };
        let inner = propagate_ball(&m, &FeatureBand::new(v.clone(), small, n).unwrap()).unwrap();
        let outer = propagate_ball(&m, &FeatureBand::new(v, large, n).unwrap()).unwrap();
        prop_assert!(outer.encloses(&inner));
    }

    #[test]
    fn surrogate_score_is_zero_at_the_prediction(seed in 0u64..1000, x in prop::array::uniform3(-1.0f64..1.0)) {
        let m = net(seed);
        let y = m.forward(&x).unwrap();
        let out = surrogate_score(&m, &x, &y, &SurrogateSearchConfig::default()).unwrap();
        prop_assert_eq!(out.score, 0.0);
        prop_assert_eq!(out.steps_used, 0);
    }

    #[test]
    fn average_length_ignores_order(widths in prop::collection::vec((0.0f64..10.0, -5.0f64..5.0), 1..30)) {
        let mut bands: Vec<Band> = widths
            .iter()
            .map(|&(w, c)| Band::Bounded(OutputBand::new(vec![c, c], vec![c + w, c + 2.0 * w]).unwrap()))
            .collect();
        let a = avg_length(&bands).unwrap();
        bands.reverse();
        prop_assert!((a - avg_length(&bands).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn combined_interval_uses_the_signed_side(lo in prop::array::uniform2(-3.0f64..3.0), hi in prop::array::uniform2(-3.0f64..3.0)) {
        let lo_band = (lo[0].min(lo[1]), lo[0].max(lo[1]));
        let hi_band = (hi[0].min(hi[1]), hi[0].max(hi[1]));
        // Expanding both sides gives the widest interval of the four.
        let (wa, wb) = fcqr_combine(-1, -1, lo_band, hi_band);
        for (c_lo, c_hi) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
            let (a, b) = fcqr_combine(c_lo, c_hi, lo_band, hi_band);
            prop_assert!(a == lo_band.0 || a == lo_band.1);
            prop_assert!(b == hi_band.0 || b == hi_band.1);
            prop_assert!(a >= wa && b <= wb);
        }
    }
}
