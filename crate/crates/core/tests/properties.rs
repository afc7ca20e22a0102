use indirect_moments::asymptotics::posterior_decomposition;
use indirect_moments::channels::{
    conditional_beta_means, dp_audit, Channel, ClassicRR, CoordReleaseChannel, FlipProb, PerValueChannel,
    DEFAULT_AUDIT_BUDGET,
};
use indirect_moments::estimators::{em_marginal_ml, pinv_recover, ChannelMatrix, EmOptions, EmpiricalObsDist};
use indirect_moments::expfam::{fit_from_moments, FeatureMap, FitOptions, Params};
use indirect_moments::harness::fmt_f64;
use indirect_moments::privreg::{scale_dataset, statistics_feature_map, MixedCoordChannel, StatLayout};
use indirect_moments::regioncount::{build_model, generate_corpus, mu_from_w, FeatureSpec, GeneratorConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn unit_matrix(max_d: usize, max_m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_d, 2..=max_m).prop_flat_map(|(d, m)| {
        proptest::collection::vec(0.0..=1.0f64, d * m).prop_map(move |v| DMatrix::from_vec(d, m, v))
    })
}

fn stochastic(k: usize, m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(0.05..1.0f64, k * m).prop_map(move |v| {
        let mut s = DMatrix::from_vec(k, m, v);
        for mut c in s.column_iter_mut() {
            let t = c.sum();
            c /= t;
        }
        s
    })
}

fn distribution(k: usize) -> impl Strategy<Value = DVector<f64>> {
    proptest::collection::vec(0.05..1.0f64, k).prop_map(|v| {
        let t: f64 = v.iter().sum();
        DVector::from_iterator(v.len(), v.iter().map(|x| x / t))
    })
}

/// Exhaustive `E[β | y] = φ(y)`, with tolerance relative to the largest β.
fn assert_unbiased(ch: &dyn Channel, fm: &FeatureMap) -> Result<(), TestCaseError> {
    let means = conditional_beta_means(ch, fm).unwrap();
    let scale = ch.beta_table(fm).unwrap().amax().max(1.0);
    let err = (means - fm.matrix()).amax();
    prop_assert!(err <= 1e-12 * scale * fm.outcomes() as f64, "{}: error {err}", ch.name());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn channels_are_unbiased(phi in unit_matrix(4, 6), eps in 0.05..=1.0f64, alpha in 0.1..5.0f64) {
        let fm = FeatureMap::new(phi).unwrap().with_bound(1.0).unwrap();
        assert_unbiased(&ClassicRR::uniform(eps, fm.outcomes()).unwrap(), &fm)?;
        assert_unbiased(&CoordReleaseChannel::uniform(fm.dim(), alpha, 1.0).unwrap(), &fm)?;
        assert_unbiased(&PerValueChannel::with_enumerated_bound(&fm, alpha).unwrap(), &fm)?;
    }

    #[test]
    fn mixed_scheme_is_unbiased(levels in proptest::collection::vec(0.0..=1.0f64, 2), alpha in 0.2..5.0f64) {
        let fm = statistics_feature_map(2, &levels).unwrap();
        assert_unbiased(&MixedCoordChannel::new(2, alpha).unwrap(), &fm)?;
    }

    #[test]
    fn structured_channels_meet_their_level(
        phi in unit_matrix(3, 5),
        alpha in prop::sample::select(vec![0.1, 0.5, 1.0, 2.0, 5.0]),
    ) {
        let fm = FeatureMap::new(phi).unwrap().with_bound(1.0).unwrap();
        let cr = CoordReleaseChannel::uniform(fm.dim(), alpha, 1.0).unwrap();
        let pv = PerValueChannel::with_enumerated_bound(&fm, alpha).unwrap();
        for ch in [&cr as &dyn Channel, &pv] {
            let a = dp_audit(ch, &fm, DEFAULT_AUDIT_BUDGET).unwrap();
            prop_assert!(a.max_log_ratio <= alpha + 1e-9, "{}: {}", ch.name(), a.max_log_ratio);
        }
    }

    #[test]
    fn flip_probabilities(t in 1e-6..20.0f64) {
        prop_assert_eq!(FlipProb::new(0.0).q, 0.5);
        let (a, b) = (FlipProb::new(t).q, FlipProb::new(-t).q);
        prop_assert!((a + b - 1.0).abs() < 1e-15);
        prop_assert!(FlipProb::new(t * 1.01).q >= a);
        prop_assert!(a > 0.5 && a < 1.0);
    }

    #[test]
    fn distribution_normalizes_at_large_norm(phi in unit_matrix(3, 6), dir in proptest::collection::vec(-1.0..1.0f64, 3)) {
        let fm = FeatureMap::new(phi).unwrap();
        let v = DVector::from_iterator(fm.dim(), dir.iter().copied().take(fm.dim()));
        for norm in [1.0, 10.0, 50.0] {
            let theta = Params(if v.norm() > 0.0 { &v * (norm / v.norm()) } else { v.clone() });
            let p = fm.distribution(&theta);
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }

    #[test]
    fn fit_inverts_mean_stats(d in 1usize..=3, raw in proptest::collection::vec(-3.0..3.0f64, 3)) {
        let fm = FeatureMap::binary_cube(d);
        let theta = Params::from_slice(&raw[..d]);
        let back = fit_from_moments(&fm, &fm.mean_stats(&theta), &FitOptions { tol: 1e-12, ..FitOptions::default() }).unwrap();
        prop_assert!((back.0 - theta.0).amax() < 1e-6);
    }

    #[test]
    fn fisher_splits_by_observation(
        (phi, s) in (unit_matrix(3, 5), 1usize..6).prop_flat_map(|(phi, k)| {
            let m = phi.ncols();
            (Just(phi), stochastic(k, m))
        }),
        raw in proptest::collection::vec(-2.0..2.0f64, 3),
    ) {
        let fm = FeatureMap::new(phi).unwrap();
        let theta = Params::from_slice(&raw[..fm.dim()]);
        let (between, within) = posterior_decomposition(&fm, &theta, &s).unwrap();
        prop_assert!((between + within - fm.fisher_info(&theta)).amax() < 1e-12);
    }

    #[test]
    fn em_never_decreases_likelihood(
        (s, q) in (2usize..5, 1usize..5).prop_flat_map(|(m, k)| (stochastic(k, m), distribution(k))),
        phi_raw in proptest::collection::vec(-1.0..1.0f64, 8),
    ) {
        let m = s.ncols();
        let fm = FeatureMap::new(DMatrix::from_iterator(2, m, phi_raw.iter().copied().cycle().take(2 * m))).unwrap();
        let s = ChannelMatrix::new(s).unwrap();
        let q = EmpiricalObsDist::population(q).unwrap();
        let opts = EmOptions { max_iter: 50, ..EmOptions::default() };
        if let Ok(fit) = em_marginal_ml(&q, &s, &fm, &Params::zeros(2), &opts) {
            for w in fit.ll_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
            }
        }
    }

    #[test]
    fn pinv_inverts_full_rank_channels(
        (s, p) in (2usize..6).prop_flat_map(|m| (stochastic(m + 2, m), distribution(m))),
    ) {
        let s = ChannelMatrix::new(s).unwrap();
        let q = EmpiricalObsDist::population(s.matrix() * &p).unwrap();
        let r = pinv_recover(&q, &s).unwrap().r;
        prop_assert!((r - p).amax() < 1e-10);
    }

    #[test]
    fn mu_from_w_is_linear(seed in 0u64..1000, a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let cfg = GeneratorConfig { vocab_size: 12, num_labels: 3, num_sequences: 15, ..GeneratorConfig::default() };
        let corpus = generate_corpus(&cfg, seed).unwrap();
        let model = build_model(&corpus, &FeatureSpec::default()).unwrap();
        let mut rng = indirect_moments::rng::stream(seed, &[9]);
        use rand::Rng;
        let w1 = DMatrix::from_fn(12, 3, |_, _| rng.random_range(-1.0..1.0));
        let w2 = DMatrix::from_fn(12, 3, |_, _| rng.random_range(-1.0..1.0));
        let lhs = mu_from_w(&(&w1 * a + &w2 * b), &corpus.sequences, &model, None).unwrap().mu;
        let rhs = mu_from_w(&w1, &corpus.sequences, &model, None).unwrap().mu * a
            + mu_from_w(&w2, &corpus.sequences, &model, None).unwrap().mu * b;
        prop_assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn statistic_layout_is_a_bijection(d in 1usize..10) {
        let l = StatLayout::new(d);
        let mut seen = vec![false; l.dim()];
        for i in 0..d {
            for j in i..d {
                prop_assert_eq!(l.xx(i, j), l.xx(j, i));
                prop_assert!(!std::mem::replace(&mut seen[l.xx(i, j)], true));
            }
            prop_assert!(!std::mem::replace(&mut seen[l.xy(i)], true));
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn scaled_statistics_lie_in_unit_cube(
        rows in proptest::collection::vec(proptest::collection::vec(-50.0..50.0f64, 4), 2..30),
    ) {
        let x = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
        let y = DVector::from_fn(rows.len(), |i, _| rows[i][3]);
        let ds = scale_dataset(&x, &y).unwrap();
        let l = StatLayout::new(3);
        for i in 0..ds.len() {
            let xi: Vec<f64> = ds.x.row(i).iter().copied().collect();
            prop_assert!(l.stats(&xi, ds.y[i]).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn float_cells_round_trip(x in prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL) {
        prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
    }
}
