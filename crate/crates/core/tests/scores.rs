use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use stochinv::scores::*;
use stochinv::stochastic::standard_normals;

fn ensemble_strategy(max_dim: usize, max_members: usize) -> impl Strategy<Value = (DMatrix<f64>, DVector<f64>)> {
    (1..=max_dim, 1..=max_members).prop_flat_map(|(m, ns)| {
        (
            prop::collection::vec(-3.0..3.0f64, m * ns),
            prop::collection::vec(-3.0..3.0f64, m),
        )
            .prop_map(move |(e, y)| (DMatrix::from_column_slice(m, ns, &e), DVector::from_vec(y)))
    })
}

/// Dyadic values keep sums and differences exact in floating point.
fn dyadic_strategy() -> impl Strategy<Value = (DMatrix<f64>, DVector<f64>, f64)> {
    (2..=6usize, 1..=6usize).prop_flat_map(|(m, ns)| {
        (
            prop::collection::vec(-64i32..64, m * ns),
            prop::collection::vec(-64i32..64, m),
            -64i32..64,
        )
            .prop_map(move |(e, y, c)| {
                let e: Vec<f64> = e.into_iter().map(|v| v as f64 / 8.0).collect();
                (
                    DMatrix::from_column_slice(m, ns, &e),
                    DVector::from_iterator(m, y.into_iter().map(|v| v as f64 / 8.0)),
                    c as f64 / 4.0,
                )
            })
    })
}

fn kinds() -> Vec<ScoreKind> {
    vec![ScoreKind::Energy, ScoreKind::variogram(), ScoreKind::hybrid(0.7, 0.3)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradients_match_central_differences((e, y) in ensemble_strategy(8, 8)) {
        let (m, ns) = e.shape();
        let obs = Observation::new(y).unwrap();
        for kind in kinds() {
            let scorer = Scorer::new(&kind, m, None).unwrap();
            let g = scorer.gradient(&Ensemble::new(e.clone()).unwrap(), &obs).unwrap();
            prop_assume!(!g.degenerate);
            let h = 1e-6;
            let scale = g.grad.amax().max(1e-3);
            for k in 0..m * ns {
                let mut p = e.clone();
                let mut q = e.clone();
                p[k] += h;
                q[k] -= h;
                let fd = (scorer.score(&Ensemble::new(p).unwrap(), &obs).unwrap()
                    - scorer.score(&Ensemble::new(q).unwrap(), &obs).unwrap())
                    / (2.0 * h);
                prop_assert!((g.grad[k] - fd).abs() <= 1e-5 * scale,
                    "{} entry {k}: analytic {} fd {fd}", kind.label(), g.grad[k]);
            }
        }
    }

    #[test]
    fn member_order_is_irrelevant((e, y) in ensemble_strategy(6, 6), seed in any::<u64>()) {
        let ns = e.ncols();
        let z = standard_normals(seed, 0, ns);
        let mut order: Vec<usize> = (0..ns).collect();
        order.sort_by(|a, b| z[*a].total_cmp(&z[*b]));
        let cols: Vec<DVector<f64>> = order.iter().map(|&j| e.column(j).into_owned()).collect();
        let permuted = Ensemble::from_columns(&cols).unwrap();
        let original = Ensemble::new(e.clone()).unwrap();
        let obs = Observation::new(y).unwrap();
        for kind in kinds() {
            let scorer = Scorer::new(&kind, e.nrows(), None).unwrap();
            let a = scorer.score(&original, &obs).unwrap();
            let b = scorer.score(&permuted, &obs).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{}: {a} vs {b}", kind.label());
        }
    }

    #[test]
    fn variogram_ignores_common_shift((e, y, c) in dyadic_strategy()) {
        let w = VariogramWeights::constant(e.nrows(), 2.0).unwrap();
        let base = variogram_score(&Ensemble::new(e.clone()).unwrap(), &Observation::new(y.clone()).unwrap(), &w).unwrap();
        let shifted = variogram_score(
            &Ensemble::new(e.add_scalar(c)).unwrap(),
            &Observation::new(y.add_scalar(c)).unwrap(),
            &w,
        )
        .unwrap();
        prop_assert_eq!(base, shifted);
    }

    #[test]
    fn energy_reduces_to_crps_in_one_dimension(
        samples in prop::collection::vec(-5.0..5.0f64, 1..12),
        y in -5.0..5.0f64,
    ) {
        let ens = Ensemble::new(DMatrix::from_row_slice(1, samples.len(), &samples)).unwrap();
        let es = energy_score(&ens, &Observation::from_slice(&[y]).unwrap()).unwrap();
        let crps = empirical_crps(&samples, y).unwrap();
        prop_assert!((es - crps).abs() <= 4.0 * f64::EPSILON * crps.max(1.0), "{es} vs {crps}");
    }

    #[test]
    fn hybrid_is_linear((e, y) in ensemble_strategy(6, 6), a in 0.0..3.0f64, b in 0.0..3.0f64) {
        prop_assume!(a + b > 0.0);
        let ens = Ensemble::new(e.clone()).unwrap();
        let obs = Observation::new(y).unwrap();
        let w = VariogramWeights::constant(e.nrows(), 2.0).unwrap();
        let coeffs = HybridCoeffs::new(a, b).unwrap();
        let hs = hybrid_score(&ens, &obs, &w, coeffs).unwrap();
        let expect = a * energy_score(&ens, &obs).unwrap() + b * variogram_score(&ens, &obs, &w).unwrap();
        prop_assert!((hs - expect).abs() <= 1e-14 * expect.abs().max(1.0), "{hs} vs {expect}");
    }
}

/// Ensembles drawn from the data distribution should score better on average
/// than biased ones.
#[test]
fn true_distribution_scores_better_than_shifted_on_average() {
    let (m, ns, trials) = (3, 20, 300);
    let (mut truth, mut shifted) = (0.0, 0.0);
    for t in 0..trials {
        let y = Observation::new(standard_normals(1, t, m)).unwrap();
        let z = standard_normals(2, t, m * ns);
        let e = DMatrix::from_column_slice(m, ns, z.as_slice());
        truth += energy_score(&Ensemble::new(e.clone()).unwrap(), &y).unwrap();
        shifted += energy_score(&Ensemble::new(e.add_scalar(1.0)).unwrap(), &y).unwrap();
    }
    assert!(truth < shifted, "{truth} vs {shifted}");
}
