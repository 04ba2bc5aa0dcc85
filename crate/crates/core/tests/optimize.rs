use nalgebra::{DMatrix, DVector};
use stochinv::optimize::*;
use stochinv::stochastic::standard_normals;

fn spd(n: usize, seed: u64, lo: f64, hi: f64) -> DMatrix<f64> {
    let z = DMatrix::from_column_slice(n, n, standard_normals(seed, 0, n * n).as_slice());
    let q = z.qr().q();
    let eig = DVector::from_fn(n, |i, _| lo + (hi - lo) * i as f64 / (n - 1) as f64);
    &q * DMatrix::from_diagonal(&eig) * q.transpose()
}

#[test]
fn quadratic_reaches_tight_gradient() {
    let n = 20;
    let a = spd(n, 1, 1.0, 10.0);
    let b = standard_normals(2, 0, n);
    let x_star = a.clone().cholesky().unwrap().solve(&b);
    let cfg = LbfgsConfig {
        grad_tol: 1e-8 / b.norm(),
        max_iters: 60,
        ..LbfgsConfig::default()
    };
    let r = lbfgs_minimize(
        |x| Ok((0.5 * x.dot(&(&a * x)) - b.dot(x), &a * x - &b)),
        DVector::zeros(n),
        &cfg,
        None,
    )
    .unwrap();
    assert_eq!(r.status, Status::Converged, "{:?}", r.trace.records.last());
    assert!(r.gradient.norm() <= 1e-8);
    assert!((r.x - x_star).norm() < 1e-8);
    for w in r.trace.records.windows(2) {
        assert!(w[1].objective <= w[0].objective);
    }
}

#[test]
fn rosenbrock_converges() {
    let f = |x: &DVector<f64>| {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = DVector::from_vec(vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ]);
        Ok((v, g))
    };
    let cfg = LbfgsConfig {
        grad_tol: 1e-12,
        ..LbfgsConfig::default()
    };
    let r = lbfgs_minimize(f, DVector::from_vec(vec![-1.2, 1.0]), &cfg, None).unwrap();
    assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?} {:?}", r.x, r.status);
}

#[test]
fn two_loop_matches_dense_bfgs_with_exact_line_search() {
    for n in 2..=5 {
        let a = spd(n, 10 + n as u64, 0.5, 8.0);
        let b = standard_normals(20 + n as u64, 0, n);
        let mut mem = LbfgsMemory::new(n);
        let mut h = DMatrix::<f64>::identity(n, n);
        let mut x_l = DVector::zeros(n);
        let mut x_d = DVector::zeros(n);
        for _ in 0..n {
            let g_l = &a * &x_l - &b;
            let g_d = &a * &x_d - &b;
            if g_d.norm() < 1e-12 {
                break;
            }
            let d_l = -mem.apply(&g_l, 1.0);
            let d_d = -(&h * &g_d);
            let step = |x: &DVector<f64>, g: &DVector<f64>, d: &DVector<f64>| {
                let alpha = -g.dot(d) / d.dot(&(&a * d));
                x + alpha * d
            };
            let xn_l = step(&x_l, &g_l, &d_l);
            let xn_d = step(&x_d, &g_d, &d_d);
            let (s, y) = (&xn_d - &x_d, &a * &xn_d - &b - &g_d);
            let rho = 1.0 / s.dot(&y);
            let i = DMatrix::<f64>::identity(n, n);
            h = (&i - rho * &s * y.transpose()) * &h * (&i - rho * &y * s.transpose())
                + rho * &s * s.transpose();
            mem.push(&xn_l - &x_l, &a * &xn_l - &b - &g_l);
            x_l = xn_l;
            x_d = xn_d;
            assert!((&x_l - &x_d).amax() < 1e-10 * (1.0 + x_d.amax()));
        }
    }
}

#[test]
fn metric_norm_changes_stopping_test() {
    let d = DVector::from_vec(vec![4.0, 4.0]);
    let r = lbfgs_minimize(
        |x| Ok((x.norm_squared(), 2.0 * x)),
        DVector::from_vec(vec![1.0, -1.0]),
        &LbfgsConfig::default(),
        Some(&d),
    )
    .unwrap();
    let g0 = 2f64.sqrt();
    assert!((r.trace.records[0].grad_norm - g0).abs() < 1e-14);
    assert_eq!(r.status, Status::Converged);
}

#[test]
fn scalar_quadratic_from_both_bounds() {
    for start in [0.0, 10.0] {
        let r = bounded_scalar_minimize(|m| Ok((m - 3.0).powi(2)), 0.0, 10.0, start, &ScalarConfig::default()).unwrap();
        assert!((r.x - 3.0).abs() < 1e-6, "start {start}: {}", r.x);
        for w in r.iterates.windows(2) {
            assert!(w[1].1 <= w[0].1);
        }
    }
}

#[test]
fn scalar_active_bound() {
    for start in [2.0, 3.7, 5.0] {
        let r = bounded_scalar_minimize(Ok, 2.0, 5.0, start, &ScalarConfig::default()).unwrap();
        assert_eq!(r.x, 2.0);
        assert!(r.evaluations.iter().all(|(m, _)| (2.0..=5.0).contains(m)));
    }
}

fn jitter(m: f64) -> f64 {
    // Deterministic pseudo-random value in [-1, 1] keyed on the bits of m.
    let mut h = m.to_bits() ^ 0x9E37_79B9_7F4A_7C15;
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h as f64 / u64::MAX as f64) * 2.0 - 1.0
}

#[test]
fn scalar_noisy_quadratic() {
    let clean = |m: f64| (m - 3.0).powi(2) + 0.1 * (m - 3.0).powi(4);
    // Brute-force minimizer of the jitter-free function on a fine grid.
    let grid_min = (0..=100_000)
        .map(|i| i as f64 * 1e-4)
        .min_by(|a, b| clean(*a).total_cmp(&clean(*b)))
        .unwrap();
    let cfg = ScalarConfig {
        fd_step: 0.05,
        ..ScalarConfig::default()
    };
    for start in [0.0, 10.0, 6.5] {
        let r = bounded_scalar_minimize(|m| Ok(clean(m) + 1e-3 * jitter(m)), 0.0, 10.0, start, &cfg).unwrap();
        assert!((r.x - grid_min).abs() < 0.05, "start {start}: {} vs {grid_min}", r.x);
    }
}
