mod common;

use ept_core::baselines::RbfKernel;
use ept_core::divergences::make_f_divergence;
use ept_core::io;
use ept_core::metrics::{mmd_squared, mmd_squared_biased, wasserstein2_exact};
use ept_core::Tensor;
use proptest::prelude::*;

fn points(max_n: usize, m: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_n).prop_flat_map(move |n| {
        prop::collection::vec(-5.0f64..5.0, n * m).prop_map(move |d| Tensor::new(vec![n, m], d).unwrap())
    })
}

fn any_points() -> impl Strategy<Value = Tensor> {
    (1usize..4).prop_flat_map(|m| points(12, m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn snapshot_round_trip_is_bit_exact(
        x in (1usize..4).prop_flat_map(|m| (1usize..20).prop_flat_map(move |n| {
            prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), n * m)
                .prop_map(move |d| Tensor::new(vec![n, m], d).unwrap())
        })),
        it in 0usize..1_000_000,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(io::snapshot_file_name(it));
        io::write_snapshot(&path, it, &x).unwrap();
        let (back_it, back) = io::read_snapshot(&path).unwrap();
        prop_assert_eq!(back_it, it);
        prop_assert_eq!(back.shape(), x.shape());
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mmd_is_symmetric_and_zero_on_itself(x in points(10, 2), y in points(10, 2), h in 0.1f64..5.0) {
        let k = RbfKernel::new(h).unwrap();
        let xy = mmd_squared_biased(&x, &y, &k).unwrap();
        let yx = mmd_squared_biased(&y, &x, &k).unwrap();
        prop_assert!((xy - yx).abs() <= 1e-12 * xy.abs().max(1.0));
        prop_assert!(xy >= -1e-12);
        prop_assert!(mmd_squared_biased(&x, &x, &k).unwrap().abs() <= 1e-12);
        if x.nrows() > 1 && y.nrows() > 1 {
            let u = mmd_squared(&x, &y, &k).unwrap();
            let v = mmd_squared(&y, &x, &k).unwrap();
            prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }

    #[test]
    fn kernel_is_symmetric_and_bounded(a in prop::collection::vec(-5.0f64..5.0, 3), b in prop::collection::vec(-5.0f64..5.0, 3), h in 0.1f64..5.0) {
        let k = RbfKernel::new(h).unwrap();
        prop_assert_eq!(k.eval(&a, &b), k.eval(&b, &a));
        prop_assert!(k.eval(&a, &b) <= 1.0 && k.eval(&a, &b) > 0.0 || k.eval(&a, &b) == 0.0);
        prop_assert_eq!(k.eval(&a, &a), 1.0);
    }

    #[test]
    fn w2_is_a_symmetric_premetric(x in any_points(), seed in any::<u64>()) {
        let n = x.nrows();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            idx.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted = x.select_rows(&idx);
        prop_assert!(wasserstein2_exact(&x, &permuted).unwrap() <= 1e-12);
        let shifted = x.map(|v| v + 0.5);
        let d1 = wasserstein2_exact(&x, &shifted).unwrap();
        let d2 = wasserstein2_exact(&shifted, &x).unwrap();
        prop_assert!((d1 - d2).abs() <= 1e-12);
        // a rigid shift is optimal: W2 equals the shift length
        let len = (0.25 * x.ncols() as f64).sqrt();
        prop_assert!((d1 - len).abs() <= 1e-9);
    }

    #[test]
    fn w2_matches_brute_force(x in (1usize..6).prop_flat_map(|n| (points_exact(n, 2), points_exact(n, 2)))) {
        let (a, b) = x;
        let exact = wasserstein2_exact(&a, &b).unwrap();
        prop_assert!((exact - common::w2_brute_force(&a, &b)).abs() <= 1e-12);
    }

    #[test]
    fn generators_vanish_at_one_and_are_convex(name in prop::sample::select(vec!["chi2", "kl", "js", "logd"]), u in 0.01f64..50.0) {
        let f = make_f_divergence(name).unwrap();
        prop_assert!(f.f(1.0).abs() <= 1e-15);
        prop_assert!(f.f_double_prime(u) > 0.0);
        // derivatives agree with central differences
        let h = 1e-5 * u.max(1.0);
        let fd1 = (f.f(u + h) - f.f(u - h)) / (2.0 * h);
        let fd2 = (f.f_prime(u + h) - f.f_prime(u - h)) / (2.0 * h);
        prop_assert!((fd1 - f.f_prime(u)).abs() <= 1e-6 * f.f_prime(u).abs().max(1.0));
        prop_assert!((fd2 - f.f_double_prime(u)).abs() <= 1e-6 * f.f_double_prime(u).abs().max(1.0));
    }
}

fn points_exact(n: usize, m: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, n * m).prop_map(move |d| Tensor::new(vec![n, m], d).unwrap())
}
