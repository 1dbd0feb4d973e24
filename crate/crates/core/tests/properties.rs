use mie::data::{MultimodalDataset, Split};
use mie::eval::{self, PredictionSet};
use mie::gradmod::{self, GmConfig};
use mie::linalg::{matmul, matmul_nt, sym_eigen, Matrix};
use mie::trainer::modality_index;
use proptest::prelude::*;

fn symmetric(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, n * n).prop_map(move |v| {
        let a = Matrix::from_vec(n, n, v).unwrap();
        let mut s = a.clone();
        s.axpy(1.0, &a.transpose()).unwrap();
        s
    })
}

fn prob_rows(n: usize, c: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(0.01f64..1.0, n * c).prop_map(move |v| {
        let mut m = Matrix::from_vec(n, c, v).unwrap();
        for i in 0..n {
            let s: f64 = m.row(i).iter().sum();
            m.row_mut(i).iter_mut().for_each(|x| *x /= s);
        }
        m
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigen_reconstructs(a in (1usize..12).prop_flat_map(symmetric)) {
        let e = sym_eigen(&a).unwrap();
        let r = e.reconstruct();
        let mut diff = r.clone();
        diff.axpy(-1.0, &a).unwrap();
        prop_assert!(diff.frobenius_norm() <= 1e-9 * a.frobenius_norm().max(1.0));
        prop_assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let vtv = matmul(&e.eigenvectors.transpose(), &e.eigenvectors).unwrap();
        let mut d = vtv;
        d.axpy(-1.0, &Matrix::identity(a.rows())).unwrap();
        prop_assert!(d.frobenius_norm() <= 1e-9);
    }

    #[test]
    fn t_matrix_spectrum_bounded(b in (1usize..10).prop_flat_map(|n| prop::collection::vec(-3.0f64..3.0, n * (n + 2)).prop_map(move |v| (n, v))), tau in 0.0f64..5.0) {
        let (n, v) = b;
        let f = Matrix::from_vec(n, n + 2, v).unwrap();
        let cov = matmul_nt(&f, &f).unwrap();
        let cfg = GmConfig { tau, ..GmConfig::default() };
        let (t, _) = gradmod::modification_matrix(&cov, &cfg).unwrap();
        if let Some(t) = t {
            prop_assert!(t.asymmetry().unwrap() <= 1e-10);
            let e = sym_eigen(&t).unwrap();
            for &l in &e.eigenvalues {
                prop_assert!(l >= (-tau).exp() - 1e-9 && l <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn fusion_stays_on_simplex(p in (1usize..6, 2usize..5, 1usize..4).prop_flat_map(|(n, c, m)| prop::collection::vec(prob_rows(n, c), m))) {
        let n = p[0].rows();
        let preds = PredictionSet::new(p, vec![0; n]).unwrap();
        for fused in [eval::fuse_average(&preds), eval::fuse_weighted(&preds)] {
            for i in 0..n {
                let s: f64 = fused.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                prop_assert!(fused.row(i).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn metrics_invariant_under_sample_permutation(
        (p, labels, perm) in (2usize..20, 2usize..5).prop_flat_map(|(n, c)| (
            prob_rows(n, c),
            prop::collection::vec(0..c, n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        ))
    ) {
        let q = p.select_rows(&perm);
        let ql: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(eval::accuracy(&p, &labels).unwrap(), eval::accuracy(&q, &ql).unwrap());
        prop_assert!((eval::macro_f1(&p, &labels).unwrap() - eval::macro_f1(&q, &ql).unwrap()).abs() <= 1e-12);
        prop_assert!((eval::mean_average_precision(&p, &labels).unwrap() - eval::mean_average_precision(&q, &ql).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn modality_index_is_cyclic_shift(m in 1usize..40) {
        let ks: Vec<usize> = (1..=m).map(|j| modality_index(j, m).unwrap()).collect();
        let mut sorted = ks.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (1..=m).collect::<Vec<_>>());
        if m >= 2 {
            prop_assert!(ks.iter().enumerate().all(|(j, &k)| k != j + 1));
        }
    }

    #[test]
    fn dataset_round_trip(
        (n, dims, c, vals, seed) in (1usize..15, prop::collection::vec(1usize..5, 1..4), 2usize..5)
            .prop_flat_map(|(n, dims, c)| {
                let total: usize = dims.iter().map(|d| d * n).sum();
                (Just(n), Just(dims), Just(c), prop::collection::vec(any::<f64>(), total), any::<u64>())
            })
    ) {
        let mut off = 0;
        let features: Vec<Matrix> = dims.iter().map(|&d| {
            let m = Matrix::from_vec(n, d, vals[off..off + n * d].to_vec()).unwrap();
            off += n * d;
            m
        }).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % c).collect();
        let splits: Vec<Split> = (0..n).map(|i| [Split::Train, Split::Val, Split::Test][(i ^ seed as usize) % 3]).collect();
        let ds = MultimodalDataset::new(c, features, labels, splits).unwrap();
        let bytes = ds.to_bytes();
        let back = MultimodalDataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert_eq!(back.splits(), ds.splits());
    }
}
