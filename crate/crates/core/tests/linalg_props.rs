use driftbench_core::linalg::{covariance, fix_column_signs, svd, sym_eig, Matrix};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0..10.0f64, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

fn orthonormal_cols(m: &Matrix, tol: f64) -> bool {
    let g = m.transpose().matmul(m).unwrap();
    g.max_abs_diff(&Matrix::identity(m.cols())) < tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn svd_reconstructs(a in matrix(9, 9)) {
        let d = svd(&a).unwrap();
        let scale = a.max_abs().max(1.0);
        prop_assert!(d.reconstruct().max_abs_diff(&a) <= 1e-10 * scale);
        prop_assert!(orthonormal_cols(&d.u, 1e-10));
        prop_assert!(orthonormal_cols(&d.vt.transpose(), 1e-10));
        prop_assert!(d.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(d.sigma.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn svd_of_transpose_shares_spectrum(a in matrix(7, 7)) {
        let s1 = svd(&a).unwrap().sigma;
        let s2 = svd(&a.transpose()).unwrap().sigma;
        for (x, y) in s1.iter().zip(&s2) {
            prop_assert!((x - y).abs() <= 1e-10 * s1[0].max(1.0));
        }
    }

    #[test]
    fn sign_fixing_is_idempotent(a in matrix(6, 6)) {
        let mut once = a.clone();
        fix_column_signs(&mut once);
        let mut twice = once.clone();
        fix_column_signs(&mut twice);
        prop_assert_eq!(&once, &twice);
        let mut flipped = a.scale(-1.0);
        fix_column_signs(&mut flipped);
        for j in 0..a.cols() {
            let col = a.col(j);
            let max = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let winners = col.iter().filter(|v| v.abs() == max).count();
            if max > 0.0 && winners == 1 {
                prop_assert_eq!(once.col(j), flipped.col(j));
            }
        }
    }

    #[test]
    fn sym_eig_ignores_orientation(a in matrix(8, 8)) {
        let n = a.rows().min(a.cols());
        let c = Matrix::from_fn(n, n, |i, j| a[(i, j)] + a[(j, i)] + if i < j { 1e-14 } else { 0.0 });
        let x = sym_eig(&c).unwrap();
        let y = sym_eig(&c.transpose()).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn sym_eig_diagonalizes(a in matrix(8, 8)) {
        let n = a.cols();
        let c = a.transpose().matmul(&a).unwrap();
        let e = sym_eig(&c).unwrap();
        prop_assert!(orthonormal_cols(&e.vectors, 1e-10));
        let rebuilt = e.vectors.matmul(&Matrix::diag(&e.values)).unwrap().matmul(&e.vectors.transpose()).unwrap();
        prop_assert!(rebuilt.max_abs_diff(&c) <= 1e-9 * c.max_abs().max(1.0));
        prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(e.values.len(), n);
    }

    #[test]
    fn covariance_is_symmetric_psd(x in matrix(20, 6)) {
        let (mean, c) = covariance(&x).unwrap();
        prop_assert_eq!(mean.len(), x.cols());
        prop_assert_eq!(&c, &c.transpose());
        let e = sym_eig(&c).unwrap();
        let tol = 1e-10 * c.max_abs().max(1.0);
        prop_assert!(e.values.iter().all(|&v| v >= -tol), "{:?}", e.values);
    }
}

#[test]
fn rank_deficient_input_keeps_orthonormal_u() {
    let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]);
    let d = svd(&a).unwrap();
    assert_eq!(d.rank(), 1);
    assert!(orthonormal_cols(&d.u, 1e-12));
    assert!(d.reconstruct().max_abs_diff(&a) < 1e-12);
}
