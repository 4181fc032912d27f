use nalgebra::DMatrix;
use proptest::prelude::*;
use spdgan_core::linalg::{largest_singular_value, loewner_matrix, spectral_backward, sym_eig, sym_fn, Mat, SpectralFn, SymMatrix};
use spdgan_core::rng;

fn random_sym(n: usize, seed: u64) -> Mat {
    let mut r = rng::stream(seed);
    Mat::from_vec(n, n, rng::normals(&mut r, n * n)).unwrap().symmetrized()
}

fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

#[test]
fn eigenvalues_match_nalgebra() {
    for (n, seed) in [(3, 1), (8, 2), (16, 3), (32, 4)] {
        let m = random_sym(n, seed);
        let ours = sym_eig(&m).unwrap();
        let mut theirs: Vec<f64> = to_na(&m).symmetric_eigen().eigenvalues.iter().copied().collect();
        theirs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let scale = m.frobenius();
        for (a, b) in ours.values.iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-10 * scale, "n={n}: {a} vs {b}");
        }
        assert!(ours.reconstruct().sub(&m).frobenius() < 1e-10 * scale);
        let utu = ours.vectors.t_matmul(&ours.vectors);
        assert!(utu.sub(&Mat::identity(n)).frobenius() < 1e-10);
    }
}

#[test]
fn largest_singular_value_matches_svd() {
    for seed in 0..5 {
        let mut r = rng::stream(seed);
        let w = Mat::from_vec(6, 11, rng::normals(&mut r, 66)).unwrap();
        let svd = to_na(&w).singular_values();
        let sigma = svd.iter().copied().fold(0.0, f64::max);
        assert!((largest_singular_value(&w) - sigma).abs() < 1e-8 * sigma);
    }
}

/// Directional derivative of `f(X)` along a symmetric `E`, by central
/// differences of the forward map.
fn directional(m: &Mat, e: &Mat, f: SpectralFn) -> Mat {
    let h = 1e-6;
    let plus = sym_fn(&SymMatrix::from_symmetrized(&m.add(&e.scale(h))), f).unwrap().0;
    let minus = sym_fn(&SymMatrix::from_symmetrized(&m.sub(&e.scale(h))), f).unwrap().0;
    plus.as_mat().sub(minus.as_mat()).scale(0.5 / h)
}

#[test]
fn spectral_backward_is_adjoint_of_directional_derivative() {
    for (seed, f) in [(5, SpectralFn::Log), (6, SpectralFn::Sqrt), (7, SpectralFn::Exp), (8, SpectralFn::Rectify(0.7))] {
        let mut r = rng::stream(seed);
        let a = Mat::from_vec(5, 5, rng::normals(&mut r, 25)).unwrap();
        let m = a.matmul_t(&a).add(&Mat::identity(5).scale(0.1)).symmetrized();
        let e = random_sym(5, seed + 100);
        let gbar = random_sym(5, seed + 200);
        let eig = sym_eig(&m).unwrap();
        let xbar = spectral_backward(&eig, f, &gbar);
        // ⟨Ḡ, Df[E]⟩ = ⟨X̄, E⟩
        let lhs = gbar.inner(&directional(&m, &e, f));
        let rhs = xbar.inner(&e);
        assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0), "{f:?}: {lhs} vs {rhs}");
    }
}

#[test]
fn loewner_matrix_divided_differences() {
    let vals = [3.0, 2.0, 2.0, 0.5];
    let k = loewner_matrix(&vals, f64::ln, |x| 1.0 / x);
    assert!((k[(0, 3)] - (3f64.ln() - 0.5f64.ln()) / 2.5).abs() < 1e-14);
    assert!((k[(1, 2)] - 0.5).abs() < 1e-14);
    assert!((k[(0, 0)] - 1.0 / 3.0).abs() < 1e-14);
    assert_eq!(k[(0, 3)], k[(3, 0)]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eig_reconstructs_any_symmetric(seed in any::<u64>(), n in 1usize..12) {
        let m = random_sym(n, seed);
        let e = sym_eig(&m).unwrap();
        prop_assert!(e.reconstruct().sub(&m).frobenius() <= 1e-10 * m.frobenius().max(1.0));
        prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn exp_inverts_log(seed in any::<u64>(), n in 1usize..8) {
        let mut r = rng::stream(seed);
        let a = Mat::from_vec(n, n, rng::normals(&mut r, n * n)).unwrap();
        let m = a.matmul_t(&a).add(&Mat::identity(n).scale(0.5)).symmetrized();
        let l = sym_fn(&SymMatrix::new(m.clone()).unwrap(), SpectralFn::Log).unwrap().0;
        let back = sym_fn(&l, SpectralFn::Exp).unwrap().0;
        prop_assert!(back.as_mat().sub(&m).frobenius() <= 1e-9 * m.frobenius());
    }
}
