//! Matrix-based entropy checked against an independent eigensolver.

use dsibh_core::numkit::Matrix;
use dsibh_core::renyi::{entropy, gram, joint_entropy, mutual_information, spectral_entropy, AlphaOrder, GramMatrix};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eigen_entropy(m: &Matrix<f64>, alpha: f64) -> f64 {
    let n = m.rows();
    let dm = DMatrix::from_row_slice(n, n, m.as_slice());
    let lambda = dm.symmetric_eigen().eigenvalues;
    let s: f64 = lambda.iter().filter(|&&l| l > 0.0).map(|l| l.powf(alpha)).sum();
    s.log2() / (1.0 - alpha)
}

fn random_gram(rng: &mut ChaCha8Rng, n: usize) -> GramMatrix<f64> {
    let d = rng.random_range(1..=6);
    let p = Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    gram(&p, rng.random_range(0.2..3.0)).unwrap()
}

#[test]
fn trace_formula_matches_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..60 {
        let n = [2, 8, 64][i % 3];
        let g = random_gram(&mut rng, n);
        let h = entropy(&g, AlphaOrder::TWO).unwrap();
        let oracle = eigen_entropy(g.matrix(), 2.0);
        assert!((h - oracle).abs() < 1e-10, "n={n}: {h} vs {oracle}");
    }
}

#[test]
fn other_orders_match_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for alpha in [0.5, 1.01, 3.0] {
        let order = AlphaOrder::new(alpha).unwrap();
        for n in [2, 8, 20] {
            let g = random_gram(&mut rng, n);
            let h = spectral_entropy(g.matrix(), order).unwrap();
            let via_entropy = entropy(&g, order).unwrap();
            let oracle = eigen_entropy(g.matrix(), alpha);
            assert!((h - oracle).abs() < 1e-9, "alpha={alpha} n={n}: {h} vs {oracle}");
            assert_eq!(h, via_entropy);
        }
    }
}

#[test]
fn entropy_extremes() {
    for n in [2usize, 8, 64] {
        let same: Matrix<f64> = Matrix::new(n, 3, vec![0.7; n * 3]).unwrap();
        let h: f64 = entropy(&gram(&same, 1.0).unwrap(), AlphaOrder::TWO).unwrap();
        assert!(h.abs() < 1e-9);
        let far = Matrix::new(n, 1, (0..n).map(|i| 1e3 * i as f64).collect()).unwrap();
        let h = entropy(&gram(&far, 1.0).unwrap(), AlphaOrder::TWO).unwrap();
        assert!((h - (n as f64).log2()).abs() < 1e-6);
    }
}

#[test]
fn joint_entropy_bounds_and_self_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for n in [4, 16] {
        let a = random_gram(&mut rng, n);
        let b = random_gram(&mut rng, n);
        let two = AlphaOrder::TWO;
        let (ha, hb, hab) = (entropy(&a, two).unwrap(), entropy(&b, two).unwrap(), joint_entropy(&a, &b, two).unwrap());
        assert!(hab + 1e-9 >= ha.max(hb), "joint {hab} below marginals {ha} {hb}");
        assert!(hab <= ha + hb + 1e-9);
        assert!(ha <= (n as f64).log2() + 1e-9);
    }
    // I(X;X) = H(X) for α = 2 fails in general (A∘A ≠ A); only check symmetry.
    let x: Matrix<f64> = Matrix::from_f64_rows(&[vec![0.0, 1.0], vec![1.0, 0.5], vec![0.3, 0.3]]).unwrap();
    let t: Matrix<f64> = Matrix::from_f64_rows(&[vec![1.0], vec![-1.0], vec![0.2]]).unwrap();
    let i1 = mutual_information(&x, &t, 0.8, 0.6, AlphaOrder::TWO).unwrap();
    let i2 = mutual_information(&t, &x, 0.6, 0.8, AlphaOrder::TWO).unwrap();
    assert!((i1 - i2).abs() < 1e-12);
}
