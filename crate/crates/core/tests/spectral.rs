use ctrls::abstraction::{sorted_eigenpairs, spectral_embed, GramMatrix};
use ctrls::backbone::TokenEmbeddingMatrix;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = Array2<f64>> {
    (1usize..=8, 1usize..=8).prop_flat_map(|(n, d)| {
        prop::collection::vec(-3.0f64..3.0, n * d)
            .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    })
}

fn dense_eigenvalues(e: &Array2<f64>) -> Vec<f64> {
    let m = DMatrix::from_fn(e.nrows(), e.ncols(), |i, j| e[[i, j]]);
    let mut vals: Vec<f64> = SymmetricEigen::new(m.transpose() * &m)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    vals
}

proptest! {
    #[test]
    fn eigenvalues_match_dense_solver(e in matrix()) {
        let g = GramMatrix::of(&TokenEmbeddingMatrix::new(e.clone()).unwrap());
        let ours: Vec<f64> = sorted_eigenpairs(g.matrix()).iter().map(|p| p.0).collect();
        let dense = dense_eigenvalues(&e);
        let scale = dense[0].max(1.0);
        for (a, b) in ours.iter().zip(&dense) {
            prop_assert!((a - b.max(0.0)).abs() <= 1e-9 * scale, "{ours:?} vs {dense:?}");
        }
    }

    #[test]
    fn energy_identity(e in matrix(), k_frac in 0.0f64..1.0) {
        let d = e.ncols();
        let k = 1 + ((d - 1) as f64 * k_frac) as usize;
        let emb = spectral_embed(&TokenEmbeddingMatrix::new(e.clone()).unwrap(), k).unwrap();
        let energy: f64 = emb.e.iter().map(|x| x * x).sum();
        let top: f64 = dense_eigenvalues(&e)[..k].iter().map(|l| l.max(0.0)).sum();
        prop_assert!((energy - top).abs() <= 1e-8 * top.max(1.0));
        prop_assert_eq!(emb.e.len(), k * d);
    }

    #[test]
    fn invariant_to_row_order(e in matrix()) {
        let n = e.nrows();
        let mut rev = e.clone();
        for i in 0..n {
            rev.row_mut(i).assign(&e.row(n - 1 - i));
        }
        let k = e.ncols();
        let a = spectral_embed(&TokenEmbeddingMatrix::new(e).unwrap(), k).unwrap();
        let b = spectral_embed(&TokenEmbeddingMatrix::new(rev).unwrap(), k).unwrap();
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn leading_nonzero_component_is_positive(e in matrix()) {
        let g = GramMatrix::of(&TokenEmbeddingMatrix::new(e).unwrap());
        for (_, q) in sorted_eigenpairs(g.matrix()) {
            let first = q.iter().find(|x| x.abs() > 1e-9).copied().unwrap_or(1.0);
            prop_assert!(first > 0.0);
        }
    }
}

#[test]
fn rank_one_embedding_is_scaled_direction() {
    // rows are multiples of (3, 4); G = 25 * (1 + 4) * u u^T with u = (0.6, 0.8)
    let e = Array2::from_shape_vec((2, 2), vec![3.0, 4.0, -6.0, -8.0]).unwrap();
    let emb = spectral_embed(&TokenEmbeddingMatrix::new(e).unwrap(), 1).unwrap();
    let s = 125f64.sqrt();
    assert!((emb.e[0] - 0.6 * s).abs() < 1e-10 && (emb.e[1] - 0.8 * s).abs() < 1e-10);
}
