//! Minimal reverse-mode differentiation over dense matrices.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, RELATIVE_ERROR_FLOOR};
pub use tape::{logistic, Gradients, Tape, Var, EXP_CLAMP};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::error::Error;
    use crate::tensor::{CsrMatrix, Matrix};

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn uniform_softmax_loss_is_ln2() {
        let mut t = Tape::new();
        let x = t.param(m(&[&[0.0, 0.0]]));
        let labels: Arc<[usize]> = Arc::from(vec![0]);
        let l = t.softmax_cross_entropy(x, &labels, &[true]).unwrap();
        assert!((t.scalar(l).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn relu_gradient() {
        let mut t = Tape::new();
        let x = t.param(m(&[&[-1.0, 2.0]]));
        let r = t.relu(x).unwrap();
        let s = t.sum(r).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn column_norm_gradient() {
        let mut t = Tape::new();
        let x = t.param(m(&[&[3.0], &[4.0]]));
        let n = t.column_l2_norms(x).unwrap();
        assert_eq!(t.value(n).data(), &[5.0]);
        let s = t.sum(n).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.6, 0.8]);
    }

    #[test]
    fn identity_matmul_gradient_is_ones() {
        let mut t = Tape::new();
        let w = t.constant(Matrix::identity(3));
        let x = t.param(m(&[&[0.3], &[-2.0], &[5.0]]));
        let y = t.matmul(w, x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(g.get(w).is_none());
    }

    #[test]
    fn reused_value_gradients_add() {
        let mut t = Tape::new();
        let y = t.param(m(&[&[1.5, -2.0]]));
        let a = t.scalar_mul(y, 3.0).unwrap();
        let b = t.add(a, y).unwrap();
        let s = t.sum(b).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.param(m(&[&[1.0, 2.0]]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn foreign_var_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(Matrix::scalar(1.0));
        assert!(b.relu(x).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.param(Matrix::zeros(2, 3));
        let b = t.param(Matrix::zeros(2, 2));
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
        let v = t.param(Matrix::zeros(1, 2));
        assert!(t.row_broadcast_mul(a, v).is_err());
        assert!(t.scale_rows(a, v).is_ok());
        assert!(t.max_reduce(a).is_err());
    }

    #[test]
    fn zero_inputs_give_forced_values() {
        let mut t = Tape::new();
        let z = t.param(Matrix::zeros(2, 3));
        let r = t.relu(z).unwrap();
        let n = t.column_l2_norms(z).unwrap();
        let s = t.sigmoid(z).unwrap();
        let e = t.exp(z).unwrap();
        assert!(t.value(r).data().iter().all(|&x| x == 0.0));
        assert!(t.value(n).data().iter().all(|&x| x == 0.0));
        assert!(t.value(s).data().iter().all(|&x| x == 0.5));
        assert!(t.value(e).data().iter().all(|&x| x == 1.0));
        let total = t.sum(n).unwrap();
        let g = t.backward(total).unwrap();
        assert!(g.get(z).unwrap().data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn exp_and_log_clamp() {
        let mut t = Tape::new();
        let x = t.param(m(&[&[1000.0, -1000.0]]));
        let e = t.exp(x).unwrap();
        assert_eq!(t.value(e).data()[0], EXP_CLAMP.exp());
        let z = t.param(m(&[&[0.0]]));
        let l = t.log(z).unwrap();
        assert_eq!(t.value(l).data()[0], -EXP_CLAMP);
        let s = t.sum(e).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn max_reduce_ties_go_to_lowest_index() {
        let mut t = Tape::new();
        let x = t.param(m(&[&[1.0, 3.0, 3.0, 2.0]]));
        let mx = t.max_reduce(x).unwrap();
        let g = t.backward(mx).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn product_reduce_gradient_is_leave_one_out_product() {
        let vals = [2.0, -0.5, 4.0, 0.25];
        let mut t = Tape::new();
        let x = t.param(Matrix::row_vector(vals.to_vec()));
        let p = t.product_reduce(x).unwrap();
        let g = t.backward(p).unwrap();
        for (i, d) in g.get(x).unwrap().data().iter().enumerate() {
            let expect: f64 = vals
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v)
                .product();
            assert_eq!(*d, expect);
        }
    }

    #[test]
    fn spmm_matches_dense_product() {
        let p = Arc::new(
            CsrMatrix::from_triplets(3, 3, [(0, 0, 0.5), (0, 1, 0.5), (1, 1, 1.0), (2, 0, 0.2), (2, 2, 0.8)])
                .unwrap(),
        );
        let x = m(&[&[1.0, -1.0], &[2.0, 0.5], &[0.0, 3.0]]);
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let y = t.spmm(&p, xv).unwrap();
        assert_eq!(t.value(y), &p.to_dense().matmul(&x).unwrap());
    }

    #[test]
    fn link_ops() {
        let mut t = Tape::new();
        let h = t.param(m(&[&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]));
        let pairs: Arc<[(usize, usize)]> = Arc::from(vec![(0, 1), (2, 3), (2, 2)]);
        let d = t.pair_dot(h, &pairs).unwrap();
        assert_eq!(t.value(d).data(), &[0.0, 0.0, 1.0]);
        let targets: Arc<[f64]> = Arc::from(vec![1.0, 0.0, 1.0]);
        let l = t.bce_with_logits(d, &targets).unwrap();
        let expect = (2.0 * std::f64::consts::LN_2 + (1.0 + (-1.0f64).exp()).ln()) / 3.0;
        assert!((t.scalar(l).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn quadratic_passes_tight_check() {
        let w = Matrix::row_vector(vec![0.3, -1.2, 0.7, 2.0]);
        let rep = grad_check(
            |t, p| {
                let sq = t.mul(p[0], p[0])?;
                t.sum(sq)
            },
            &[w],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn near_tie_is_excluded_not_failed() {
        let v = Matrix::row_vector(vec![1.0, 1.0 + 1e-12, 0.5]);
        let rep = grad_check(|t, p| t.max_reduce(p[0]), &[v], 1e-5, 1e-4).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.params[0].excluded, 2);
        assert_eq!(rep.params[0].checked, 1);
    }

    #[test]
    fn nan_fails_with_location() {
        let v = Matrix::row_vector(vec![1.0, f64::NAN]);
        let rep = grad_check(|t, p| t.sum(p[0]), &[v], 1e-5, 1e-4).unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.params[0].non_finite_at, Some(0));
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut t = Tape::new();
            let a = t.param(m(&[&[0.1, 0.2], &[0.3, -0.4]]));
            let b = t.sigmoid(a).unwrap();
            let c = t.matmul(b, a).unwrap();
            let d = t.exp(c).unwrap();
            t.value(d).clone()
        };
        assert_eq!(run(), run());
    }
}
