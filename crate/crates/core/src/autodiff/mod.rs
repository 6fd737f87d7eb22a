//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.
//!
//! Every op evaluates eagerly and appends a node to the [`Tape`]; nodes whose
//! inputs are all untracked are stored as plain constants. Broadcasting is
//! limited to scalar-with-tensor and `1×c` row-with-matrix on the right-hand
//! operand; diagonal scaling has its own op ([`Var::scale_rows`]).

mod grad;
mod ops;
mod tape;

pub mod gradcheck;

pub use tape::{Gradients, Tape, Var};

pub(crate) use ops::{sigmoid, softplus, L2_FLOOR};

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, finite_diff_grad};
    use super::*;
    use crate::error::Error;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0]));
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Backward(_))));
        tape.reset();
        assert!(tape.backward(loss).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
    }

    #[test]
    fn foreign_var_is_detached() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.leaf(Tensor::row(&[1.0]));
        let y = b.leaf(Tensor::row(&[1.0]));
        let g = a.backward(x.sum().unwrap()).unwrap();
        assert!(matches!(g.get(&y), Err(Error::DetachedLeaf)));
        assert!(x.add(y).is_err());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::row(&[-1.0]));
        assert!(matches!(a.ln(), Err(Error::NonFinite { op: "ln" })));
    }

    #[test]
    fn unsupported_broadcast_is_an_error() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[3, 2]));
        let col = tape.leaf(Tensor::zeros(&[3, 1]));
        assert!(matches!(a.add(col), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn primitive_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let i = tape.constant(Tensor::eye(2));
        assert_eq!(*a.matmul(i).unwrap().value(), *a.value());
        let s = tape.constant(Tensor::row(&[0.0, 0.0])).softmax_rows().unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let o = tape
            .constant(Tensor::row(&[1.0, 0.0]))
            .outer(tape.constant(Tensor::row(&[0.0, 1.0])))
            .unwrap();
        assert_eq!(o.value().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn untracked_inputs_record_constants() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::row(&[1.0]));
        let b = a.exp().unwrap();
        assert!(!b.requires_grad());
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x: &Tensor| Ok(Tensor::scalar(x.sum())), &Tensor::row(&[5.0]), 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-9);
        let g = finite_diff_grad(
            |x: &Tensor| Ok(Tensor::scalar(x.data()[0] * x.data()[0])),
            &Tensor::row(&[3.0]),
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_rejects_bad_f() {
        let x = Tensor::row(&[1.0]);
        assert!(finite_diff_grad(|x: &Tensor| Ok(x.clone()), &Tensor::row(&[1.0, 2.0]), 1e-5).is_err());
        assert!(finite_diff_grad(|_: &Tensor| Ok(Tensor::scalar(f64::NAN)), &x, 1e-5).is_err());
        assert!(finite_diff_grad(|x: &Tensor| Ok(Tensor::scalar(x.sum())), &x, 0.0).is_err());
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = Rng::seed(11);
        let inputs = vec![
            Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng),
            Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng),
            Tensor::uniform(&[1, 6], -1.0, 1.0, &mut rng),
            Tensor::uniform(&[6, 3], -1.0, 1.0, &mut rng),
        ];
        let report = check_gradients(&inputs, 1e-5, |_, v| {
            let h = v[0].matmul(v[1])?.add(v[2])?.silu()?;
            h.matmul(v[3])?.square()?.mean()
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    /// Every differentiable primitive against central differences.
    #[test]
    fn primitives_match_finite_differences() {
        type Build = for<'t> fn(&'t Tape, &[Var<'t>]) -> crate::Result<Var<'t>>;
        let mut rng = Rng::seed(5);
        let m = |r, c, rng: &mut Rng| Tensor::uniform(&[r, c], -1.0, 1.0, rng);
        let pos = |r, c, rng: &mut Rng| Tensor::uniform(&[r, c], 0.5, 1.5, rng);
        let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
            ("add_row", vec![m(3, 4, &mut rng), m(1, 4, &mut rng)], |_, v| v[0].add(v[1])?.square()?.sum()),
            ("sub_scalar", vec![m(3, 4, &mut rng), m(1, 1, &mut rng)], |_, v| v[0].sub(v[1])?.square()?.sum()),
            ("mul_same", vec![m(3, 4, &mut rng), m(3, 4, &mut rng)], |_, v| v[0].mul(v[1])?.sum()),
            ("div_row", vec![m(3, 4, &mut rng), pos(1, 4, &mut rng)], |_, v| v[0].div(v[1])?.square()?.sum()),
            ("exp_ln", vec![pos(2, 3, &mut rng)], |_, v| v[0].ln()?.exp()?.square()?.sum()),
            ("sigmoid", vec![m(2, 3, &mut rng)], |_, v| v[0].sigmoid()?.square()?.sum()),
            ("softplus", vec![m(2, 3, &mut rng)], |_, v| v[0].softplus()?.square()?.sum()),
            ("silu", vec![m(2, 3, &mut rng)], |_, v| v[0].silu()?.square()?.sum()),
            ("elu_plus_one", vec![m(2, 3, &mut rng)], |_, v| v[0].elu_plus_one()?.square()?.sum()),
            ("sqrt", vec![pos(2, 3, &mut rng)], |_, v| v[0].sqrt()?.square()?.square()?.sum()),
            ("matmul_t", vec![m(3, 4, &mut rng), m(5, 4, &mut rng)], |_, v| v[0].matmul(v[1].t()?)?.square()?.sum()),
            ("outer", vec![m(1, 3, &mut rng), m(1, 4, &mut rng)], |_, v| v[0].outer(v[1])?.square()?.sum()),
            ("scale_rows", vec![m(3, 4, &mut rng), m(3, 1, &mut rng)], |_, v| v[0].scale_rows(v[1])?.square()?.sum()),
            ("reductions", vec![m(3, 4, &mut rng)], |_, v| {
                let a = v[0].sum_rows()?.square()?.sum()?;
                let b = v[0].sum_cols()?.square()?.mean()?;
                a.add(b)
            }),
            ("cumsum", vec![m(4, 3, &mut rng)], |_, v| v[0].cumsum_rows()?.square()?.sum()),
            ("softmax", vec![m(3, 4, &mut rng), m(3, 4, &mut rng)], |_, v| v[0].softmax_rows()?.mul(v[1])?.sum()),
            ("masked_softmax", vec![m(3, 3, &mut rng), m(3, 3, &mut rng)], |_, v| {
                let mask = [true, false, false, true, true, false, true, true, true];
                v[0].masked_softmax_rows(&mask)?.mul(v[1])?.sum()
            }),
            ("log_softmax", vec![m(3, 4, &mut rng), m(3, 4, &mut rng)], |_, v| v[0].log_softmax_rows()?.mul(v[1])?.sum()),
            ("rms_norm", vec![m(3, 4, &mut rng), m(3, 4, &mut rng)], |_, v| v[0].rms_norm_rows(1e-6)?.mul(v[1])?.sum()),
            ("l2_normalize", vec![m(3, 4, &mut rng), m(3, 4, &mut rng)], |_, v| v[0].l2_normalize_rows()?.mul(v[1])?.sum()),
            ("slices_concat", vec![m(4, 5, &mut rng)], |t, v| {
                let a = v[0].slice_cols(1, 3)?;
                let b = v[0].slice_rows(2, 4)?.slice_cols(0, 2)?;
                t.concat_rows(&[a, b])?.square()?.sum()
            }),
            ("concat_cols_reshape", vec![m(2, 3, &mut rng), m(2, 2, &mut rng)], |t, v| {
                t.concat_cols(&[v[0], v[1]])?.reshape(&[1, 10])?.square()?.sum()
            }),
            ("gather_scatter", vec![m(4, 3, &mut rng)], |_, v| {
                v[0].gather_rows(&[2, 0, 2])?.square()?.scatter_add_rows(&[1, 1, 0], 2)?.square()?.sum()
            }),
            ("gather_cols", vec![m(3, 4, &mut rng)], |_, v| v[0].gather_cols(&[0, 3, 1, 1, 2, 0], 2)?.square()?.sum()),
            ("decay_scores", vec![m(4, 3, &mut rng), m(4, 3, &mut rng), m(4, 3, &mut rng)], |t, v| {
                let l = v[2].sigmoid()?.ln()?.cumsum_rows()?;
                t.decay_scores(v[0], v[1], l)?.square()?.sum()
            }),
        ];
        for (name, inputs, build) in cases {
            let report = check_gradients(&inputs, 1e-5, build).unwrap();
            assert!(report.max_rel_err < 1e-4, "{name}: {report:?}");
        }
    }
}
