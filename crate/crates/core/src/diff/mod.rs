//! Reverse-mode autodiff: parameters, the tape, gradient verification,
//! checkpoints and the Adam optimizer.

pub mod adam;
pub mod check;
pub mod checkpoint;
pub mod param;
pub mod tape;

pub use adam::Adam;
pub use check::{central_diff, check_gradient, rel_err};
pub use checkpoint::{load_into, read_checkpoint, write_checkpoint, Checkpoint};
pub use param::{ParamId, ParamSet, Parameter};
pub use tape::{
    forward_scalar, stable_sigmoid, stable_softplus, CustomOp, CustomOut, NodeGrads, NodeId,
    Tape, UnaryFn, ValueRef,
};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_value_and_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let x = ps.register("x", vec![3.0]);
        let (v, tape, out) = forward_scalar(|t| {
            let xn = t.param(&ps, x, 0, 1, 1);
            t.mul(xn, xn)
        })
        .unwrap();
        assert_eq!(v, 9.0);
        tape.backward_scalar(out, 1.0, &mut ps);
        assert!((ps.grad(x)[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let x = ps.register("x", vec![3.0]);
        let (v, tape, out) = forward_scalar(|t| t.constant_scalar(5.0)).unwrap();
        assert_eq!(v, 5.0);
        tape.backward_scalar(out, 1.0, &mut ps);
        assert_eq!(ps.grad(x)[0], 0.0);
    }

    #[test]
    fn norm_of_axis_vector() {
        let (v, _, _) = forward_scalar(|t: &mut Tape<f64>| {
            let x = t.constant(&[0.0, 0.0, 2.0], 3, 1);
            let n = t.col_norms(x);
            n
        })
        .unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn backward_is_additive_in_the_seed() {
        let mut ps = ParamSet::<f64>::new();
        let x = ps.register("x", vec![0.8, -0.3]);
        let build = |t: &mut Tape<f64>, ps: &ParamSet<f64>| {
            let xn = t.param(ps, x, 0, 2, 1);
            let s = t.sin(xn);
            let d = t.dot(s, xn);
            d
        };
        let mut t1 = Tape::new();
        let o1 = build(&mut t1, &ps);
        t1.backward_scalar(o1, 0.7, &mut ps);
        t1.backward_scalar(o1, 0.5, &mut ps);
        let two_pass = ps.grad(x).to_vec();

        ps.zero_grads();
        t1.backward_scalar(o1, 1.2, &mut ps);
        let one_pass = ps.grad(x).to_vec();
        for (a, b) in two_pass.iter().zip(&one_pass) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_is_linear_in_loss_combination() {
        let mut ps = ParamSet::<f64>::new();
        let x = ps.register("x", vec![0.4, 1.1, -0.6]);
        let eval = |ps: &mut ParamSet<f64>, alpha: f64, beta: f64| -> Vec<f64> {
            ps.zero_grads();
            let psr: &ParamSet<f64> = ps;
            let mut t = Tape::new();
            let xn = t.param(psr, x, 0, 3, 1);
            let l1 = {
                let s = t.square(xn);
                t.sum(s)
            };
            let l2 = {
                let s = t.sin(xn);
                t.sum(s)
            };
            let a = t.scale(l1, alpha);
            let b = t.scale(l2, beta);
            let tot = t.add(a, b);
            t.backward_scalar(tot, 1.0, ps);
            ps.grad(x).to_vec()
        };
        let combined = eval(&mut ps, 2.0, -0.5);
        let g1 = eval(&mut ps, 1.0, 0.0);
        let g2 = eval(&mut ps, 0.0, 1.0);
        for i in 0..3 {
            let expect = 2.0 * g1[i] - 0.5 * g2[i];
            assert!((combined[i] - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn nonfinite_intermediate_is_flagged_with_op_index() {
        let r = forward_scalar(|t: &mut Tape<f64>| {
            let x = t.constant_scalar(-1.0); // op 0
            let l = t.unary(x, UnaryFn::Ln); // op 1 -> NaN
            t.square(l) // op 2
        });
        match r {
            Err(crate::error::Error::NonFinite { op }) => assert_eq!(op, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn two_layer_mlp_matches_straight_line_reevaluation() {
        // Straight-line oracle: hand-rolled forward pass without the tape.
        let w1 = [[0.3, -0.2], [0.1, 0.5], [-0.4, 0.7]];
        let b1 = [0.1, -0.3, 0.2];
        let w2 = [[0.6, -0.1, 0.2]];
        let b2 = [0.05];
        let x = [0.9, -1.4];

        let mut hidden = [0.0f64; 3];
        for i in 0..3 {
            let a = w1[i][0] * x[0] + w1[i][1] * x[1] + b1[i];
            hidden[i] = a.tanh();
        }
        let oracle = (0..3).map(|i| w2[0][i] * hidden[i]).sum::<f64>() + b2[0];

        let mut ps = ParamSet::<f64>::new();
        let w1p = ps.register("w1", w1.iter().flatten().copied().collect());
        let b1p = ps.register("b1", b1.to_vec());
        let w2p = ps.register("w2", w2[0].to_vec());
        let b2p = ps.register("b2", b2.to_vec());
        let (v, _, _) = forward_scalar(|t| {
            let xn = t.constant(&x, 2, 1);
            let w = t.param(&ps, w1p, 0, 3, 2);
            let b = t.param(&ps, b1p, 0, 3, 1);
            let a = t.matmul(w, xn);
            let a = t.add(a, b);
            let h = t.unary(a, UnaryFn::Tanh);
            let w2n = t.param(&ps, w2p, 0, 1, 3);
            let b2n = t.param(&ps, b2p, 0, 1, 1);
            let o = t.matmul(w2n, h);
            t.add(o, b2n)
        })
        .unwrap();
        assert!((v - oracle).abs() < 1e-15, "{v} vs {oracle}");
    }
}
