//! Dense tensors, a define-by-run autodiff graph, Adam and gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, rel_error, GradCheckOptions, GradCheckReport, REL_ERR_FLOOR};
pub use graph::{sigmoid, softmax_values, BinaryKind, Graph, UnaryKind, Var, LEAKY_SLOPE};
pub use params::{Bound, Checkpoint, ParamId, ParamSet};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unary_value(kind: UnaryKind, x: f64) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(Tensor::scalar(x));
        let y = g.unary(kind, v);
        g.value(y).item()
    }

    #[test]
    fn elementwise_trivial_values() {
        assert_eq!(unary_value(UnaryKind::Sigmoid, 0.0), 0.5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0, 1e9]));
        let y = g.tanh(x);
        assert_eq!(g.value(y).data(), &[0.0, 1.0]);
        let l = unary_value(UnaryKind::LeakyRelu(LEAKY_SLOPE), -2.0);
        assert!((l - (-0.02)).abs() < 1e-15);
    }

    #[test]
    fn binary_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn scalar_broadcast() {
        let mut g = Graph::new();
        let a = g.param(Tensor::row(vec![1.0, 2.0, 3.0]));
        let s = g.param(Tensor::scalar(2.0));
        let p = g.mul(a, s).unwrap();
        let r = g.sum(p);
        g.backward(r).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.grad(s).item(), 6.0);
        assert_eq!(g.grad(a).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let v = g.constant(Tensor::matrix(3, 1, vec![4.0, -1.0, 2.5]).unwrap());
        let iv = g.matmul(i, v).unwrap();
        assert_eq!(g.value(iv).data(), &[4.0, -1.0, 2.5]);

        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).shape(), &[2, 1]);
        assert_eq!(g.value(ab).data(), &[3.0, 7.0]);

        assert!(g.matmul(a, iv).is_err());
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let b0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let a = g.param(a0.clone());
        let b = g.constant(b0.clone());
        let ab = g.matmul(a, b).unwrap();
        let s = g.sum(ab);
        g.backward(s).unwrap();
        // ones[2x4] * B^T: every row equals the row sums of B
        let grad = g.grad(a);
        for r in 0..2 {
            for k in 0..3 {
                let expect: f64 = b0.row_slice(k).iter().sum();
                assert!((grad.get(r, k) - expect).abs() < 1e-12);
            }
        }
        // finite-difference oracle
        let report = grad_check(
            |g, v| {
                let b = g.constant(b0.clone());
                let ab = g.matmul(v[0], b)?;
                Ok(g.sum(ab))
            },
            &[a0],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let a = g.param(Tensor::row(vec![1.0, 2.0]));
        let b = g.param(Tensor::row(vec![3.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).data(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).data(), &[1.0]);

        let parts: Vec<Var> = (0..3).map(|_| g.constant(Tensor::zeros(&[1, 4]))).collect();
        let u = g.concat(&parts, 1).unwrap();
        assert_eq!(g.value(u).shape(), &[1, 12]);

        let tall = g.constant(Tensor::zeros(&[2, 1]));
        assert!(g.concat(&[a, tall], 1).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![-7.25]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);

        let x = g.constant(Tensor::row(vec![0.4; 3]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = g.constant(Tensor::row(vec![1000.0, 0.0]));
        let y = g.softmax(x).unwrap();
        let out = g.value(y);
        assert!(out.is_finite());
        // exp(-1000) underflows to 0 in f64; the exact value is ~5e-435
        assert_eq!(out.data(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_trivial_derivatives() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 6.0);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(crate::Error::NonScalarRoot(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 8.0);
        g.zero_grad();
        assert_eq!(g.grad(x).item(), 0.0);
    }

    fn mlp_loss(g: &mut Graph, v: &[Var], x: &Tensor) -> crate::Result<Var> {
        let x = g.constant(x.clone());
        let h = g.matmul(x, v[0])?;
        let h = g.add_row(h, v[1])?;
        let h = g.tanh(h);
        let h = g.matmul(h, v[2])?;
        let h = g.add_row(h, v[3])?;
        let h = g.sigmoid(h);
        let h = g.matmul(h, v[4])?;
        let h = g.square(h);
        Ok(g.mean(h))
    }

    #[test]
    fn three_layer_mlp_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
            let params = vec![
                Tensor::randn(&[5, 6], 0.5, &mut rng),
                Tensor::randn(&[1, 6], 0.5, &mut rng),
                Tensor::randn(&[6, 3], 0.5, &mut rng),
                Tensor::randn(&[1, 3], 0.5, &mut rng),
                Tensor::randn(&[3, 2], 0.5, &mut rng),
            ];
            let report = grad_check(|g, v| mlp_loss(g, v, &x), &params, &GradCheckOptions::default())
                .unwrap();
            assert!(report.passed, "seed {seed}: {}", report.max_rel_err);
        }
    }

    #[test]
    fn batch_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let report = grad_check(
            |g, v| {
                let (y, _, _) = g.batch_norm(v[0], 1e-5)?;
                let w = g.constant(w.clone());
                let p = g.mul(y, w)?;
                let s = g.sigmoid(p);
                Ok(g.sum(s))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{}", report.max_rel_err);
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let build = |g: &mut Graph, x: Var, which: u8| -> Var {
            let a = g.tanh(x);
            let a = g.sum(a);
            let b = g.square(x);
            let b = g.sum(b);
            match which {
                0 => a,
                1 => b,
                _ => g.add(a, b).unwrap(),
            }
        };
        let grad_of = |which| {
            let mut g = Graph::new();
            let x = g.param(x0.clone());
            let r = build(&mut g, x, which);
            g.backward(r).unwrap();
            g.grad(x)
        };
        let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..4 {
            assert_eq!(gs.data()[i], ga.data()[i] + gb.data()[i]);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(xs in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let p = softmax_values(&xs);
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        }

        #[test]
        fn forward_ops_stay_finite(xs in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::row(xs.clone()));
            for kind in [UnaryKind::Sigmoid, UnaryKind::Tanh, UnaryKind::Relu,
                         UnaryKind::LeakyRelu(LEAKY_SLOPE), UnaryKind::Neg, UnaryKind::Square] {
                let y = g.unary(kind, x);
                prop_assert!(g.value(y).is_finite());
            }
            let s = g.softmax(x).unwrap();
            prop_assert!(g.value(s).is_finite());
        }
    }
}
