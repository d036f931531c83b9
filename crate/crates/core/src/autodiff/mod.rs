//! Reverse-mode differentiation over dense 64-bit matrices, the layers built
//! on it, and the AdamW optimizer.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use graph::{Graph, Groups, Rulebook, SparseMix, Var};
pub use nn::{Ctx, Linear, Mlp, MlpSpec, ParamGrads, ParamId, ParamStore};
pub use optim::{adamw_step, AdamWConfig, AdamWState, StepOutcome};
pub use tensor::{matmul, Tensor};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::gradcheck::{check_gradients, DEFAULT_STEP};
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn matmul_bias_relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = [rand_t(&mut rng, 4, 3), rand_t(&mut rng, 3, 5), rand_t(&mut rng, 1, 5)];
        let rep = check_gradients(
            &ins,
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let y = g.add_bias(y, v[2])?;
                Ok(g.relu(y))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.max_rel_error() < TOL, "{:?}", rep.rel_errors);
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = [rand_t(&mut rng, 3, 4), rand_t(&mut rng, 3, 4), rand_t(&mut rng, 3, 2)];
        let rep = check_gradients(
            &ins,
            |g, v| {
                let a = g.mul(v[0], v[1])?;
                let b = g.sub(a, v[1])?;
                let c = g.add(b, v[0])?;
                let s = g.sigmoid(c);
                let cat = g.concat_cols(&[s, v[2]])?;
                let r = g.reshape(cat, 2, 9)?;
                let sc = g.scale(r, 0.7);
                let sq = g.mul(sc, sc)?;
                Ok(g.mean(sq))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.max_rel_error() < TOL, "{:?}", rep.rel_errors);
    }

    #[test]
    fn mix_and_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = [rand_t(&mut rng, 5, 3), rand_t(&mut rng, 2 * 3, 4)];
        let book = Arc::new(Rulebook { n_in: 5, n_out: 3, pairs: vec![vec![(0, 0), (1, 0), (4, 2)], vec![(2, 1), (3, 0), (1, 2)]] });
        let mut mix = SparseMix::new();
        mix.push_row([(0, 0.3), (2, 0.7)]);
        mix.push_row([(1, 1.0)]);
        mix.push_row([]);
        let mix = Arc::new(mix);
        let rep = check_gradients(
            &ins,
            |g, v| {
                let y = g.conv(v[0], v[1], book.clone())?;
                let m = g.mix(y, mix.clone())?;
                let sq = g.mul(m, m)?;
                Ok(g.sum(sq))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.max_rel_error() < TOL, "{:?}", rep.rel_errors);
    }

    #[test]
    fn max_pool_routes_to_argmax_with_low_index_ties() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[1.0, 5.0], [3.0, 5.0], [2.0, 0.0]]).unwrap());
        let mut groups = Groups::new();
        groups.push_group([2, 1, 0]);
        groups.push_group([]);
        let y = g.max_pool(x, Arc::new(groups)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0, 0.0, 0.0]);
        let s = g.sum(y);
        let grads = g.backward(s);
        // column 0: argmax row 1; column 1: tie between rows 0 and 1 -> row 0
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = [rand_t(&mut rng, 6, 3)];
        let mut groups = Groups::new();
        groups.push_group([0, 1, 2]);
        groups.push_group([3, 5]);
        groups.push_group([]);
        let groups = Arc::new(groups);
        let rep = check_gradients(
            &ins,
            |g, v| {
                let y = g.max_pool(v[0], groups.clone())?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.max_rel_error() < TOL, "{:?}", rep.rel_errors);
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Tensor::from_vec(2, 3, (0..6).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let target = rand_t(&mut rng, 2, 3);
        for which in 0..4 {
            let rep = check_gradients(
                std::slice::from_ref(&p),
                |g, v| match which {
                    0 => g.focal_loss(v[0], &labels, 0.25, 2.0),
                    1 => g.bce_loss(v[0], &labels),
                    2 => g.focal_loss_weighted(v[0], &labels, &[1.0, 0.0, 2.0, 1.0, 1.0, 0.0], 3.0, 0.25, 2.0),
                    _ => {
                        let l = g.smooth_l1(v[0], &target)?;
                        Ok(g.sum(l))
                    }
                },
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(rep.max_rel_error() < TOL, "loss {which}: {:?}", rep.rel_errors);
        }
    }

    #[test]
    fn loss_values() {
        let mut g = Graph::new();
        let half = g.constant(Tensor::scalar(0.5));
        let f = g.focal_loss(half, &[1.0], 0.25, 2.0).unwrap();
        assert_abs_diff_eq!(g.value(f).item(), 0.25 * 0.25 * 2f64.ln(), epsilon = 1e-15);
        let b = g.bce_loss(half, &[1.0]).unwrap();
        assert_abs_diff_eq!(g.value(b).item(), 2f64.ln(), epsilon = 1e-15);

        let conf = g.constant(Tensor::from_rows(&[[1.0 - 1e-12, 1e-12]]).unwrap());
        let f = g.focal_loss(conf, &[1.0, 0.0], 0.25, 2.0).unwrap();
        assert!(g.value(f).item() < 1e-14);
        let b = g.bce_loss(conf, &[1.0, 0.0]).unwrap();
        assert!(g.value(b).item() < 1.1e-7);

        let pred = g.constant(Tensor::from_rows(&[[0.0, 0.5, 2.0, -2.0]]).unwrap());
        let l = g.smooth_l1(pred, &Tensor::zeros(1, 4)).unwrap();
        assert_eq!(g.value(l).data(), &[0.0, 0.125, 1.5, 1.5]);
    }

    #[test]
    fn non_binary_labels_rejected() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::scalar(0.3));
        assert!(g.focal_loss(p, &[0.5], 0.25, 2.0).is_err());
        assert!(g.bce_loss(p, &[2.0]).is_err());
    }

    #[test]
    fn backward_is_linear_in_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rand_t(&mut rng, 3, 3);
        let run = |mode: u8| {
            let mut g = Graph::new();
            let x = g.param(x0.clone());
            let a = g.mul(x, x).unwrap();
            let a = g.sum(a);
            let s = g.sigmoid(x);
            let b = g.mean(s);
            let out = match mode {
                0 => g.add(a, b).unwrap(),
                1 => a,
                _ => b,
            };
            g.backward(out).get(x).unwrap().clone()
        };
        let (both, ga, gb) = (run(0), run(1), run(2));
        for i in 0..9 {
            assert_abs_diff_eq!(both.data()[i], ga.data()[i] + gb.data()[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(f64::INFINITY));
        let _ = g.scale(x, 0.0);
        assert!(g.check_finite().is_err());
        assert!(!g.diagnostics().is_empty());
    }
}
