//! Dense tensors, a reverse-mode tape, Adam, and a finite-difference checker.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions};
pub use kernels::logsumexp;
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{Grads, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(3.0));
        let t = Tape::new();
        let v = t.param(&store, w);
        let sq = t.mul(v, v);
        t.backward(sq, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_ref().unwrap().item(), 6.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(3.0));
        let t = Tape::new();
        let v = t.param(&store, w);
        let z = t.scale(v, 0.0);
        let c = t.add_scalar(z, 5.0);
        t.backward(c, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_ref().unwrap().item(), 0.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::matrix(1, 4, vec![0.3, -2.0, 1.7, 0.0]).unwrap());
        let t = Tape::new();
        let v = t.param(&store, w);
        let s = t.softmax_rows(v);
        let total = t.sum(s);
        t.backward(total, &mut store).unwrap();
        for g in store.get(w).grad.as_ref().unwrap().data() {
            assert!(g.abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let store = {
            let mut s = ParamStore::new();
            s.register("w", Tensor::vector(vec![1.0, 2.0]));
            s
        };
        let t = Tape::new();
        let v = t.param(&store, store.id("w").unwrap());
        assert!(matches!(t.gradients(v), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(2.0));
        for _ in 0..2 {
            let t = Tape::new();
            let v = t.param(&store, w);
            let sq = t.mul(v, v);
            t.backward(sq, &mut store).unwrap();
        }
        assert_eq!(store.get(w).grad.as_ref().unwrap().item(), 8.0);
        store.zero_grad();
        assert!(store.get(w).grad.is_none());
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::scalar(2.0));
        let b = store.register("b", Tensor::scalar(5.0));
        store.set_requires_grad(b, false);
        let t = Tape::new();
        let (va, vb) = (t.param(&store, a), t.param(&store, b));
        let p = t.mul(va, vb);
        let grads = t.gradients(p).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 5.0);
        assert!(grads.get(b).is_none());
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect())
            .unwrap()
    }

    /// Every differentiable primitive checked against finite differences.
    #[test]
    fn primitive_ops_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let a = store.register("a", random_tensor(&mut rng, &[4, 6]));
            let b = store.register("b", random_tensor(&mut rng, &[6, 3]));
            let c = store.register("c", random_tensor(&mut rng, &[5, 6]));
            let bias = store.register("bias", random_tensor(&mut rng, &[6]));
            let gamma = store.register("gamma", random_tensor(&mut rng, &[6]));
            let w = store.register("w", random_tensor(&mut rng, &[3, 6, 4]));
            let dw = store.register("dw", random_tensor(&mut rng, &[3, 6]));
            let ids: Vec<ParamId> = store.ids().collect();
            let mask = {
                let mut m = Tensor::zeros(&[4, 5]);
                m.data_mut()[3] = f64::NEG_INFINITY;
                m
            };
            let err = grad_check(&mut store, &ids, 1e-6, |t, s| {
                let (a, b, c) = (t.param(s, a), t.param(s, b), t.param(s, c));
                let (bias, gamma, w, dw) =
                    (t.param(s, bias), t.param(s, gamma), t.param(s, w), t.param(s, dw));
                let ab = t.matmul(a, b);
                let act = t.gelu(ab);
                let s1 = t.sum(t.mul(act, t.tanh(ab)));
                let anb = t.add_row(a, bias);
                let ln = t.layer_norm(anb, gamma, bias, 1e-5);
                let scores = t.matmul_nt(ln, c);
                let masked = t.add_const(scores, &mask);
                let sm = t.softmax_rows(masked);
                let lsm = t.log_softmax_rows(scores);
                let lse = t.logsumexp_rows(masked);
                let s2 = t.sum(t.mul(sm, lsm));
                let s3 = t.sum(t.silu(lse));
                let conv = t.conv1d(c, w, t.slice_cols(bias, 0, 4), 2, 1, 3);
                let s4 = t.sum(t.sigmoid(conv));
                let dconv = t.depthwise_conv1d(c, dw, gamma);
                let glu = t.glu(dconv);
                let pooled = t.mean_rows(glu);
                let norm = t.normalize_rows(t.concat_rows(&[pooled, t.slice_rows(glu, 1, 2)]), 1e-12);
                let s5 = t.sum(t.mul(norm, norm));
                let emb = t.gather_rows(c, &[0, 2, 2, 4]);
                let cat = t.concat_cols(&[emb, a]);
                let picked = t.pick(cat, &[(0, 1), (3, 7), (1, 1)]);
                let s6 = t.sum(t.exp(t.scale(picked, 0.5)));
                let s7 = t.mean(t.mean_cols(t.relu(t.sub(anb, a))));
                Ok(t.add_n(&[s1, s2, s3, s4, s5, s6, s7]))
            })
            .unwrap();
            assert!(err < 1e-6, "seed {seed}: err {err}");
        }
    }
}
