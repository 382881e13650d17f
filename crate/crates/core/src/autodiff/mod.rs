//! Dense `f64` matrices with a reverse-mode tape, sized for a micro transformer.

mod adam;
mod graph;
mod matrix;
mod params;

pub mod gradcheck;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{DropoutKey, Graph, NodeId, LAYER_NORM_EPS};
pub use matrix::{log_sum_exp, Matrix};
pub use params::{ParamGrads, ParamId, ParamStore, Parameter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward called on a node that does not depend on any trainable parameter")]
    Detached,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parameter error: {0}")]
    Parameter(String),
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check_gradients;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Matrix::row_vector(&[0.0, 0.0]));
        let y = g.row_softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Matrix::row_vector(&[3.0; 4]));
        let gain = g.constant(Matrix::filled(1, 4, 1.0));
        let bias = g.constant(Matrix::zeros(1, 4));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn soft_cross_entropy_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let half = 0.5f64.ln();
        let lp = g.constant(Matrix::row_vector(&[half, half]));
        let l = g.soft_cross_entropy(&[1.0, 0.0], lp).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let lp = g.constant(Matrix::row_vector(&[half, 0.25f64.ln()]));
        let l = g.soft_cross_entropy(&[0.5, 0.5], lp).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * 4f64.ln();
        assert!((g.value(l).item() - want).abs() < 1e-15);
        assert!((want - 1.039_720_770_839_917_9).abs() < 1e-15);

        let lp = g.constant(Matrix::row_vector(&[0.0, f64::NEG_INFINITY]));
        let l = g.soft_cross_entropy(&[1.0, 0.0], lp).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        assert!(g.soft_cross_entropy(&[1.0], lp).is_err());
        assert!(g.soft_cross_entropy(&[0.5, 0.4], lp).is_err());
    }

    #[test]
    fn backward_through_scale_and_sum() {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::filled(2, 3, 0.7), true).unwrap();
        let mut g = Graph::new(&store);
        let x = g.param(p);
        let s = g.scale(x, 3.0).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        store.accumulate(&grads);
        assert_eq!(store.get(p).grad, Matrix::filled(2, 3, 3.0));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::row_vector(&[0.3, -1.2]), true).unwrap();
        let mut g = Graph::new(&store);
        let x = g.param(p);
        let y = g.scale(x, 2.0).unwrap();
        let stopped = g.stop_gradient(y);
        assert_eq!(g.value(stopped), g.value(y));
        let l = g.sum(stopped).unwrap();
        assert_eq!(g.backward(l).unwrap_err(), AutodiffError::Detached);

        // d/dθ [sg(f(θ)) · g(θ)] = sg(f(θ)) · g'(θ) with f = θ², g = 3θ.
        let mut g = Graph::new(&store);
        let x = g.param(p);
        let f = g.mul(x, x).unwrap();
        let f = g.stop_gradient(f);
        let gx = g.scale(x, 3.0).unwrap();
        let prod = g.mul(f, gx).unwrap();
        let l = g.sum(prod).unwrap();
        let grads = g.backward(l).unwrap();
        let got = grads.get(p).unwrap();
        for (i, &t) in [0.3f64, -1.2].iter().enumerate() {
            assert!((got.data()[i] - t * t * 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::filled(2, 2, 0.5), false).unwrap();
        let v = store.add("v", Matrix::filled(1, 2, 0.1), true).unwrap();
        let mut g = Graph::new(&store);
        let (wn, vn) = (g.param(w), g.param(v));
        let y = g.matmul_t(vn, wn).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w).is_none());
        store.accumulate(&grads);
        assert!(store.get(w).grad.data().iter().all(|&x| x == 0.0));
        assert!(store.get(v).grad.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn shape_errors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Matrix::zeros(2, 3));
        let b = g.constant(Matrix::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(AutodiffError::Shape(_))));
        assert!(g.matmul_t(a, b).is_ok());
        assert!(matches!(g.dropout(a, 1.0), Err(AutodiffError::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Matrix::row_vector(&[f64::MAX]));
        assert_eq!(g.scale(a, 10.0), Err(AutodiffError::NonFinite("scale")));
    }

    /// Builds a 2-layer MLP with a soft cross-entropy head over every primitive.
    fn mlp_loss(store: &ParamStore, ids: &[ParamId], key: Option<DropoutKey>) -> (f64, Option<ParamGrads>) {
        let mut g = match key {
            Some(k) => Graph::training(store, k),
            None => Graph::new(store),
        };
        let n = |g: &mut Graph, i: usize| g.param(ids[i]);
        let emb = n(&mut g, 0);
        let x = g.embedding(emb, &[2, 0, 1, 2]).unwrap();
        let (ln_g, ln_b) = (n(&mut g, 1), n(&mut g, 2));
        let x = g.layer_norm(x, ln_g, ln_b).unwrap();
        let w1 = n(&mut g, 3);
        let h = g.matmul_t(x, w1).unwrap();
        let b1 = n(&mut g, 4);
        let h = g.add_row(h, b1).unwrap();
        let h = g.relu(h).unwrap();
        let h = g.dropout(h, 0.25).unwrap();
        let w2 = n(&mut g, 5);
        let y = g.matmul(h, w2).unwrap();
        let att = g.matmul_t(y, y).unwrap();
        let att = g.scale(att, 0.5).unwrap();
        let att = g.row_softmax(att).unwrap();
        let mixed = g.matmul(att, y).unwrap();
        let left = g.slice_cols(mixed, 0, 2).unwrap();
        let right = g.slice_cols(mixed, 2, 1).unwrap();
        let tr = g.transpose(right).unwrap();
        let tt = g.transpose(tr).unwrap();
        let cat = g.concat_cols(&[tt, left]).unwrap();
        let sq = g.mul(cat, cat).unwrap();
        let sum_y = g.add(cat, sq).unwrap();
        let lp = g.row_log_softmax(sum_y).unwrap();
        let scores = g.segment_pick_sum(lp, &[0, 2, 1, 1], &[1, 3]).unwrap();
        let norm = g.row_log_softmax(scores).unwrap();
        let ce = g.soft_cross_entropy(&[0.3, 0.7], norm).unwrap();
        let loss = g.value(ce).item();
        (loss, Some(g.backward(ce).unwrap()))
    }

    fn mlp_store(seed: u64) -> (ParamStore, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let shapes = [(3, 4), (1, 4), (1, 4), (5, 4), (1, 5), (5, 3)];
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| store.add(&format!("p{i}"), random(&mut rng, r, c), true).unwrap())
            .collect();
        (store, ids)
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        for seed in 0..5 {
            let (mut store, ids) = mlp_store(seed);
            let key = DropoutKey { seed, step: 7 };
            let report = check_gradients(
                &mut store,
                1e-5,
                |s| mlp_loss(s, &ids, Some(key)).0,
                |s| mlp_loss(s, &ids, Some(key)).1.unwrap(),
            );
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn dropout_is_deterministic_per_key() {
        let (store, ids) = mlp_store(3);
        let key = DropoutKey { seed: 1, step: 2 };
        let a = mlp_loss(&store, &ids, Some(key)).0;
        let b = mlp_loss(&store, &ids, Some(key)).0;
        assert_eq!(a.to_bits(), b.to_bits());
        let c = mlp_loss(&store, &ids, Some(DropoutKey { seed: 1, step: 3 })).0;
        assert_ne!(a, c);
        let eval = mlp_loss(&store, &ids, None).0;
        assert_ne!(a, eval);
    }

    #[test]
    fn adam_first_step() {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::scalar(1.0), true).unwrap();
        store.get_mut(p).grad = Matrix::scalar(1.0);
        let mut state = AdamState::new();
        adam_step(&mut store, &mut state, 0.1, AdamConfig::default()).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + ε).
        let want = 1.0 - 0.1 / (1.0 + 1e-6);
        assert!((store.value(p).item() - want).abs() < 1e-15);
        assert!((store.value(p).item() - 0.9).abs() < 1e-6);
        assert_eq!(store.get(p).grad.item(), 1.0, "grads are left to the caller");
    }

    #[test]
    fn adam_zero_grad_and_bad_lr() {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::row_vector(&[0.5, -2.0]), true).unwrap();
        let mut state = AdamState::new();
        adam_step(&mut store, &mut state, 0.1, AdamConfig::default()).unwrap();
        assert_eq!(store.value(p).data(), &[0.5, -2.0]);
        assert!(adam_step(&mut store, &mut state, 0.0, AdamConfig::default()).is_err());
        assert!(adam_step(&mut store, &mut state, -1.0, AdamConfig::default()).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let make = || {
            let mut s = ParamStore::new();
            let p = s.add("p", Matrix::row_vector(&[0.1, 0.2, 0.3]), true).unwrap();
            (s, p)
        };
        let (mut a, pa) = make();
        let (mut b, pb) = make();
        let (mut sa, mut sb) = (AdamState::new(), AdamState::new());
        for step in 0..5 {
            let g = Matrix::row_vector(&[0.5, -0.25 * step as f64, 1e-3]);
            a.get_mut(pa).grad = g.clone();
            b.get_mut(pb).grad = g;
            adam_step(&mut a, &mut sa, 0.01, AdamConfig::default()).unwrap();
            adam_step(&mut b, &mut sb, 0.01, AdamConfig::default()).unwrap();
        }
        assert_eq!(a.value(pa), b.value(pb));
    }

    proptest! {
        #[test]
        fn softmax_rows_normalize(values in prop::collection::vec(-30.0f64..30.0, 1..12)) {
            let store = ParamStore::new();
            let mut g = Graph::new(&store);
            let x = g.constant(Matrix::row_vector(&values));
            let sm = g.row_softmax(x).unwrap();
            let lsm = g.row_log_softmax(x).unwrap();
            let total: f64 = g.value(sm).data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (s, l) in g.value(sm).data().iter().zip(g.value(lsm).data()) {
                prop_assert!((s.ln() - l).abs() < 1e-12);
            }
        }

        #[test]
        fn primitive_gradients_match_finite_differences(seed in 0u64..1000) {
            let (mut store, ids) = mlp_store(seed);
            let report = check_gradients(
                &mut store,
                1e-5,
                |s| mlp_loss(s, &ids, None).0,
                |s| mlp_loss(s, &ids, None).1.unwrap(),
            );
            prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
        }
    }
}
