//! Minimal dense-network substrate: tensors, a reverse-mode tape, named
//! parameters with Adam, and a checkpoint byte layout.

pub mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{Adam, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::Result;

/// Weights of one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert_glorot(&format!("{name}.w"), inputs, outputs, gain, rng)?;
        let bias = store.insert(&format!("{name}.b"), Tensor::zeros(1, outputs))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.dense(x, w, b)
    }
}

/// Stack of dense layers with tanh between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`. The last layer is initialized with
    /// `out_gain`, the rest with unit gain.
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        out_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let gain = if k + 1 == n { out_gain } else { 1.0 };
                Linear::new(store, &format!("{name}.{k}"), sizes[k], sizes[k + 1], gain, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if k + 1 < self.layers.len() {
                x = g.tanh(x);
            }
        }
        Ok(x)
    }
}

/// Central finite differences of `loss` with respect to every scalar of
/// every parameter. Uses only forward evaluations.
pub fn finite_difference_grads(
    store: &ParamStore,
    step: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> Vec<Tensor> {
    let mut probe = store.clone();
    store
        .ids()
        .map(|id| {
            let n = store.value(id).len();
            let mut grad = Tensor::zeros(store.value(id).rows(), store.value(id).cols());
            for k in 0..n {
                let orig = store.value(id).data()[k];
                probe.value_mut(id).data_mut()[k] = orig + step;
                let up = loss(&probe);
                probe.value_mut(id).data_mut()[k] = orig - step;
                let down = loss(&probe);
                probe.value_mut(id).data_mut()[k] = orig;
                grad.data_mut()[k] = (up - down) / (2.0 * step);
            }
            grad
        })
        .collect()
}

/// Largest per-coordinate relative error between two gradient sets, with
/// `floor` guarding coordinates whose magnitude is near zero.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grads_of(store: &ParamStore) -> Vec<Tensor> {
        store.ids().map(|id| store.grad(id).clone()).collect()
    }

    #[test]
    fn tanh_of_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.tanh(x);
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[4.0, 4.0, 4.0]));
        let y = g.softmax_rows(x);
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dense_with_identity_weights_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(2, 3, vec![1., -2., 3., 0.5, 0., 7.]).unwrap());
        let w = g.constant(Tensor::identity(3));
        let b = g.constant(Tensor::zeros(1, 3));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
        let c = g.constant(Tensor::zeros(3, 2));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::row(&[1.0, -2.0, 0.5])).unwrap();
        let other = store.insert("unused", Tensor::row(&[3.0])).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let sq = g.square(wv);
        let loss = g.sum(sq);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[2.0, -4.0, 1.0]);
        assert_eq!(store.grad(other).data(), &[0.0]);
        assert!(g.is_empty());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1.0, 2.0]));
        assert!(g.backward(x, &mut store).is_err());
    }

    #[test]
    fn three_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let net = Mlp::new(&mut store, "net", &[4, 6, 5, 3], 1.0, &mut rng).unwrap();
        let x = Tensor::new(7, 4, (0..28).map(|k| ((k * 37 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
        let targets: Vec<usize> = (0..7).map(|k| k % 3).collect();
        let forward = |store: &ParamStore, g: &mut Graph| {
            let xv = g.constant(x.clone());
            let logits = net.forward(g, store, xv).unwrap();
            let logp = g.log_softmax_rows(logits);
            let mut mask = Tensor::zeros(7, 3);
            for (r, &t) in targets.iter().enumerate() {
                mask.data_mut()[r * 3 + t] = -1.0;
            }
            let m = g.constant(mask);
            let picked = g.mul(logp, m).unwrap();
            g.mean(picked)
        };
        let mut g = Graph::new();
        let loss = forward(&store, &mut g);
        g.backward(loss, &mut store).unwrap();
        let analytic = grads_of(&store);
        let numeric = finite_difference_grads(&store, 1e-5, |s| {
            let mut g = Graph::new();
            let l = forward(s, &mut g);
            g.value(l).item()
        });
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let a = store.insert_glorot("a", 4, 3, 1.0, &mut rng).unwrap();
        let b = store.insert_glorot("b", 1, 3, 1.0, &mut rng).unwrap();
        let seg: std::rc::Rc<[usize]> = vec![0, 0, 1, 1].into();
        let forward = |s: &ParamStore, g: &mut Graph| {
            let av = g.param(s, a);
            let bv = g.param(s, b);
            let e = g.exp(av);
            let e = g.clamp(e, 0.0, 2.5);
            let q = g.div(e, bv).unwrap();
            let sl = g.slice_cols(q, 1, 3).unwrap();
            let c = g.concat_cols(&[sl, av]).unwrap();
            let sc = g.sum_cols(c);
            let att = g.segment_softmax(sc, seg.clone(), 2).unwrap();
            let w = g.mul(av, att).unwrap();
            let pooled = g.segment_sum(w, seg.clone(), 2).unwrap();
            let gathered = g.gather_rows(pooled, vec![1, 0, 1].into()).unwrap();
            let mx = g.maximum(gathered, bv).unwrap();
            let r = g.reshape(mx, 1, 9).unwrap();
            let sm = g.softmax_rows(r);
            let sq = g.sqrt(sm);
            let rows = g.sum_rows(sq);
            let l = g.log(rows);
            g.sum(l)
        };
        let mut g = Graph::new();
        let loss = forward(&store, &mut g);
        g.backward(loss, &mut store).unwrap();
        let numeric = finite_difference_grads(&store, 1e-6, |s| {
            let mut g = Graph::new();
            let l = forward(s, &mut g);
            g.value(l).item()
        });
        let err = max_relative_error(&grads_of(&store), &numeric, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn adam_with_zero_lr_or_zero_grad_is_a_no_op() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::row(&[1.0, 2.0])).unwrap();
        store.accumulate_grad(w, &Tensor::row(&[0.3, -0.1]));
        store.adam_step(&Adam::new(0.0));
        assert_eq!(store.value(w).data(), &[1.0, 2.0]);
        assert_eq!(store.grad(w).data(), &[0.0, 0.0]);

        let mut fresh = ParamStore::new();
        let w = fresh.insert("w", Tensor::row(&[1.0, 2.0])).unwrap();
        fresh.adam_step(&Adam::new(0.1));
        assert_eq!(fresh.value(w).data(), &[1.0, 2.0]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(5.0)).unwrap();
        let opt = Adam::new(1e-2);
        for _ in 0..10_000 {
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let shifted = g.add_scalar(wv, -3.0);
            let sq = g.square(shifted);
            let loss = g.sum(sq);
            g.backward(loss, &mut store).unwrap();
            store.adam_step(&opt);
        }
        assert!((store.value(w).item() - 3.0).abs() < 1e-2);
    }

    #[test]
    fn reparam_with_tiny_std_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let mu = g.constant(Tensor::row(&[0.7, -1.2]));
        let std = g.constant(Tensor::row(&[1e-12, 1e-12]));
        let (z, _) = g.reparam_sample(mu, std, &mut rng).unwrap();
        for (a, b) in g.value(z).data().iter().zip([0.7, -1.2]) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn reparam_rejects_non_positive_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let mu = g.constant(Tensor::row(&[0.0]));
        let std = g.constant(Tensor::row(&[0.0]));
        assert!(g.reparam_sample(mu, std, &mut rng).is_err());
    }

    #[test]
    fn reparam_sample_mean_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut g = Graph::new();
        let mu = g.constant(Tensor::full(n, 1, 1.5));
        let std = g.constant(Tensor::full(n, 1, 2.0));
        let (z, _) = g.reparam_sample(mu, std, &mut rng).unwrap();
        let mean = g.value(z).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.5).abs() < 3.0 * 2.0 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn reparam_gradient_matches_finite_differences() {
        // E[(z - 1)^2] estimated with common random numbers.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps: Vec<f64> = (0..64).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let eps = Tensor::new(64, 1, eps).unwrap();
        let mut store = ParamStore::new();
        let mu = store.insert("mu", Tensor::scalar(0.3)).unwrap();
        let log_std = store.insert("log_std", Tensor::scalar(-0.2)).unwrap();
        let forward = |s: &ParamStore, g: &mut Graph| {
            let m = g.param(s, mu);
            let ls = g.param(s, log_std);
            let sd = g.exp(ls);
            let ones = g.constant(Tensor::full(64, 1, 1.0));
            let m = g.mul(ones, m).unwrap();
            let sd = g.mul(ones, sd).unwrap();
            let z = g.reparam_with_noise(m, sd, eps.clone()).unwrap();
            let d = g.add_scalar(z, -1.0);
            let sq = g.square(d);
            g.mean(sq)
        };
        let mut g = Graph::new();
        let loss = forward(&store, &mut g);
        g.backward(loss, &mut store).unwrap();
        let numeric = finite_difference_grads(&store, 1e-5, |s| {
            let mut g = Graph::new();
            let l = forward(s, &mut g);
            g.value(l).item()
        });
        assert!(max_relative_error(&grads_of(&store), &numeric, 1e-8) < 1e-3);
    }

    use rand::Rng;

    proptest! {
        #[test]
        fn softmax_is_positive_and_normalized(x in proptest::collection::vec(-50.0f64..50.0, 1..10)) {
            let mut g = Graph::new();
            let v = g.constant(Tensor::row(&x));
            let s = g.softmax_rows(v);
            let sum: f64 = g.value(s).data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(g.value(s).data().iter().all(|&p| p > 0.0));
        }
    }
}
