//! Spatial key/value memory: attention read, threshold forgetting and
//! append-only updates.

use serde::{Deserialize, Serialize};

use crate::attention::Mlp;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamInit, Scalar, Tensor, Var};

/// Retention rule: memory token `i` survives when at least
/// `fraction_threshold * N` of the `N` query tokens give it an attention
/// weight of at least `weight_threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgetPolicy {
    pub weight_threshold: f64,
    pub fraction_threshold: f64,
}

impl Default for ForgetPolicy {
    fn default() -> Self {
        Self {
            weight_threshold: 5e-4,
            fraction_threshold: 0.05,
        }
    }
}

impl ForgetPolicy {
    /// A weight threshold of zero is accepted and keeps every token.
    pub fn validate(&self) -> Result<()> {
        if !(self.weight_threshold >= 0.0) || !self.weight_threshold.is_finite() {
            return Err(Error::Config(format!("weight threshold {} must be >= 0", self.weight_threshold)));
        }
        if !(self.fraction_threshold > 0.0 && self.fraction_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "fraction threshold {} must lie in (0, 1]",
                self.fraction_threshold
            )));
        }
        Ok(())
    }

    /// Retention mask for an `[N, S]` attention matrix.
    pub fn retained<S: Scalar>(&self, weights: &Tensor<S>) -> Result<Vec<bool>> {
        let (n, s) = match *weights.shape() {
            [n, s] => (n, s),
            _ => return Err(Error::dim("memory_forget", weights.shape(), &[])),
        };
        let theta = S::lit(self.weight_threshold);
        let mut counts = vec![0usize; s];
        for row in weights.data().chunks(s.max(1)).take(n) {
            for (c, &w) in counts.iter_mut().zip(row) {
                if w >= theta {
                    *c += 1;
                }
            }
        }
        let needed = self.fraction_threshold * n as f64;
        Ok(counts.into_iter().map(|c| c as f64 >= needed).collect())
    }
}

/// Key/value token banks held between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryCache<S> {
    pub keys: Tensor<S>,
    pub values: Tensor<S>,
}

impl<S: Scalar> MemoryCache<S> {
    pub fn empty(dim: usize) -> Self {
        Self {
            keys: Tensor::zeros(&[0, dim]),
            values: Tensor::zeros(&[0, dim]),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.keys.shape()[1]
    }

    /// Places the cache on `g` as constants (no gradient into past frames).
    pub fn lift(&self, g: &Graph<'_, S>) -> CacheVars {
        CacheVars {
            keys: g.constant(self.keys.clone()),
            values: g.constant(self.values.clone()),
        }
    }
}

/// A cache living on a graph, so reads of it stay differentiable.
#[derive(Clone, Copy, Debug)]
pub struct CacheVars {
    pub keys: Var,
    pub values: Var,
}

impl CacheVars {
    pub fn empty<S: Scalar>(g: &Graph<'_, S>, dim: usize) -> Self {
        MemoryCache::<S>::empty(dim).lift(g)
    }

    pub fn len<S: Scalar>(&self, g: &Graph<'_, S>) -> usize {
        g.shape(self.keys)[0]
    }

    pub fn to_cache<S: Scalar>(&self, g: &Graph<'_, S>) -> MemoryCache<S> {
        MemoryCache {
            keys: (*g.value(self.keys)).clone(),
            values: (*g.value(self.values)).clone(),
        }
    }
}

/// Result of a memory read.
#[derive(Clone, Copy, Debug)]
pub struct MemoryRead {
    /// `W * M_v + f_prev`, `[N, d]`.
    pub features: Var,
    /// Row-stochastic `[N, S]` weights (`[N, 0]` for an empty cache).
    pub weights: Var,
}

/// `W = softmax(f_prev M_k^T / sqrt(d))` over memory tokens, then
/// `f_mem = W M_v + f_prev`.
pub fn memory_read<S: Scalar>(g: &Graph<'_, S>, f_prev: Var, cache: &CacheVars) -> Result<MemoryRead> {
    let fs = g.shape(f_prev);
    let ks = g.shape(cache.keys);
    let (n, d) = match *fs {
        [n, d] => (n, d),
        _ => return Err(Error::dim("memory_read", &fs, &ks)),
    };
    if ks.len() != 2 || ks[1] != d || g.shape(cache.values) != ks {
        return Err(Error::dim("memory_read", &fs, &ks));
    }
    if ks[0] == 0 {
        return Ok(MemoryRead {
            features: f_prev,
            weights: g.constant(Tensor::zeros(&[n, 0])),
        });
    }
    let logits = g.matmul_nt(f_prev, cache.keys)?;
    let logits = g.scale(logits, S::one() / S::lit(d as f64).sqrt());
    let weights = g.softmax(logits)?;
    let read = g.matmul(weights, cache.values)?;
    Ok(MemoryRead {
        features: g.add(read, f_prev)?,
        weights,
    })
}

/// Drops memory tokens the policy deems irrelevant. Keys and values are
/// filtered with the same mask and keep their order.
pub fn memory_forget<S: Scalar>(
    g: &Graph<'_, S>,
    cache: &CacheVars,
    weights: &Tensor<S>,
    policy: &ForgetPolicy,
) -> Result<(CacheVars, Vec<bool>)> {
    let s = cache.len(g);
    let cols = weights.shape().get(1).copied().unwrap_or(0);
    if weights.rank() != 2 || cols != s {
        return Err(Error::StaleAttention { got: cols, expected: s });
    }
    let mask = policy.retained(weights)?;
    if mask.iter().all(|&m| m) {
        return Ok((*cache, mask));
    }
    let keep: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    Ok((
        CacheVars {
            keys: g.select_rows(cache.keys, &keep)?,
            values: g.select_rows(cache.values, &keep)?,
        },
        mask,
    ))
}

/// Tokenwise encoders producing new memory entries.
#[derive(Clone, Debug)]
pub struct MemoryEncoders {
    /// Output layer has no bias: a shared offset on all keys cancels in
    /// the softmax. Its init gain of 2 keeps fresh-cache attention from
    /// being nearly uniform.
    pub key: Mlp,
    pub value: Mlp,
}

impl MemoryEncoders {
    pub fn init<S: Scalar>(init: &mut ParamInit<'_, S>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            key: Mlp::init(init, &format!("{name}.key"), (dim, dim, dim), false, 2.0)?,
            value: Mlp::init(init, &format!("{name}.value"), (dim, dim, dim), true, 1.0)?,
        })
    }
}

/// Appends `key(f_mem)` and `value(f_prev_out)` to the (already filtered) cache.
pub fn memory_update<S: Scalar>(
    g: &Graph<'_, S>,
    cache: &CacheVars,
    f_mem: Var,
    f_prev_out: Var,
    encoders: &MemoryEncoders,
) -> Result<CacheVars> {
    let d = g.shape(cache.keys)[1];
    for v in [f_mem, f_prev_out] {
        let s = g.shape(v);
        if s.len() != 2 || s[1] != d || s[1] != encoders.key.fc1.inputs {
            return Err(Error::dim("memory_update", &s, &[d]));
        }
    }
    let dk = encoders.key.forward(g, f_mem)?;
    let dv = encoders.value.forward(g, f_prev_out)?;
    Ok(CacheVars {
        keys: g.concat(&[cache.keys, dk], 0)?,
        values: g.concat(&[cache.values, dv], 0)?,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::ParamStore;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn empty_cache_read_is_pass_through() {
        let g = Graph::<f64>::standalone();
        let f = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let cache = CacheVars::empty(&g, 3);
        let r = memory_read(&g, f, &cache).unwrap();
        assert_eq!(r.features, f);
        assert_eq!(g.shape(r.weights), vec![2, 0]);
    }

    #[test]
    fn singleton_cache_read_adds_the_value() {
        let g = Graph::<f64>::standalone();
        let f = g.constant(t(&[2, 2], &[1., 2., -3., 0.5]));
        let cache = CacheVars {
            keys: g.constant(t(&[1, 2], &[0.3, -0.7])),
            values: g.constant(t(&[1, 2], &[10., 20.])),
        };
        let r = memory_read(&g, f, &cache).unwrap();
        assert_eq!(g.value(r.weights).data(), &[1.0, 1.0]);
        assert_eq!(g.value(r.features).data(), &[11., 22., 7., 20.5]);
    }

    #[test]
    fn orthogonal_keys_hand_case() {
        // d = 2, keys e1 and e2, so logits are f / sqrt(2)
        let g = Graph::<f64>::standalone();
        let f = t(&[2, 2], &[2f64.sqrt() * 2f64.ln(), 0.0, 0.0, 0.0]);
        let fv = g.constant(f);
        let cache = CacheVars {
            keys: g.constant(t(&[2, 2], &[1., 0., 0., 1.])),
            values: g.constant(t(&[2, 2], &[1., 0., 0., 1.])),
        };
        let r = memory_read(&g, fv, &cache).unwrap();
        let w = g.value(r.weights);
        // row 0: softmax(ln 2, 0) = (2/3, 1/3); row 1: uniform
        let expect = [2.0 / 3.0, 1.0 / 3.0, 0.5, 0.5];
        for (a, b) in w.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let out = g.value(r.features);
        let expect = [2f64.sqrt() * 2f64.ln() + 2.0 / 3.0, 1.0 / 3.0, 0.5, 0.5];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn read_rejects_dim_mismatch() {
        let g = Graph::<f64>::standalone();
        let f = g.constant(Tensor::zeros(&[2, 3]));
        let cache = CacheVars::empty(&g, 4);
        assert!(matches!(memory_read(&g, f, &cache), Err(Error::Dimension { .. })));
    }

    #[test]
    fn forget_examples() {
        let policy = ForgetPolicy::default();
        let w = t(
            &[4, 3],
            &[1e-5, 0.3, 0.5, 1e-5, 1e-5, 0.5, 1e-5, 1e-5, 0.5, 1e-5, 1e-5, 0.5],
        );
        assert_eq!(policy.retained(&w).unwrap(), vec![false, true, true]);

        let all = Tensor::<f64>::full(&[5, 4], 0.25);
        assert!(policy.retained(&all).unwrap().iter().all(|&m| m));

        let strict = ForgetPolicy {
            weight_threshold: 0.3,
            ..policy
        };
        let g = Graph::<f64>::standalone();
        let cache = MemoryCache {
            keys: Tensor::<f64>::zeros(&[4, 2]),
            values: Tensor::zeros(&[4, 2]),
        }
        .lift(&g);
        let (after, mask) = memory_forget(&g, &cache, &all, &strict).unwrap();
        assert!(mask.iter().all(|&m| !m));
        assert_eq!(after.len(&g), 0);
    }

    #[test]
    fn forget_rejects_stale_attention() {
        let g = Graph::<f64>::standalone();
        let cache = MemoryCache {
            keys: Tensor::<f64>::zeros(&[3, 2]),
            values: Tensor::zeros(&[3, 2]),
        }
        .lift(&g);
        let w = Tensor::<f64>::full(&[2, 4], 0.25);
        assert!(matches!(
            memory_forget(&g, &cache, &w, &ForgetPolicy::default()),
            Err(Error::StaleAttention { got: 4, expected: 3 })
        ));
    }

    #[test]
    fn forget_keeps_keys_and_values_aligned() {
        let g = Graph::<f64>::standalone();
        let keys = t(&[3, 1], &[1., 2., 3.]);
        let values = t(&[3, 1], &[10., 20., 30.]);
        let cache = MemoryCache { keys, values }.lift(&g);
        let w = t(&[2, 3], &[0.5, 0.0, 0.5, 0.5, 0.0, 0.5]);
        let (after, mask) = memory_forget(&g, &cache, &w, &ForgetPolicy::default()).unwrap();
        assert_eq!(mask, vec![true, false, true]);
        let c = after.to_cache(&g);
        assert_eq!(c.keys.data(), &[1., 3.]);
        assert_eq!(c.values.data(), &[10., 30.]);
    }

    fn encoders(dim: usize) -> (ParamStore<f64>, MemoryEncoders) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = MemoryEncoders::init(&mut ParamInit::new(&mut store, &mut rng), "mem", dim).unwrap();
        (store, enc)
    }

    #[test]
    fn update_appends() {
        let (store, enc) = encoders(4);
        let g = Graph::inference(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_tokens = |n: usize| {
            g.constant(Tensor::from_vec(&[n, 4], (0..4 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        };
        let (a, b) = (rand_tokens(3), rand_tokens(3));
        let c1 = memory_update(&g, &CacheVars::empty(&g, 4), a, b, &enc).unwrap();
        assert_eq!(c1.len(&g), 3);
        let first = c1.to_cache(&g);
        let (c, d) = (rand_tokens(3), rand_tokens(3));
        let c2 = memory_update(&g, &c1, c, d, &enc).unwrap().to_cache(&g);
        assert_eq!(c2.len(), 6);
        assert_eq!(&c2.keys.data()[..12], first.keys.data());
        assert_eq!(&c2.values.data()[..12], first.values.data());
    }

    #[test]
    fn update_rejects_wrong_width() {
        let (store, enc) = encoders(4);
        let g = Graph::inference(&store);
        let bad = g.constant(Tensor::zeros(&[2, 5]));
        let cache = CacheVars::empty(&g, 4);
        assert!(memory_update(&g, &cache, bad, bad, &enc).is_err());
    }

    #[test]
    fn fresh_tokens_attract_attention_after_update() {
        let (store, enc) = encoders(8);
        let g = Graph::inference(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tok = |n: usize| {
            g.constant(Tensor::from_vec(&[n, 8], (0..8 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        };
        let (old_a, old_b) = (tok(4), tok(4));
        let cache = memory_update(&g, &CacheVars::empty(&g, 8), old_a, old_b, &enc).unwrap();
        let (f_mem, f_out) = (tok(4), tok(4));
        let cache = memory_update(&g, &cache, f_mem, f_out, &enc).unwrap();
        let s = cache.len(&g);
        let w = g.value(memory_read(&g, f_mem, &cache).unwrap().weights);
        let max_new = (0..4)
            .flat_map(|j| (4..8).map(move |i| (j, i)))
            .map(|(j, i)| w.at(&[j, i]))
            .fold(0.0, f64::max);
        assert!(max_new > 1.0 / s as f64, "max weight on new tokens {max_new}");
    }

    /// Column-first double loop, written independently of `retained`.
    fn brute_force(w: &[Vec<f64>], theta_w: f64, theta_f: f64) -> Vec<bool> {
        let n = w.len();
        let s = w.first().map_or(0, |r| r.len());
        let mut keep = Vec::new();
        for i in 0..s {
            let mut count = 0;
            for row in w.iter() {
                if row[i] >= theta_w {
                    count += 1;
                }
            }
            keep.push(count as f64 >= theta_f * n as f64);
        }
        keep
    }

    fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=16, 1usize..=32).prop_flat_map(|(n, s)| {
            let cell = prop_oneof![
                3 => 0.0f64..2e-3,
                1 => Just(5e-4),
                1 => 0.0f64..1.0,
            ];
            prop::collection::vec(prop::collection::vec(cell, s), n)
        })
    }

    fn to_tensor(w: &[Vec<f64>]) -> Tensor<f64> {
        let (n, s) = (w.len(), w[0].len());
        Tensor::from_vec(&[n, s], w.concat()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn forget_matches_brute_force(w in matrix()) {
            let policy = ForgetPolicy::default();
            let got = policy.retained(&to_tensor(&w)).unwrap();
            prop_assert_eq!(got, brute_force(&w, 5e-4, 0.05));
        }

        #[test]
        fn forget_is_monotone_in_thresholds(
            w in matrix(),
            tw in (0.0f64..1e-3, 0.0f64..1e-3),
            tf in (0.01f64..1.0, 0.01f64..1.0),
        ) {
            let wt = to_tensor(&w);
            let (lo_w, hi_w) = (tw.0.min(tw.1), tw.0.max(tw.1));
            let (lo_f, hi_f) = (tf.0.min(tf.1), tf.0.max(tf.1));
            let loose = ForgetPolicy { weight_threshold: lo_w, fraction_threshold: lo_f }.retained(&wt).unwrap();
            let tight_w = ForgetPolicy { weight_threshold: hi_w, fraction_threshold: lo_f }.retained(&wt).unwrap();
            let tight_f = ForgetPolicy { weight_threshold: lo_w, fraction_threshold: hi_f }.retained(&wt).unwrap();
            for i in 0..loose.len() {
                prop_assert!(!tight_w[i] || loose[i]);
                prop_assert!(!tight_f[i] || loose[i]);
            }
        }
    }
}
