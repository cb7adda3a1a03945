use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{GradcheckConfig, Graph, ParamInit, ParamStore, Tensor, Var};
use crate::Result;

pub fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds a module into a fresh f64 store.
pub fn build<M>(seed: u64, f: impl FnOnce(&mut ParamInit<'_, f64>) -> Result<M>) -> (ParamStore<f64>, M) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamInit::new(&mut store, &mut rng)).unwrap();
    (store, m)
}

pub fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

/// `sum(out * r)` for a fixed random `r`, so no parameter has an
/// identically zero gradient.
pub fn probe(g: &Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let r = g.constant(random(&g.shape(out), seed));
    Ok(g.sum(g.mul(out, r)?))
}

pub fn check(store: &mut ParamStore<f64>, f: impl Fn(&Graph<f64>) -> Result<Var>) {
    let report = crate::numerics::gradcheck(store, f, GradcheckConfig::default()).unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}
