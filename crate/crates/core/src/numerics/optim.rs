//! Fixed-step gradient descent with global-norm clipping.

use super::graph::Gradients;
use super::param::ParamStore;
use super::scalar::Scalar;

/// Applies `p -= lr * clip(grad)` to every trainable parameter with a
/// gradient, where the whole gradient is rescaled to norm at most
/// `max_norm`. Returns the norm before clipping.
pub fn clipped_step<S: Scalar>(store: &mut ParamStore<S>, grads: &Gradients<S>, lr: f64, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    let factor = S::lit(lr * scale);
    for p in store.iter_mut().filter(|p| !p.frozen) {
        if let Some(g) = grads.param(&p.name) {
            for (v, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *v -= factor * d;
            }
        }
    }
    norm
}
