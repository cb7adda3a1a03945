//! Central finite-difference oracle for analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::param::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    /// Maximum elementwise relative error `|a - n| / max(|a|, |n|, 1e-8)`.
    pub tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4 }
    }
}

/// Worst disagreement found for one parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub worst_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.worst_rel_error <= self.tol)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.worst_rel_error.total_cmp(&b.worst_rel_error))
    }

    pub fn checked_scalars(&self) -> usize {
        self.params.len()
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn eval(store: &ParamStore<f64>, f: &impl Fn(&Graph<f64>) -> Result<Var>) -> Result<f64> {
    let g = Graph::inference(store);
    let v = f(&g)?;
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Oracle(format!("function output has shape {:?}", t.shape())));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(Error::Oracle(format!("function value {y} is not finite")));
    }
    Ok(y)
}

/// Compares reverse-mode gradients of the scalar `f` with central
/// differences `(f(p + eps) - f(p - eps)) / (2 eps)` for every scalar of
/// every trainable parameter in `store`. The store is restored afterwards.
pub fn gradcheck(
    store: &mut ParamStore<f64>,
    f: impl Fn(&Graph<f64>) -> Result<Var>,
    cfg: GradcheckConfig,
) -> Result<GradcheckReport> {
    let analytic = {
        let g = Graph::new(store);
        let v = f(&g)?;
        let y = g.value(v);
        if y.len() != 1 || !y.item().is_finite() {
            return Err(Error::Oracle(format!("function value {:?} is not a finite scalar", y.data())));
        }
        g.backward(v)?.params().clone()
    };
    let names: Vec<String> = store.iter().filter(|p| !p.frozen).map(|p| p.name.clone()).collect();
    let mut report = Vec::with_capacity(names.len());
    for name in names {
        let n = store.get(&name).map(|p| p.value.len()).unwrap_or(0);
        let mut worst = ParamCheck {
            name: name.clone(),
            worst_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let orig = store.get(&name).expect("param").value.data()[i];
            let set = |store: &mut ParamStore<f64>, v: f64| {
                store.get_mut(&name).expect("param").value.data_mut()[i] = v;
            };
            set(store, orig + cfg.eps);
            let fp = eval(store, &f);
            set(store, orig - cfg.eps);
            let fm = eval(store, &f);
            set(store, orig);
            let numeric = (fp? - fm?) / (2.0 * cfg.eps);
            let a = analytic.get(&name).map(|t| t.data()[i]).unwrap_or(0.0);
            let err = rel_error(a, numeric);
            if err > worst.worst_rel_error || i == 0 {
                worst = ParamCheck {
                    name: name.clone(),
                    worst_rel_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        report.push(worst);
    }
    Ok(GradcheckReport {
        tol: cfg.tol,
        params: report,
    })
}

/// Overwrites every parameter with uniform noise in `[-bound, bound]`,
/// so checks do not sit at special (zero or identity) initializations.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, bound: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
    }
}
