//! Helpers shared by unit tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradcheck, Graph, Var, DEFAULT_STEP};
use crate::params::{Binder, ParamSpec, ParamStore};
use crate::tensor::Tensor;
use crate::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Contract `y` with a fixed random tensor so every output entry matters.
pub fn probe(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_tensor(&mut rng(seed), &g.shape(y)));
    Ok(g.sum(g.mul(y, w)?))
}

/// Gradcheck `f` over every parameter of `store`, bound by name.
pub fn gradcheck_store<F>(store: &ParamStore<f64>, f: F) -> f64
where
    F: Fn(&Binder<f64>) -> Result<Var>,
{
    let names: Vec<String> = store.names().cloned().collect();
    let values: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let report = gradcheck(&values, DEFAULT_STEP, |g, vars| {
        let p = Binder::preset(g, names.iter().cloned().zip(vars.iter().copied()));
        f(&p)
    })
    .unwrap();
    report.max_rel_error
}

pub fn store(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    ParamStore::init(specs, seed)
}
