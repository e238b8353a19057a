//! Named parameter storage and binding into a [`Graph`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// uniform(−1/√fan_in, +1/√fan_in)
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameters keyed by name, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    /// Initialise every spec from one seeded stream, in name order.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for s in sorted {
            let n = s.numel();
            let data: Vec<T> = match s.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n)
                        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                        .collect()
                }
                Init::Ones => vec![T::one(); n],
                Init::Zeros => vec![T::zero(); n],
            };
            store.insert(&s.name, Tensor::new(&s.shape, data).expect("spec shape"));
        }
        store
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Lazily registers store entries as trainable leaves of one graph.
pub struct Binder<'a, T: Scalar> {
    graph: &'a Graph<T>,
    store: Option<&'a ParamStore<T>>,
    bound: RefCell<BTreeMap<String, Var>>,
    trainable: bool,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            graph,
            store: Some(store),
            bound: RefCell::new(BTreeMap::new()),
            trainable: true,
        }
    }

    /// Binder over variables that already live in `graph`, e.g. leaves
    /// supplied by a gradient check.
    pub fn preset(graph: &'a Graph<T>, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            graph,
            store: None,
            bound: RefCell::new(vars.into_iter().collect()),
            trainable: true,
        }
    }

    /// Binder whose parameters are recorded as constants (no gradients).
    pub fn frozen(graph: &'a Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(graph, store)
        }
    }

    pub fn graph(&self) -> &'a Graph<T> {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self
            .store
            .and_then(|s| s.get(name))
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .clone();
        let v = if self.trainable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Every parameter bound so far.
    pub fn bound(&self) -> BTreeMap<String, Var> {
        self.bound.borrow().clone()
    }
}
