use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Tensor, Var};

/// Gradient buffers keyed by parameter name.
pub type Gradients = BTreeMap<String, Vec<f64>>;

/// Named model parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

/// Graph handles for a [`ParamSet`] bound into one [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .0
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.0.get(name).copied()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
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

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Records every parameter as a leaf; `track` decides whether gradients flow.
    pub fn bind(&self, graph: &mut Graph, track: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|(name, t)| {
                    let mut t = t.clone();
                    t.set_requires_grad(track);
                    (name.clone(), graph.leaf(&t))
                })
                .collect(),
        )
    }

    /// Reads gradients back out of `graph`; unreached parameters get zeros.
    pub fn gradients(&self, graph: &Graph, bound: &Bound) -> Gradients {
        self.params
            .iter()
            .map(|(name, t)| {
                let grad = graph
                    .grad(bound.var(name))
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
                (name.clone(), grad)
            })
            .collect()
    }
}

/// Uniform `(-s, s)` with `s = 1/sqrt(fan_in)`.
pub(crate) fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-s..s);
    }
    t.set_requires_grad(true);
    t
}

pub(crate) fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).requiring_grad()
}

pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a call-site index for per-site dropout streams.
pub fn site_seed(seed: u64, site: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ site.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
