//! Named learnable parameters and the SGD optimizer that updates them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Constant(f64),
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    /// He-normal style fan-in scaling, drawn uniform with matching variance.
    KaimingUniform { fan_in: usize },
    /// `scale * I` for square matrices / `[C, C, 1, 1]` kernels.
    Identity(f64),
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Constant(v) => vec![T::of(v); n],
            Init::Uniform(a) => (0..n).map(|_| T::of(self.rng.gen_range(-a..=a))).collect(),
            Init::KaimingUniform { fan_in } => {
                let a = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::of(self.rng.gen_range(-a..=a))).collect()
            }
            Init::Identity(scale) => {
                let rows = shape[0];
                let cols = n / rows;
                let mut d = vec![T::zero(); n];
                for i in 0..rows.min(cols) {
                    d[i * cols + i] = T::of(scale);
                }
                d
            }
        };
        self.names.push(name.to_string());
        self.values
            .push(Tensor::new(shape, data).expect("init matches shape"));
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        digest_tensors(self.iter())
    }
}

pub fn digest_tensors<'a, T: Scalar>(items: impl Iterator<Item = (&'a str, &'a Tensor<T>)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_f64_lossy().to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// SGD with momentum and L2 weight decay (decoupled from nothing; the decay
/// term is added to the gradient as in the classic formulation).
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: T::of(momentum),
            weight_decay: T::of(weight_decay),
            velocity: Vec::new(),
        }
    }

    /// Applies one update with the given per-parameter gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: T) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads {
            let p = &mut store.values[id.0];
            let v = self.velocity[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Poly learning-rate decay: `base * (1 - iter / max_iter)^power`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 || iter >= max_iter {
        return 0.0;
    }
    base * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// Sums per-parameter gradients from several backward passes, in order.
pub fn accumulate_grads<T: Scalar>(acc: &mut Vec<(ParamId, Tensor<T>)>, more: Vec<(ParamId, Tensor<T>)>) {
    for (id, g) in more {
        match acc.iter_mut().find(|(i, _)| *i == id) {
            Some((_, a)) => a.add_assign(&g),
            None => acc.push((id, g)),
        }
    }
}
