use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::matrix::Matrix;
use super::scalar::Scalar;

/// Handle to a registered tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` with fan_out = rows, fan_in = cols.
    Xavier,
    Zeros,
    Ones,
    Normal(f64),
}

/// Named learnable tensors with one gradient slot each.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Matrix<F>>,
    grads: Gradients<F>,
    index: HashMap<String, ParamId>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Gradients { mats: Vec::new() },
            index: HashMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn register(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let value = self.initial_value(rows, cols, init);
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.grads.mats.push(Matrix::zeros(rows, cols));
        id
    }

    fn initial_value(&mut self, rows: usize, cols: usize, init: Init) -> Matrix<F> {
        match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, F::one()),
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols)
                    .map(|_| F::from_f64(self.rng.gen_range(-bound..bound)))
                    .collect();
                Matrix::from_vec(rows, cols, data)
            }
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("valid std");
                let data = (0..rows * cols)
                    .map(|_| F::from_f64(normal.sample(&mut self.rng)))
                    .collect();
                Matrix::from_vec(rows, cols, data)
            }
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
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

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix<F> {
        &self.values[id.0]
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<F> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix<F> {
        &self.grads.mats[id.0]
    }

    pub fn grads(&self) -> &Gradients<F> {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut Gradients<F> {
        &mut self.grads
    }

    /// Mutable access to values and gradients at once (for optimizer steps).
    pub fn values_and_grads_mut(&mut self) -> (&mut [Matrix<F>], &Gradients<F>) {
        (&mut self.values, &self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.zero();
    }

    /// A fresh zeroed gradient buffer matching every tensor.
    pub fn new_gradients(&self) -> Gradients<F> {
        Gradients {
            mats: self
                .values
                .iter()
                .map(|v| Matrix::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Scalar count of every tensor whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// `(name, rows, cols)` for each tensor in registration order.
    pub fn manifest(&self) -> Vec<(String, usize, usize)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), v.rows(), v.cols()))
            .collect()
    }

    /// Flat coordinate view, used by gradient checks.
    pub fn coordinate(&self, flat: usize) -> (ParamId, usize) {
        let mut rest = flat;
        for (i, v) in self.values.iter().enumerate() {
            if rest < v.len() {
                return (ParamId(i), rest);
            }
            rest -= v.len();
        }
        panic!("coordinate {flat} out of range");
    }

    pub fn norms(&self) -> Vec<(String, f64)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), v.norm()))
            .collect()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            grads: Gradients {
                mats: self.grads.mats.iter().map(|g| g.cast()).collect(),
            },
            index: self.index.clone(),
            seed: self.seed,
            rng: self.rng.clone(),
        }
    }
}

/// One gradient matrix per registered tensor, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    mats: Vec<Matrix<F>>,
}

impl<F: Scalar> Gradients<F> {
    #[inline]
    pub fn get(&self, id: ParamId) -> &Matrix<F> {
        &self.mats[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<F> {
        &mut self.mats[id.0]
    }

    pub fn zero(&mut self) {
        for m in &mut self.mats {
            m.fill(F::zero());
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Gradients<F>, alpha: F) {
        for (a, b) in self.mats.iter_mut().zip(&other.mats) {
            a.add_scaled(b, alpha);
        }
    }

    pub fn scale(&mut self, s: F) {
        for m in &mut self.mats {
            for x in m.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix<F>)> {
        self.mats.iter().enumerate().map(|(i, m)| (ParamId(i), m))
    }

    pub fn norm(&self) -> f64 {
        self.mats.iter().map(|m| m.norm().powi(2)).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_is_deterministic() {
        let mk = || {
            let mut s = ParamStore::<f64>::new(7);
            s.register("w", 3, 4, Init::Xavier);
            s.register("e", 5, 2, Init::Normal(0.02));
            s
        };
        let (a, b) = (mk(), mk());
        assert_eq!(a.value(ParamId(0)), b.value(ParamId(0)));
        assert_eq!(a.value(ParamId(1)), b.value(ParamId(1)));
        assert_eq!(a.num_scalars(), 22);
    }

    #[test]
    fn xavier_bound_holds() {
        let mut s = ParamStore::<f64>::new(1);
        let id = s.register("w", 10, 30, Init::Xavier);
        let bound = (6.0f64 / 40.0).sqrt();
        assert!(s.value(id).data().iter().all(|x| x.abs() <= bound));
        let b = s.register("b", 1, 10, Init::Zeros);
        assert_eq!(s.value(b).sum(), 0.0);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new(1);
        s.register("w", 1, 1, Init::Zeros);
        s.register("w", 1, 1, Init::Zeros);
    }

    #[test]
    fn every_tensor_has_a_gradient_slot() {
        let mut s = ParamStore::<f32>::new(1);
        let a = s.register("a", 2, 3, Init::Ones);
        assert_eq!(s.grad(a).shape(), (2, 3));
        assert_eq!(s.coordinate(5), (a, 5));
        assert_eq!(s.id("a"), Some(a));
        assert_eq!(s.name(a), "a");
    }
}
