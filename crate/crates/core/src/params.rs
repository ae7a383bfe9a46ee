//! Named learnable parameters, their gradient accumulators, and the AdamW
//! update rule used by the training loop.

use std::collections::BTreeMap;

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Flat registry of model parameters; ids are stable insertion indices and
/// names are unique dotted paths (e.g. `camera.backbone.stage0.w`).
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Fan-in-scaled uniform init: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn add_fan_in_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<T>) {
        self.entries[id.0].grad.add_assign(delta);
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad.fill(T::zero());
        }
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: T,
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step_count: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr: T::of_f64(lr),
            weight_decay: T::of_f64(weight_decay),
            beta1: T::of_f64(0.9),
            beta2: T::of_f64(0.999),
            eps: T::of_f64(1e-8),
            step_count: 0,
            m: params.iter().map(|(_, e)| Tensor::zeros(e.value.shape())).collect(),
            v: params.iter().map(|(_, e)| Tensor::zeros(e.value.shape())).collect(),
        }
    }

    /// One update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();
        for (i, entry) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = entry.grad.data();
            let w = entry.value.data_mut();
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] = w[j] - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * w[j]);
            }
        }
    }

    pub fn state_tensors(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore_state(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, step_count: u64) {
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }
}
