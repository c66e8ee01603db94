use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::Tensor;

/// Which optimizer (if any) owns a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Architecture weights (α).
    Arch,
    /// Operation weights.
    Weight,
    /// Non-trainable state such as normalization running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub role: Role,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Flat registry of every tensor a model owns, in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: Role, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            role,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight initialised uniformly in `±1/sqrt(fan_in)`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.add(name, Role::Weight, value)
    }

    /// Architecture vector drawn from `normal(0, std)`.
    pub fn add_alpha<R: Rng + ?Sized>(&mut self, name: impl Into<String>, len: usize, std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("non-negative std");
        let data = (0..len).map(|_| dist.sample(rng)).collect();
        self.add(name, Role::Arch, Tensor::from_vec(data))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self, role: Role) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.role == role).map(|(id, _)| id).collect()
    }

    /// Number of trainable scalars with the given role.
    pub fn count(&self, role: Role) -> usize {
        self.params.iter().filter(|p| p.role == role).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                p.grad = Some(Tensor::new(p.value.shape().to_vec(), grad.to_vec()).expect("grad matches value shape"));
            }
        }
    }

    /// Values of every tensor with `role`, concatenated in declaration order.
    pub fn snapshot(&self, role: Role) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.role == role)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Global L2 norm of the gradients held by `ids`.
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| self.params[id.0].grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, ids: &[ParamId], factor: f64) {
        for &id in ids {
            if let Some(g) = &mut self.params[id.0].grad {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}
