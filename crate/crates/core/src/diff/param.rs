//! Named flat parameter vectors with gradient accumulators.

use crate::num::Real;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub values: Vec<T>,
    pub grad: Vec<T>,
}

/// Registry for every optimizable parameter vector. Gradients accumulate
/// additively across backward passes until `zero_grads`.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, values: Vec<T>) -> ParamId {
        let id = ParamId(self.params.len() as u32);
        let grad = vec![T::zero(); values.len()];
        self.params.push(Parameter {
            name: name.into(),
            values,
            grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.index()].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(|i| ParamId(i as u32))
    }

    pub fn values(&self, id: ParamId) -> &[T] {
        &self.params[id.index()].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.index()].values
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.params[id.index()].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.index()].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = T::zero();
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len() as u32).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i as u32), p))
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Euclidean norm of all accumulated gradients (diagnostics).
    pub fn grad_norm(&self) -> T {
        let mut s = T::zero();
        for p in &self.params {
            for &g in &p.grad {
                s += g * g;
            }
        }
        s.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_match_length_and_zero() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.register("w", vec![1.0, 2.0, 3.0]);
        assert_eq!(ps.grad(id).len(), ps.values(id).len());
        ps.grad_mut(id)[1] = 4.0;
        ps.zero_grads();
        assert!(ps.grad(id).iter().all(|&g| g == 0.0));
        assert_eq!(ps.find("w"), Some(id));
        assert_eq!(ps.find("nope"), None);
    }
}
