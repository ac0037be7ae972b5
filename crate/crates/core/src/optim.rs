//! Named parameters, non-trainable buffers, and SGD with momentum.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    /// Dotted module path, e.g. `mimb.alb0.q.conv.weight`.
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub momentum_buf: Vec<T>,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    index: HashMap<String, (bool, usize)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str, entry: (bool, usize)) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name, (true, self.params.len()))?;
        let n = value.numel();
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            momentum_buf: vec![T::zero(); n],
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name, (false, self.buffers.len()))?;
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        match self.index.get(name) {
            Some(&(true, i)) => Some(ParamId(i)),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.index.get(name) {
            Some(&(false, i)) => Some(BufferId(i)),
            _ => None,
        }
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Same names and layout in another precision. Momentum is carried over.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    momentum_buf: p.momentum_buf.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// One SGD step with momentum and L2 weight decay:
/// `v <- momentum*v + grad + weight_decay*w`, `w <- w - lr*v`.
/// Gradients are cleared afterwards. Fails without touching any parameter if
/// one of them has no gradient.
pub fn sgd_step<T: Scalar>(params: &mut [Parameter<T>], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::Usage(format!(
            "parameter `{}` has no gradient; run backward before sgd_step",
            p.name
        )));
    }
    let (lr, mom, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        for ((w, v), &g) in p.value.data_mut().iter_mut().zip(&mut p.momentum_buf).zip(grad.data()) {
            *v = mom * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, g: f64) -> Vec<Parameter<f64>> {
        let mut store = ParamStore::new();
        let id = store.add_param("w", Tensor::scalar(w)).unwrap();
        store.param_mut(id).grad = Some(Tensor::scalar(g));
        store.params
    }

    #[test]
    fn vanilla_step() {
        let mut p = single(1.0, 1.0);
        sgd_step(&mut p, 0.1, 0.0, 0.0).unwrap();
        assert!((p[0].value.item() - 0.9).abs() < 1e-15);
        assert!(p[0].grad.is_none());
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = single(1.0, 0.0);
        sgd_step(&mut p, 0.1, 0.9, 0.0).unwrap();
        p[0].grad = Some(Tensor::scalar(0.0));
        sgd_step(&mut p, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p[0].value.item(), 1.0);
        assert_eq!(p[0].momentum_buf, vec![0.0]);
    }

    #[test]
    fn weight_decay_only() {
        let mut p = single(1.0, 0.0);
        sgd_step(&mut p, 0.1, 0.0, 5e-4).unwrap();
        assert!((p[0].value.item() - 0.99995).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = single(0.0, 1.0);
        sgd_step(&mut p, 1.0, 0.9, 0.0).unwrap();
        p[0].grad = Some(Tensor::scalar(1.0));
        sgd_step(&mut p, 1.0, 0.9, 0.0).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((p[0].value.item() + 2.9).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut store = ParamStore::<f32>::new();
        store.add_param("stem.vg.conv.weight", Tensor::scalar(1.0)).unwrap();
        let err = sgd_step(&mut store.params, 0.1, 0.9, 0.0).unwrap_err();
        assert!(err.to_string().contains("stem.vg.conv.weight"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add_param("a", Tensor::scalar(1.0)).unwrap();
        assert!(store.add_buffer("a", Tensor::scalar(1.0)).is_err());
    }
}
