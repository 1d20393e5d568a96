//! Differentiable tensor substrate.
//!
//! A [`ParamStore`] owns named parameter tensors (plus optional EMA shadow
//! copies); a [`graph::Graph`] records forward computations against a store
//! and produces gradients by reverse traversal. Convolution dispatches to an
//! im2col + GEMM pair, and every op's backward is verified against central
//! finite differences in [`gradcheck`].

pub mod conv;
pub mod gradcheck;
pub mod graph;

pub use graph::{Graph, NodeId, WeightSource};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

/// A named parameter tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamTensor<T> {
    name: String,
    values: Tensor<T>,
    grad: Tensor<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut Tensor<T> {
        &mut self.values
    }
    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }
    pub fn shape(&self) -> Shape {
        self.values.shape()
    }
}

/// Ordered collection of parameter tensors for one or more networks.
///
/// Tensor order is the declaration order, which is also the serialization
/// order used by checkpoints. Gradient accumulation and EMA updates mutate
/// the store and are meant to run under a single writer; reads (forward
/// passes) may happen concurrently on a frozen store.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    tensors: Vec<ParamTensor<T>>,
    by_name: HashMap<String, usize>,
    ema: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
            by_name: HashMap::new(),
            ema: None,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, values: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArg(format!("duplicate parameter {name}")));
        }
        if self.ema.is_some() {
            return Err(Error::InvalidArg(
                "cannot add parameters after EMA shadows were created".into(),
            ));
        }
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(values.shape());
        self.tensors.push(ParamTensor { name, values, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: usize) -> &ParamTensor<T> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut ParamTensor<T> {
        &mut self.tensors[id]
    }

    pub fn values(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id].values
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.tensors.iter()
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.values.shape().numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.data_mut().fill(T::zero());
        }
    }

    /// Add a gradient set (scaled by `scale`) into the accumulators.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>, scale: T) -> Result<()> {
        if grads.params.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch(
                "gradient set does not match store".into(),
            ));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads.params.iter()) {
            if let Some(g) = g {
                t.grad.check_same_shape(g)?;
                for (a, &b) in t.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b * scale;
                }
            }
        }
        Ok(())
    }

    /// Create EMA shadows as copies of the current values.
    pub fn init_ema(&mut self) {
        self.ema = Some(self.tensors.iter().map(|t| t.values.clone()).collect());
    }

    pub fn has_ema(&self) -> bool {
        self.ema.is_some()
    }

    /// shadow <- decay * shadow + (1 - decay) * raw, per tensor.
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArg(format!("ema decay {decay} outside [0,1]")));
        }
        let shadows = self
            .ema
            .as_mut()
            .ok_or_else(|| Error::InvalidArg("EMA shadows not initialized".into()))?;
        let d = T::of_f64(decay);
        let one_minus = T::of_f64(1.0 - decay);
        for (shadow, t) in shadows.iter_mut().zip(self.tensors.iter()) {
            for (s, &v) in shadow.data_mut().iter_mut().zip(t.values.data()) {
                *s = d * *s + one_minus * v;
            }
        }
        Ok(())
    }

    pub fn ema_values(&self, id: usize) -> Option<&Tensor<T>> {
        self.ema.as_ref().map(|e| &e[id])
    }

    pub fn set_ema_values(&mut self, shadows: Vec<Tensor<T>>) -> Result<()> {
        if shadows.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch("EMA shadow count mismatch".into()));
        }
        for (s, t) in shadows.iter().zip(self.tensors.iter()) {
            t.values.check_same_shape(s)?;
        }
        self.ema = Some(shadows);
        Ok(())
    }

    /// Overwrite every tensor (zero-initialized ones included) with
    /// fan-in-scaled Gaussian values; used by the gradient-check harness,
    /// which needs all backward paths active but activations of stable
    /// magnitude through deep compositions.
    pub fn randomize_all<R: Rng>(&mut self, rng: &mut R, scale: f64)
    where
        StandardNormal: Distribution<T>,
    {
        for t in &mut self.tensors {
            let shape = t.values.shape();
            let fan_in = (shape.c * shape.h * shape.w).max(1) as f64;
            let s = T::of_f64(scale * (1.0 / fan_in).sqrt());
            for v in t.values.data_mut() {
                let z: T = StandardNormal.sample(rng);
                *v = z * s;
            }
        }
    }
}

/// Gradients produced by one backward pass, aligned with a store.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    /// Per-parameter gradients, `None` where a tensor was not touched.
    pub params: Vec<Option<Tensor<T>>>,
    /// Per-node gradients for graph nodes (leaves included).
    pub nodes: Vec<Option<Tensor<T>>>,
}

/// He-style initialization for a conv weight tensor.
pub fn he_init<T: Scalar, R: Rng>(shape: Shape, rng: &mut R) -> Tensor<T>
where
    StandardNormal: Distribution<T>,
{
    let fan_in = (shape.c * shape.h * shape.w) as f64;
    let std = (2.0 / fan_in).sqrt();
    let s = T::of_f64(std);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: T = StandardNormal.sample(rng);
        *v = z * s;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn store_rejects_duplicate_names() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(Shape::new(1, 1, 1, 1))).unwrap();
        assert!(s.add("w", Tensor::zeros(Shape::new(1, 1, 1, 1))).is_err());
    }

    #[test]
    fn ema_shadows_cover_all_tensors() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::filled(Shape::new(1, 1, 1, 1), 1.0))
            .unwrap();
        s.add("b", Tensor::filled(Shape::new(1, 2, 1, 1), 2.0))
            .unwrap();
        s.init_ema();
        assert!(s.ema_values(0).is_some());
        assert!(s.ema_values(1).is_some());
        s.ema_update(0.5).unwrap();
        assert_eq!(s.ema_values(0).unwrap().data()[0], 1.0);
    }

    #[test]
    fn he_init_scale_is_plausible() {
        let mut rng = rng_from_seed(1);
        let t: Tensor<f64> = he_init(Shape::new(8, 4, 3, 3), &mut rng);
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.data().len() as f64;
        let expect = 2.0 / (4.0 * 9.0);
        assert!((var - expect).abs() / expect < 0.3, "var {var}");
    }
}
