use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::element::Element;
use crate::error::{FlowError, Result};

/// Dense row-major tensor. Immutable after construction except through
/// [`Tensor::data_mut`], which copies on write when the buffer is shared;
/// the optimizer uses that path for in-place parameter updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(FlowError::shape("tensor::new", "zero-sized dimension"));
        }
        if len != data.len() {
            return Err(FlowError::shape(
                "tensor::new",
                format!("shape {:?} needs {} elements, got {}", shape, len, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, E::zero())
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; len]),
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![v]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..len).map(|i| f(i)).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::<Vec<E>>::make_mut(&mut self.data)
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    pub fn index_of(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for k in (0..idx.len()).rev() {
            debug_assert!(idx[k] < self.shape[k]);
            off += idx[k] * stride;
            stride *= self.shape[k];
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> E {
        self.data[self.index_of(idx)]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Same buffer under a new shape; the element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(FlowError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element precision.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.as_f64())).collect()),
        }
    }
}

/// Boolean tensor companion used for sample validity, invalid-entry support
/// and evaluation masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(FlowError::shape(
                "mask::new",
                format!("shape {:?} needs {} entries, got {}", shape, len, data.len()),
            ));
        }
        Ok(Mask { shape, data })
    }

    pub fn full(shape: &[usize], v: bool) -> Self {
        let len: usize = shape.iter().product();
        Mask {
            shape: shape.to_vec(),
            data: vec![v; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction_true(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.count_true() as f64 / self.data.len() as f64
    }

    pub fn not(&self) -> Mask {
        Mask {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }
}

/// Trainable tensor paired with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<E: Element> {
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub trainable: bool,
}

impl<E: Element> Parameter<E> {
    pub fn new(value: Tensor<E>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: Tensor<E>) -> Self {
        let mut p = Parameter::new(value);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }
}

/// Named parameter collection. `BTreeMap` keeps iteration order stable so
/// checkpoints, gradient accumulation and optimizer sweeps are
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Element> {
    params: BTreeMap<String, Parameter<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) {
        self.params.insert(name.into(), Parameter::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<E>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<E>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Tensor<E> {
        &self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<E>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<E>)> {
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

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.zero_grad();
        }
    }

    /// Global L2 norm over all trainable gradients (fixed name order).
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for p in self.params.values().filter(|p| p.trainable) {
            for &g in p.grad.data() {
                let g = g.as_f64();
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    pub fn scale_grads(&mut self, factor: E) {
        for p in self.params.values_mut().filter(|p| p.trainable) {
            for g in p.grad.data_mut() {
                *g = *g * factor;
            }
        }
    }

    pub fn cast<T: Element>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            let mut np = Parameter::new(p.value.cast::<T>());
            np.trainable = p.trainable;
            out.params.insert(name.clone(), np);
        }
        out
    }
}

/// He-style normal init: std = sqrt(2 / fan_in).
pub fn he_normal<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<E> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    Tensor::from_fn(shape, |_| E::from_f64(dist.sample(rng)))
}

pub fn uniform<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::from_f64(rng.gen_range(lo..hi)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_strides() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.strides(), vec![12, 4, 1]);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.len(), 24);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn copy_on_write() {
        let a = Tensor::<f32>::zeros(&[4]);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 1.0);
    }

    #[test]
    fn param_store_order_is_sorted() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b", Tensor::zeros(&[1]));
        s.insert("a", Tensor::zeros(&[1]));
        let names: Vec<_> = s.names().cloned().collect();
        assert_eq!(names, vec!["a", "b"]);
    }

    #[test]
    fn mask_counts() {
        let m = Mask::new(vec![2, 2], vec![true, false, true, true]).unwrap();
        assert_eq!(m.count_true(), 3);
        assert_eq!(m.not().count_true(), 1);
        assert!((m.fraction_true() - 0.75).abs() < 1e-12);
    }
}
