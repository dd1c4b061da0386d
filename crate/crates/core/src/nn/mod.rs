//! Minimal dense CNN engine: parameter stores, a recorded forward graph with
//! reverse-mode gradients, and the Adam optimizer.
//!
//! Tensors are `(N, C, H, W)` `f32` arrays in standard layout. Convolutions use
//! same padding, stride 1, and kernel sizes 1 or 3.

mod graph;
mod kernels;
mod optim;

use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use graph::{Graph, NodeId};
pub use optim::{Adam, AdamConfig};

pub type Tensor = Array4<f32>;

/// Named parameter tensors of one network part.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> &ArrayD<f32> {
        &self.values[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut ArrayD<f32> {
        &mut self.values[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<ArrayD<f32>> {
        self.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He,
    Zero,
}

/// Handles to a convolution's weight `(out, in, k, k)` and bias `(out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        let shape = IxDyn(&[out_channels, in_channels, kernel, kernel]);
        let weight = match init {
            Init::Zero => ArrayD::zeros(shape),
            Init::He => {
                let fan_in = (in_channels * kernel * kernel) as f32;
                let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
                ArrayD::from_shape_simple_fn(shape, || normal.sample(rng))
            }
        };
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = store.add(format!("{name}.bias"), Array1::<f32>::zeros(out_channels).into_dyn());
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }
}
