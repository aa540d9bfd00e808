use rand::Rng;

use super::Real;
use crate::error::{config_err, Result};

/// Shape of a learnable layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3x3 kernel; weights stored as a `(9 * c_in) x c_out` row-major matrix,
    /// rows ordered `(ky, kx, c_in)`.
    Conv3x3 { c_in: usize, c_out: usize },
    /// Per-position affine map; weights stored as `c_in x c_out`.
    Linear { c_in: usize, c_out: usize },
    /// A single learnable scalar, no bias.
    Scalar,
}

impl LayerKind {
    pub fn weight_len(&self) -> usize {
        match *self {
            LayerKind::Conv3x3 { c_in, c_out } => 9 * c_in * c_out,
            LayerKind::Linear { c_in, c_out } => c_in * c_out,
            LayerKind::Scalar => 1,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerKind::Conv3x3 { c_out, .. } | LayerKind::Linear { c_out, .. } => c_out,
            LayerKind::Scalar => 0,
        }
    }

    /// Weight tensor dims as stored in checkpoints.
    pub fn weight_dims(&self) -> Vec<usize> {
        match *self {
            LayerKind::Conv3x3 { c_in, c_out } => vec![3, 3, c_in, c_out],
            LayerKind::Linear { c_in, c_out } => vec![c_in, c_out],
            LayerKind::Scalar => vec![1],
        }
    }
}

/// Weights, bias and their gradient accumulators for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn zeros(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            weight: vec![T::zero(); kind.weight_len()],
            bias: vec![T::zero(); kind.bias_len()],
            grad_weight: vec![T::zero(); kind.weight_len()],
            grad_bias: vec![T::zero(); kind.bias_len()],
        }
    }

    pub fn conv3x3(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self::zeros(name, LayerKind::Conv3x3 { c_in, c_out })
    }

    pub fn linear(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self::zeros(name, LayerKind::Linear { c_in, c_out })
    }

    pub fn scalar(name: impl Into<String>, value: T) -> Self {
        let mut p = Self::zeros(name, LayerKind::Scalar);
        p.weight[0] = value;
        p
    }

    pub fn from_parts(
        name: impl Into<String>,
        kind: LayerKind,
        weight: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        let name = name.into();
        if weight.len() != kind.weight_len() || bias.len() != kind.bias_len() {
            return config_err(format!(
                "layer {name}: expected {} weights and {} biases, got {} and {}",
                kind.weight_len(),
                kind.bias_len(),
                weight.len(),
                bias.len()
            ));
        }
        Ok(Self {
            name,
            kind,
            grad_weight: vec![T::zero(); weight.len()],
            grad_bias: vec![T::zero(); bias.len()],
            weight,
            bias,
        })
    }

    /// He-uniform weights with fan-in from the layer shape; biases zero.
    pub fn init_he<R: Rng + ?Sized>(&mut self, rng: &mut R, gain: f64) {
        let fan_in = match self.kind {
            LayerKind::Conv3x3 { c_in, .. } => 9 * c_in,
            LayerKind::Linear { c_in, .. } => c_in,
            LayerKind::Scalar => 1,
        };
        let limit = gain * (6.0 / fan_in as f64).sqrt();
        for w in &mut self.weight {
            *w = T::lit(rng.gen_range(-limit..limit));
        }
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    /// Number of trainable values, weights plus bias.
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.iter_mut().for_each(|g| *g = T::zero());
        self.grad_bias.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn c_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 { c_in, .. } | LayerKind::Linear { c_in, .. } => c_in,
            LayerKind::Scalar => 1,
        }
    }

    pub fn c_out(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 { c_out, .. } | LayerKind::Linear { c_out, .. } => c_out,
            LayerKind::Scalar => 1,
        }
    }

    /// Flat view of all values, weights first.
    pub fn flat_values(&self) -> Vec<T> {
        self.weight.iter().chain(&self.bias).copied().collect()
    }

    pub fn flat_grads(&self) -> Vec<T> {
        self.grad_weight
            .iter()
            .chain(&self.grad_bias)
            .copied()
            .collect()
    }

    pub fn value_mut(&mut self, i: usize) -> &mut T {
        let nw = self.weight.len();
        if i < nw {
            &mut self.weight[i]
        } else {
            &mut self.bias[i - nw]
        }
    }

    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        let c = |v: &Vec<T>| -> Vec<U> { v.iter().map(|x| U::lit(x.to_f64_lossy())).collect() };
        LayerParams {
            name: self.name.clone(),
            kind: self.kind,
            weight: c(&self.weight),
            bias: c(&self.bias),
            grad_weight: c(&self.grad_weight),
            grad_bias: c(&self.grad_bias),
        }
    }
}
