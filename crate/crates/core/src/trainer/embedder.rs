//! Per-pixel multi-layer perceptron with rectifier activations between
//! layers (none after the last one).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cluster::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::synth::Scene;
use crate::{Mat, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out×in`.
    pub weight: Mat,
    pub bias: Vector,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Mat::zeros(output, input),
            bias: Vector::zeros(output),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderParams {
    layers: Vec<Layer>,
}

/// Pre-activations and activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `inputs[l]` is the input of layer `l` (after the rectifier for `l > 0`).
    inputs: Vec<Mat>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Mat>,
    pub output: Mat,
}

impl EmbedderParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("embedder needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.nrows() {
                return Err(Error::structural(format!("layer {l}: bias length differs from output size")));
            }
            if l > 0 && layers[l - 1].weight.nrows() != layer.weight.ncols() {
                return Err(Error::structural(format!("layer {l}: input size does not chain")));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::structural(format!("layer {l}: non-finite parameter")));
            }
        }
        Ok(Self { layers })
    }

    /// He-normal weights, zero biases. `hidden` may be empty for a single
    /// linear layer.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                Layer {
                    weight: Mat::from_fn(w[1], w[0], |_, _| std * rng.sample::<f64, _>(StandardNormal)),
                    bias: Vector::zeros(w[1]),
                }
            })
            .collect();
        Self::new(layers)
    }

    /// One linear layer computing the identity.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Layer {
                weight: Mat::identity(dim, dim),
                bias: Vector::zeros(dim),
            }],
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Forward pass over the columns of `x` (`input_dim×N`).
    pub fn forward(&self, x: &Mat) -> Result<ForwardCache> {
        if x.nrows() != self.input_dim() {
            return Err(Error::structural(format!(
                "feature dim {} != embedder input {}",
                x.nrows(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut current = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &current;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            inputs.push(current);
            if l == last {
                return Ok(ForwardCache { inputs, pre, output: z });
            }
            current = z.map(|v| v.max(0.0));
            pre.push(z);
        }
        unreachable!("loop returns on the last layer")
    }

    /// Parameter gradients given `∂L/∂output`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Mat) -> Result<EmbedderParams> {
        if grad_output.shape() != cache.output.shape() {
            return Err(Error::structural("output gradient shape differs from forward output"));
        }
        let mut grads = self.zeros_like();
        let mut delta = grad_output.clone();
        for l in (0..self.layers.len()).rev() {
            let g = &mut grads.layers[l];
            g.weight = &delta * cache.inputs[l].transpose();
            g.bias = delta.column_sum();
            if l == 0 {
                break;
            }
            let mut back = self.layers[l].weight.transpose() * &delta;
            for (b, z) in back.iter_mut().zip(cache.pre[l - 1].iter()) {
                if *z <= 0.0 {
                    *b = 0.0;
                }
            }
            delta = back;
        }
        Ok(grads)
    }

    /// Flattened parameter values (weights column-major, then bias, layer by
    /// layer).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend_from_slice(l.weight.as_slice());
            v.extend_from_slice(l.bias.as_slice());
        }
        v
    }

    pub fn from_flat_like(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        let mut pos = 0;
        for l in &mut out.layers {
            for v in l.weight.as_mut_slice().iter_mut().chain(l.bias.as_mut_slice().iter_mut()) {
                *v = *flat.get(pos).ok_or_else(|| Error::structural("flat parameter vector too short"))?;
                pos += 1;
            }
        }
        if pos != flat.len() {
            return Err(Error::structural("flat parameter vector too long"));
        }
        Ok(out)
    }
}

pub fn embed_features(params: &EmbedderParams, features: &Mat) -> Result<Mat> {
    Ok(params.forward(features)?.output)
}

/// Embeds every pixel of a scene, carrying its training labels and hidden
/// novel ids.
pub fn embed(params: &EmbedderParams, scene: &Scene) -> Result<EmbeddingBatch> {
    let data = embed_features(params, &scene.features)?;
    EmbeddingBatch::new(data, scene.train_labels.clone(), scene.hidden_novel())
}
