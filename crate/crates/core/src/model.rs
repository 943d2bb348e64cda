//! Fully-connected embedding network with explicit forward and reverse passes.
//!
//! Hidden layers are affine + rectifier; the output layer is affine only, so
//! embeddings are left unnormalized. Weights are stored `out × in`, making the
//! weight gradient of a layer `grad_outᵀ · input`.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    layers: Vec<Dense>,
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    layer_dims: Vec<usize>,
    /// `inputs[l]` is the input of layer `l` (post-rectifier for `l > 0`).
    inputs: Vec<Matrix>,
    /// Pre-activations of each layer.
    pre: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }

    /// Input of the final layer: the penultimate features.
    pub fn penultimate(&self) -> &Matrix {
        self.inputs.last().expect("at least one layer")
    }

    pub fn output(&self) -> &Matrix {
        self.pre.last().expect("at least one layer")
    }

    /// Pre-activations of every rectified (hidden) unit.
    pub fn hidden_preactivations(&self) -> impl Iterator<Item = f64> + '_ {
        self.pre[..self.pre.len() - 1].iter().flat_map(|z| z.data().iter().copied())
    }
}

/// Parameter gradients in the same layout as [`MlpModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w.data(), b.as_slice()]).collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub params: ParamGrads,
    pub grad_in: Matrix,
}

/// Number of parameters of an MLP with the given dims.
pub fn parameter_count(layer_dims: &[usize]) -> usize {
    layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::param("layer_dims", format!("need at least input and output dims, got {layer_dims:?}")));
    }
    if layer_dims.contains(&0) {
        return Err(Error::param("layer_dims", format!("all dims must be positive, got {layer_dims:?}")));
    }
    Ok(())
}

impl MlpModel {
    /// Fan-in scaled uniform weights (`±√(6/fan_in)` before a rectifier,
    /// `±√(3/fan_in)` on the linear output layer), zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = layer_dims.len() - 2;
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let gain = if l == last { 3.0 } else { 6.0 };
                let bound = (gain / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let weight = Matrix::from_fn(fan_out, fan_in, |_, _| dist.sample(&mut rng));
                Dense { weight, bias: vec![0.0; fan_out] }
            })
            .collect();
        Ok(Self { layer_dims: layer_dims.to_vec(), layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let mut dims = Vec::with_capacity(layers.len() + 1);
        for (l, layer) in layers.iter().enumerate() {
            let (out, inp) = layer.weight.shape();
            if l == 0 {
                dims.push(inp);
            } else if dims[l] != inp {
                return Err(Error::dims(format!("layer {l} input {}", dims[l]), inp));
            }
            if layer.bias.len() != out {
                return Err(Error::dims(format!("layer {l} bias {out}"), layer.bias.len()));
            }
            dims.push(out);
        }
        check_dims(&dims)?;
        Ok(Self { layer_dims: dims, layers })
    }

    /// Rebuilds a model from dims and the flat parameter vector produced by [`Self::to_flat`].
    pub fn from_flat(layer_dims: &[usize], params: &[f64]) -> Result<Self> {
        check_dims(layer_dims)?;
        let expected = parameter_count(layer_dims);
        if params.len() != expected {
            return Err(Error::dims(format!("{expected} parameters"), params.len()));
        }
        let mut rest = params;
        let mut layers = Vec::new();
        for w in layer_dims.windows(2) {
            let (inp, out) = (w[0], w[1]);
            let (wd, tail) = rest.split_at(inp * out);
            let (bd, tail) = tail.split_at(out);
            layers.push(Dense { weight: Matrix::new(out, inp, wd.to_vec())?, bias: bd.to_vec() });
            rest = tail;
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(Self { layer_dims: layer_dims.to_vec(), layers })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated dims")
    }

    /// Width of the input to the last layer.
    pub fn penultimate_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.layer_dims)
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.data(), l.bias.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()]).collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        if x.cols() != self.input_dim() {
            return Err(Error::dims(format!("{} input features", self.input_dim()), x.cols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = affine(&h, layer);
            inputs.push(h);
            h = if l == last { z.clone() } else { z.map(|v| if v > 0.0 { v } else { 0.0 }) };
            pre.push(z);
        }
        Ok((h, ForwardTrace { layer_dims: self.layer_dims.clone(), inputs, pre }))
    }

    /// Output only; no trace is retained.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Penultimate features and output.
    pub fn predict_with_features(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let (out, trace) = self.forward(x)?;
        Ok((trace.penultimate().clone(), out))
    }

    pub fn backward(&self, trace: &ForwardTrace, grad_out: &Matrix) -> Result<Backward> {
        self.backward_with_feature_grad(trace, grad_out, None)
    }

    /// Reverse pass with an extra gradient injected at the penultimate
    /// features (the input of the last layer).
    pub fn backward_with_feature_grad(
        &self,
        trace: &ForwardTrace,
        grad_out: &Matrix,
        feature_grad: Option<&Matrix>,
    ) -> Result<Backward> {
        if trace.layer_dims != self.layer_dims || trace.pre.len() != self.layers.len() {
            return Err(Error::InvalidInput("forward trace does not belong to this model".into()));
        }
        let n = trace.batch_size();
        if grad_out.shape() != (n, self.output_dim()) {
            return Err(Error::dims(format!("({n}, {})", self.output_dim()), format!("{:?}", grad_out.shape())));
        }
        if let Some(fg) = feature_grad {
            if fg.shape() != (n, self.penultimate_dim()) {
                return Err(Error::dims(format!("({n}, {})", self.penultimate_dim()), format!("{:?}", fg.shape())));
            }
        }
        let nl = self.layers.len();
        let mut weights = vec![Matrix::zeros(0, 0); nl];
        let mut biases = vec![Vec::new(); nl];
        // gradient w.r.t. the pre-activation of the current layer
        let mut delta = grad_out.clone();
        for l in (0..nl).rev() {
            let input = &trace.inputs[l];
            weights[l] = delta.transpose().matmul(input)?;
            biases[l] = (0..delta.cols()).map(|j| crate::numcore::sum::neumaier((0..n).map(|i| delta[(i, j)]))).collect();
            let mut grad_input = delta.matmul(&self.layers[l].weight)?;
            if l == nl - 1 {
                if let Some(fg) = feature_grad {
                    grad_input.add_scaled(fg, 1.0)?;
                }
            }
            if l > 0 {
                let z = &trace.pre[l - 1];
                for (g, &zv) in grad_input.data_mut().iter_mut().zip(z.data()) {
                    if zv <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = grad_input;
        }
        Ok(Backward { params: ParamGrads { weights, biases }, grad_in: delta })
    }
}

fn affine(x: &Matrix, layer: &Dense) -> Matrix {
    let (out, inp) = layer.weight.shape();
    let mut z = Matrix::zeros(x.rows(), out);
    for i in 0..x.rows() {
        let xi = x.row(i);
        for (j, zj) in z.row_mut(i).iter_mut().enumerate() {
            let wj = &layer.weight.data()[j * inp..(j + 1) * inp];
            *zj = layer.bias[j] + wj.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    z
}
