use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{axpy, check_len, ensure_finite, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// One affine layer followed by an element-wise activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        check_len("Dense bias", weight.rows(), bias.len())?;
        ensure_finite("Dense bias", &bias)?;
        Ok(Dense {
            weight,
            bias,
            activation,
        })
    }

    /// Uniform init scaled by fan-in (He for relu, Glorot otherwise).
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = match activation {
            Activation::Relu => (6.0 / input.max(1) as f64).sqrt(),
            _ => (6.0 / (input + output).max(1) as f64).sqrt(),
        };
        let data = (0..input * output)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Dense {
            weight: Matrix::from_vec(output, input, data).expect("shape is consistent"),
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Intermediates recorded by [`Mlp::forward_traced`], consumed by
/// [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

/// Gradients laid out exactly like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl MlpGrads {
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in &self.layers {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.flatten_into(&mut out);
        out
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("Mlp requires at least one layer"));
        }
        for pair in layers.windows(2) {
            check_len("Mlp layer chain", pair[0].output_dim(), pair[1].input_dim())?;
        }
        Ok(Mlp { layers })
    }

    /// Builds a randomly initialized network with layer widths `dims`
    /// (`dims[0]` is the input). Hidden layers use `hidden`, the last one
    /// uses `output`.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "an MLP needs at least input and output widths, got {dims:?}"
            )));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let act = if k == last { output } else { hidden };
                Dense::init(w[0], w[1], act, rng)
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Dense::parameter_count).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("Mlp::forward", self.input_dim(), x.len())?;
        let mut h = x.to_vec();
        for layer in &self.layers {
            let mut z = layer.weight.matvec(&h)?;
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi = layer.activation.apply(*zi + bi);
            }
            h = z;
        }
        ensure_finite("Mlp::forward", &h)?;
        Ok(h)
    }

    pub fn forward_traced(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        check_len("Mlp::forward_traced", self.input_dim(), x.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let mut z = layer.weight.matvec(&h)?;
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            let out = z.iter().map(|&zi| layer.activation.apply(zi)).collect();
            inputs.push(std::mem::replace(&mut h, out));
            pre_activations.push(z);
        }
        ensure_finite("Mlp::forward_traced", &h)?;
        Ok((
            h,
            ForwardTrace {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Back-propagates `upstream = ∂L/∂output` through the recorded forward
    /// pass; returns parameter gradients and `∂L/∂input`.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        if trace.inputs.len() != self.layers.len()
            || trace
                .inputs
                .iter()
                .zip(&self.layers)
                .any(|(x, l)| x.len() != l.input_dim())
        {
            return Err(Error::MissingCache);
        }
        check_len("Mlp::backward", self.output_dim(), upstream.len())?;

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_vec();
        for ((layer, input), pre) in self
            .layers
            .iter()
            .zip(&trace.inputs)
            .zip(&trace.pre_activations)
            .rev()
        {
            for (d, &z) in delta.iter_mut().zip(pre) {
                *d *= layer.activation.derivative(z);
            }
            let mut gw = Matrix::zeros(layer.output_dim(), layer.input_dim());
            for (r, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, input, gw.row_mut(r));
                }
            }
            let next = layer.weight.matvec_transposed(&delta)?;
            grads.push((gw, std::mem::replace(&mut delta, next)));
        }
        grads.reverse();
        ensure_finite("Mlp::backward", &delta)?;
        Ok((MlpGrads { layers: grads }, delta))
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.output_dim(), l.input_dim()),
                        vec![0.0; l.output_dim()],
                    )
                })
                .collect(),
        }
    }

    /// Parameters in storage order: per layer, weights row-major then bias.
    pub fn params_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.params_into(&mut out);
        out
    }

    /// Inverse of [`Mlp::params`]; returns how many values were consumed.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<usize> {
        if flat.len() < self.parameter_count() {
            return Err(Error::DimensionMismatch {
                context: "Mlp::set_params",
                expected: self.parameter_count(),
                got: flat.len(),
            });
        }
        let used = self.parameter_count();
        ensure_finite("Mlp::set_params", &flat[..used])?;
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weight.rows() * l.weight.cols();
            l.weight
                .as_mut_slice()
                .copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(used)
    }
}
