use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer. `weight` is `output_dim x input_dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl Dense {
    pub fn zeros(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Dense {
            input_dim,
            output_dim,
            activation,
            weight: vec![0.0; input_dim * output_dim],
            bias: vec![0.0; output_dim],
        }
    }

    /// He-style uniform initialization scaled by fan-in; zero bias.
    pub fn init<R: Rng>(input_dim: usize, output_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / input_dim.max(1) as f64).sqrt();
        let weight = (0..input_dim * output_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Dense {
            input_dim,
            output_dim,
            activation,
            weight,
            bias: vec![0.0; output_dim],
        }
    }

    /// Pre-activation `W x + b` written into `out`.
    pub fn affine_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weight
                .chunks_exact(self.input_dim.max(1))
                .take(self.output_dim)
                .zip(&self.bias)
                .map(|(row, b)| if self.input_dim == 0 { *b } else { b + dot(row, x) }),
        );
    }

    fn activate(&self, pre: &[f64]) -> Vec<f64> {
        match self.activation {
            Activation::Relu => pre.iter().map(|&v| v.max(0.0)).collect(),
            Activation::Identity => pre.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
}

/// Intermediate values from a forward pass, kept for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// `inputs[l]` is the input to layer `l`; the last element is the output.
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Smallest `|pre-activation|` over ReLU units; used to keep finite
    /// differences away from kinks.
    pub fn min_relu_margin(&self, net: &DenseNet) -> f64 {
        net.layers
            .iter()
            .zip(&self.pre)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, p)| p.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Gradients shaped like a [`DenseNet`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DenseGrads {
    pub fn zeroed(&mut self) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|v| *v *= s);
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }
}

impl DenseNet {
    /// Builds a net through `dims` (input first). Hidden layers use ReLU and
    /// the last layer uses `output_activation`.
    pub fn new<R: Rng>(dims: &[usize], output_activation: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "a net needs at least an input and an output dimension");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output_activation } else { Activation::Relu };
                Dense::init(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        DenseNet { layers }
    }

    pub fn zeros(dims: &[usize], output_activation: Activation) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output_activation } else { Activation::Relu };
                Dense::zeros(dims[i], dims[i + 1], act)
            })
            .collect();
        DenseNet { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.len() != l.input_dim * l.output_dim || l.bias.len() != l.output_dim {
                return Err(Error::InvalidData(format!("layer {i} has inconsistent parameter shapes")));
            }
            if i > 0 && self.layers[i - 1].output_dim != l.input_dim {
                return Err(Error::InvalidData(format!("layer {i} does not chain with layer {}", i - 1)));
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::LengthMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut pre = Vec::new();
        for layer in &self.layers {
            layer.affine_into(&cur, &mut pre);
            cur = layer.activate(&pre);
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.layers.len() + 1),
            pre: Vec::with_capacity(self.layers.len()),
        };
        trace.inputs.push(x.to_vec());
        for layer in &self.layers {
            let mut pre = Vec::with_capacity(layer.output_dim);
            layer.affine_into(trace.inputs.last().unwrap(), &mut pre);
            trace.inputs.push(layer.activate(&pre));
            trace.pre.push(pre);
        }
        Ok(trace)
    }

    pub fn zero_grads(&self) -> DenseGrads {
        DenseGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    /// Accumulates parameter gradients for `upstream = dL/d(output)` into
    /// `grads` and returns `dL/d(input)`.
    pub fn backward(&self, trace: &Trace, upstream: &[f64], grads: &mut DenseGrads) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::LengthMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if trace.pre.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::InvalidData("trace or gradient buffer does not match the net".into()));
        }
        let mut delta = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (d, &p) in delta.iter_mut().zip(&trace.pre[l]) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &trace.inputs[l];
            let (gw, gb) = &mut grads.layers[l];
            let mut dx = vec![0.0; layer.input_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = o * layer.input_dim..(o + 1) * layer.input_dim;
                axpy(d, x, &mut gw[row.clone()]);
                axpy(d, &layer.weight[row], &mut dx);
            }
            delta = dx;
        }
        Ok(delta)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}
