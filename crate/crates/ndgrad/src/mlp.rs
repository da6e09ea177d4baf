use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{gemm, Tensor};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Fully connected network. Weights are stored `[fan_in, fan_out]` so a
/// batch of row vectors multiplies from the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            weights.push(Tensor::from_raw(fan_in, fan_out, w));
            biases.push(Tensor::from_raw(1, fan_out, b));
        }
        Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            activation,
        }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        let weights = sizes
            .windows(2)
            .map(|p| Tensor::zeros(&[p[0], p[1]]))
            .collect();
        let biases = sizes.windows(2).map(|p| Tensor::zeros(&[1, p[1]])).collect();
        Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            activation,
        }
    }

    pub fn from_params(
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Parameter(format!(
                "{} weight tensors for {} bias tensors",
                weights.len(),
                biases.len()
            )));
        }
        let mut sizes = vec![weights[0].rows()];
        for (w, b) in weights.iter().zip(&biases) {
            let prev = *sizes.last().unwrap();
            if w.rows() != prev {
                return Err(Error::Dimension {
                    op: "mlp layers",
                    left: vec![prev],
                    right: w.shape().to_vec(),
                });
            }
            if b.len() != w.cols() {
                return Err(Error::Dimension {
                    op: "mlp bias",
                    left: w.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            sizes.push(w.cols());
        }
        let biases = biases
            .into_iter()
            .map(|b| {
                let n = b.len();
                b.reshape(vec![1, n])
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            sizes,
            weights,
            biases,
            activation,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Parameters in declaration order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.weights.len())
            .flat_map(|i| [format!("{prefix}.l{i}.weight"), format!("{prefix}.l{i}.bias")])
            .collect()
    }

    /// Multiply the last layer by `factor`; used for near-zero output init.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.weights.len() - 1;
        self.weights[last].data_mut().iter_mut().for_each(|v| *v *= factor);
        self.biases[last].data_mut().iter_mut().for_each(|v| *v *= factor);
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.last().copied() != Some(self.input_dim()) {
            return Err(Error::Dimension {
                op: "mlp forward",
                left: shape.to_vec(),
                right: vec![self.input_dim()],
            });
        }
        Ok(())
    }

    /// Evaluate without recording anything.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input.shape())?;
        let rows = input.rows();
        let mut x = input.data().to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fi, fo) = (w.rows(), w.cols());
            let mut out = Vec::with_capacity(rows * fo);
            for _ in 0..rows {
                out.extend_from_slice(b.data());
            }
            gemm(&x, rows, fi, false, w.data(), fi, fo, false, &mut out, 1.0);
            if l < last && self.activation != Activation::Identity {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            x = out;
        }
        Ok(Tensor::from_raw(rows, self.output_dim(), x))
    }

    /// Register the parameters on `tape`. With `trainable == false` they are
    /// constants: gradients still flow to the network input but not into the
    /// weights.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let params = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        BoundMlp {
            params,
            input_dim: self.input_dim(),
            activation: self.activation,
        }
    }

    /// Polyak averaging: `self ← ζ·source + (1 − ζ)·self`, written as a step
    /// toward the source so that equal parameters stay bit-identical.
    pub fn soft_update_from(&mut self, source: &Mlp, zeta: f64) {
        assert_eq!(self.sizes, source.sizes, "soft update between different shapes");
        for (dst, src) in self.params_mut().into_iter().zip(source.params()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += zeta * (s - *d);
            }
        }
    }

    pub fn copy_from(&mut self, source: &Mlp) {
        assert_eq!(self.sizes, source.sizes, "copy between different shapes");
        for (dst, src) in self.params_mut().into_iter().zip(source.params()) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}

/// An [`Mlp`] whose parameters have been placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    params: Vec<Var>,
    input_dim: usize,
    activation: Activation,
}

impl BoundMlp {
    pub fn vars(&self) -> &[Var] {
        &self.params
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        if shape.last().copied() != Some(self.input_dim) {
            return Err(Error::Dimension {
                op: "mlp forward",
                left: shape,
                right: vec![self.input_dim],
            });
        }
        let layers = self.params.len() / 2;
        let mut x = input;
        for l in 0..layers {
            let h = tape.matmul(x, self.params[2 * l]);
            let h = tape.add(h, self.params[2 * l + 1]);
            x = if l + 1 < layers {
                match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                    Activation::Identity => h,
                }
            } else {
                h
            };
        }
        Ok(x)
    }

    /// Parameter gradients in declaration order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params.iter().map(|&v| grads.wrt(v)).collect()
    }
}
