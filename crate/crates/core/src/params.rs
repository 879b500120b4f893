use rand::Rng;

use crate::tensor::{ConvSpec, Result, Scalar, Tape, Tensor, Var};

/// Weights (and optional bias) of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Tape handles for a registered [`ConvParams`].
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl<T: Scalar> ConvParams<T> {
    /// Uniform on `±1/sqrt(fan_in)` for weights and bias alike.
    pub fn init(spec: &ConvSpec, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (spec.fan_in() as f64).sqrt();
        let mut draw = |_| T::of(rng.random_range(-bound..bound));
        let weight = Tensor::from_fn(&spec.weight_shape(), &mut draw);
        let bias = spec.bias.then(|| Tensor::from_fn(&[spec.out_channels], &mut draw));
        Self { weight, bias }
    }

    pub fn zeros(spec: &ConvSpec) -> Self {
        Self {
            weight: Tensor::zeros(&spec.weight_shape()),
            bias: spec.bias.then(|| Tensor::zeros(&[spec.out_channels])),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> Result<ConvVars> {
        let weight = tape.param(self.weight.clone())?;
        let bias = match &self.bias {
            Some(b) => Some(tape.param(b.clone())?),
            None => None,
        };
        Ok(ConvVars { weight, bias })
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(|b| b.cast()),
        }
    }
}

impl ConvVars {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, spec: &ConvSpec) -> Result<Var> {
        tape.conv3d(x, self.weight, self.bias, spec)
    }
}
