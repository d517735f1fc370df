//! Fully connected networks recorded on the tape.

use rand::Rng;

use crate::diff::{Activation, ParamArray, Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenActivation {
    Gelu,
    Relu,
}

impl HiddenActivation {
    pub fn as_activation(self) -> Activation {
        match self {
            HiddenActivation::Gelu => Activation::Gelu,
            HiddenActivation::Relu => Activation::Relu,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HiddenActivation::Gelu => "gelu",
            HiddenActivation::Relu => "relu",
        }
    }
}

/// `layers` hidden layers of `width` units followed by a linear output
/// layer; `layers = 0` is a single linear map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpSpec {
    pub layers: usize,
    pub width: usize,
    pub activation: HiddenActivation,
    pub output_dim: usize,
}

/// How a network is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForwardMode {
    #[default]
    Normal,
    /// Identity activations and no biases: the network is a linear map.
    /// Test fixture for the standard/feature rendering equivalence.
    Linear,
}

#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub name: String,
    pub spec: MlpSpec,
    pub input_dim: usize,
    pub weights: Vec<ParamArray<T>>,
    pub biases: Vec<ParamArray<T>>,
}

impl<T: Real> Mlp<T> {
    /// He-uniform hidden layers, fan-in-scaled output layer, zero biases.
    pub fn new(name: &str, input_dim: usize, spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.layers > 0 && spec.width == 0 {
            return Err(Error::Usage(format!("{name}: hidden width must be at least 1")));
        }
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(spec.width, spec.layers));
        dims.push(spec.output_dim);
        let n = dims.len() - 1;
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let gain = if i + 1 < n { 6.0 } else { 1.0 };
            let bound = (gain / fan_in.max(1) as f64).sqrt();
            let values = (0..fan_in * fan_out)
                .map(|_| T::lit(rng.gen_range(-bound..=bound)))
                .collect();
            weights.push(ParamArray::from_values(
                format!("{name}.w{i}"),
                &[fan_in, fan_out],
                values,
            )?);
            biases.push(ParamArray::zeros(format!("{name}.b{i}"), &[1, fan_out]));
        }
        Ok(Self {
            name: name.to_string(),
            spec,
            input_dim,
            weights,
            biases,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(ParamArray::numel).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamArray<T>> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamArray<T>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }

    /// Zeroes the output layer's weights and bias.
    pub fn zero_output_layer(&mut self) {
        let last = self.weights.len() - 1;
        self.weights[last].values.iter_mut().for_each(|v| *v = T::zero());
        self.biases[last].values.iter_mut().for_each(|v| *v = T::zero());
    }

    /// Evaluates the network on the rows of `x`; the output layer is linear.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var, mode: ForwardMode) -> Result<Var> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "{} expects {} inputs, got {}",
                self.name,
                self.input_dim,
                x.cols()
            )));
        }
        let n = self.weights.len();
        let mut h = x;
        for i in 0..n {
            let layer = format!("{}.layer{i}", self.name);
            let w = tape.param(&self.weights[i]);
            h = tape.matmul(h, w).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{layer}: {m}")),
                other => other,
            })?;
            if mode == ForwardMode::Normal {
                let b = tape.param(&self.biases[i]);
                h = tape.add_row(h, b)?;
                if i + 1 < n {
                    h = tape.activate(h, self.spec.activation.as_activation());
                }
            }
            if !crate::diff::all_finite(tape.value(h)) {
                return Err(Error::Numeric(format!("{layer}: non-finite activation")));
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec {
            layers: 2,
            width: 64,
            activation: HiddenActivation::Gelu,
            output_dim: 3,
        };
        let mlp = Mlp::<f32>::new("m", 25, spec, &mut rng).unwrap();
        assert_eq!(mlp.param_count(), (25 * 64 + 64) + (64 * 64 + 64) + (64 * 3 + 3));
        let linear = Mlp::<f32>::new(
            "l",
            16,
            MlpSpec {
                layers: 0,
                width: 0,
                activation: HiddenActivation::Relu,
                output_dim: 1,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(linear.param_count(), 17);
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec {
            layers: 1,
            width: 4,
            activation: HiddenActivation::Relu,
            output_dim: 2,
        };
        let mlp = Mlp::<f64>::new("m", 3, spec, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0; 4], 1, 4).unwrap();
        assert!(matches!(
            mlp.forward(&mut tape, x, ForwardMode::Normal),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_finite_error_names_the_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec {
            layers: 1,
            width: 4,
            activation: HiddenActivation::Gelu,
            output_dim: 2,
        };
        let mut mlp = Mlp::<f64>::new("spatial", 3, spec, &mut rng).unwrap();
        mlp.weights[1].values[0] = f64::INFINITY;
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0; 3], 1, 3).unwrap();
        let err = mlp.forward(&mut tape, x, ForwardMode::Normal).unwrap_err();
        assert!(err.to_string().contains("spatial.layer1"), "{err}");
    }
}
