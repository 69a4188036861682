//! Two-layer perceptrons used by the generator, discriminator and the
//! conditional baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Affine map with the weight stored `[in × out]` so that `y = x·W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init in `±1/√in` for both weight and bias.
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w = draw(fan_in * fan_out);
        let b = draw(fan_out);
        Linear {
            weight: Tensor::from_parts(vec![fan_in, fan_out], w),
            bias: Tensor::from_parts(vec![fan_out], b),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn bind(tape: &mut Tape, l: &Linear, trainable: bool) -> Self {
        let leaf = |tape: &mut Tape, t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t.clone()) };
        LinearVars {
            weight: leaf(tape, &l.weight),
            bias: leaf(tape, &l.bias),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_bias(h, self.bias)
    }

    pub fn accumulate(&self, grads: &Gradients, l: &mut Linear) -> Result<()> {
        grads.accumulate_into(self.weight, &mut l.weight)?;
        grads.accumulate_into(self.bias, &mut l.bias)
    }
}

/// `out(act(hidden(x)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn init(rng: &mut impl Rng, input: usize, hidden: usize, output: usize, activation: Activation) -> Self {
        let h = Linear::init(rng, input, hidden);
        let o = Linear::init(rng, hidden, output);
        Mlp {
            hidden: h,
            out: o,
            activation,
        }
    }

    pub fn zero_grad(&mut self) {
        for t in [
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ] {
            t.zero_grad();
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub hidden: LinearVars,
    pub out: LinearVars,
    pub activation: Activation,
}

impl MlpVars {
    pub fn bind(tape: &mut Tape, m: &Mlp, trainable: bool) -> Self {
        MlpVars {
            hidden: LinearVars::bind(tape, &m.hidden, trainable),
            out: LinearVars::bind(tape, &m.out, trainable),
            activation: m.activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let a = match self.activation {
            Activation::Tanh => tape.tanh(h)?,
            Activation::Relu => tape.relu(h)?,
        };
        self.out.forward(tape, a)
    }

    pub fn accumulate(&self, grads: &Gradients, m: &mut Mlp) -> Result<()> {
        self.hidden.accumulate(grads, &mut m.hidden)?;
        self.out.accumulate(grads, &mut m.out)
    }
}

/// Forward pass without gradient tracking.
pub fn mlp_apply(m: &Mlp, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = MlpVars::bind(&mut tape, m, false);
    let xv = tape.constant(x.clone());
    let y = vars.forward(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}
