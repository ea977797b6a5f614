use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Dense affine map `y = W x + b`, `W` row-major `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            input,
            output,
            weight: vec![0.0; input * output],
            bias: vec![0.0; output],
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = || rng.uniform_in(-bound, bound);
        let weight = (0..input * output).map(|_| draw()).collect();
        let bias = (0..output).map(|_| draw()).collect();
        Self {
            input,
            output,
            weight,
            bias,
        }
    }

    /// Square identity with zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.weight[i * dim + i] = 1.0;
        }
        l
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input);
        self.weight
            .chunks_exact(self.input)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates `dW += g xᵀ`, `db += g` into `grad`; returns `Wᵀ g`.
    pub fn backward(&self, x: &[f64], g: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut gx = vec![0.0; self.input];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            grad.bias[o] += go;
            let row = &self.weight[o * self.input..(o + 1) * self.input];
            let grow = &mut grad.weight[o * self.input..(o + 1) * self.input];
            for i in 0..self.input {
                grow[i] += go * x[i];
                gx[i] += go * row[i];
            }
        }
        gx
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.weight.len() != self.input * self.output || self.bias.len() != self.output {
            return Err(Error::Domain(format!(
                "linear layer {}x{} has {} weights and {} biases",
                self.output,
                self.input,
                self.weight.len(),
                self.bias.len()
            )));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear layer parameters".into()));
        }
        Ok(())
    }
}

/// Three linear layers with ReLU between them: `d → d_h → d_h → d'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: [Linear; 3],
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    input: Vec<f64>,
    pre: [Vec<f64>; 2],
    post: [Vec<f64>; 2],
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

impl Mlp {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            layers: [
                Linear::init(input, hidden, rng),
                Linear::init(hidden, hidden, rng),
                Linear::init(hidden, output, rng),
            ],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .clone()
                .map(|l| Linear::zeros(l.input, l.output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[2].output
    }

    pub fn check(&self) -> Result<()> {
        for l in &self.layers {
            l.check()?;
        }
        if self.layers[0].output != self.layers[1].input
            || self.layers[1].output != self.layers[2].input
        {
            return Err(Error::Domain(
                "MLP layer dimensions are inconsistent".into(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_traced(x).0
    }

    pub fn forward_traced(&self, x: &[f64]) -> (Vec<f64>, MlpTrace) {
        let z1 = self.layers[0].forward(x);
        let h1 = relu(&z1);
        let z2 = self.layers[1].forward(&h1);
        let h2 = relu(&z2);
        let out = self.layers[2].forward(&h2);
        let trace = MlpTrace {
            input: x.to_vec(),
            pre: [z1, z2],
            post: [h1, h2],
        };
        (out, trace)
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient.
    /// ReLU's derivative at exactly 0 is taken as 0.
    pub fn backward(&self, trace: &MlpTrace, g_out: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mask = |g: Vec<f64>, z: &[f64]| -> Vec<f64> {
            g.into_iter()
                .zip(z)
                .map(|(g, z)| if *z > 0.0 { g } else { 0.0 })
                .collect()
        };
        let g2 = self.layers[2].backward(&trace.post[1], g_out, &mut grad.layers[2]);
        let g2 = mask(g2, &trace.pre[1]);
        let g1 = self.layers[1].backward(&trace.post[0], &g2, &mut grad.layers[1]);
        let g1 = mask(g1, &trace.pre[0]);
        self.layers[0].backward(&trace.input, &g1, &mut grad.layers[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward_backward() {
        let l = Linear {
            input: 2,
            output: 2,
            weight: vec![1.0, 2.0, -1.0, 0.5],
            bias: vec![0.1, -0.2],
        };
        assert_eq!(l.forward(&[1.0, 1.0]), vec![3.1, -0.7]);
        let mut g = Linear::zeros(2, 2);
        let gx = l.backward(&[1.0, 3.0], &[1.0, 2.0], &mut g);
        assert_eq!(gx, vec![-1.0, 3.0]);
        assert_eq!(g.weight, vec![1.0, 3.0, 2.0, 6.0]);
        assert_eq!(g.bias, vec![1.0, 2.0]);
    }

    #[test]
    fn mlp_shapes_and_init_bounds() {
        let m = Mlp::init(5, 7, 3, &mut Rng::new(1, 7));
        m.check().unwrap();
        assert_eq!(m.forward(&[0.1; 5]).len(), 3);
        assert!(m.layers[0]
            .weight
            .iter()
            .all(|w| w.abs() <= 1.0 / 5f64.sqrt()));
        assert_eq!(m, Mlp::init(5, 7, 3, &mut Rng::new(1, 7)));
    }
}
