//! Fixed-topology feed-forward controllers decoded from flat genomes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("genome has {got} weights, topology {spec} needs {expected}")]
    LengthMismatch {
        spec: ControllerSpec,
        expected: usize,
        got: usize,
    },
}

/// Single hidden layer topology. Hidden units use `tanh`; outputs use a
/// logistic mapped onto the actuator range `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl ControllerSpec {
    pub fn new(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            inputs,
            hidden,
            outputs,
        }
    }

    /// `(inputs + 1) * hidden + (hidden + 1) * outputs`
    pub fn genome_len(&self) -> usize {
        (self.inputs + 1) * self.hidden + (self.hidden + 1) * self.outputs
    }
}

impl std::fmt::Display for ControllerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}-{}", self.inputs, self.hidden, self.outputs)
    }
}

/// Directly encoded network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome(pub Vec<f64>);

impl Genome {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A decoded network. Weights are laid out hidden unit by hidden unit
/// (`inputs` weights then the bias), followed by output unit by output unit
/// (`hidden` weights then the bias).
#[derive(Debug, Clone)]
pub struct Controller {
    spec: ControllerSpec,
    weights: Vec<f64>,
    hidden: Vec<f64>,
}

pub fn build_controller(g: &Genome, spec: ControllerSpec) -> Result<Controller, ControllerError> {
    if g.len() != spec.genome_len() {
        return Err(ControllerError::LengthMismatch {
            spec,
            expected: spec.genome_len(),
            got: g.len(),
        });
    }
    Ok(Controller {
        spec,
        weights: g.0.clone(),
        hidden: vec![0.0; spec.hidden],
    })
}

impl Controller {
    pub fn spec(&self) -> ControllerSpec {
        self.spec
    }

    pub fn compute(&mut self, inputs: &[f64], outputs: &mut [f64]) {
        let ControllerSpec {
            inputs: n_in,
            hidden: n_hid,
            outputs: n_out,
        } = self.spec;
        debug_assert_eq!(inputs.len(), n_in);
        debug_assert_eq!(outputs.len(), n_out);
        let (hidden_w, output_w) = self.weights.split_at((n_in + 1) * n_hid);
        for (h, w) in self.hidden.iter_mut().zip(hidden_w.chunks_exact(n_in + 1)) {
            let sum: f64 = w[..n_in]
                .iter()
                .zip(inputs)
                .map(|(w, x)| w * x)
                .sum::<f64>()
                + w[n_in];
            *h = sum.tanh();
        }
        for (o, w) in outputs.iter_mut().zip(output_w.chunks_exact(n_hid + 1)) {
            let sum: f64 = w[..n_hid]
                .iter()
                .zip(&self.hidden)
                .map(|(w, h)| w * h)
                .sum::<f64>()
                + w[n_hid];
            *o = 2.0 / (1.0 + (-sum).exp()) - 1.0;
        }
    }

    pub fn outputs_for(&mut self, inputs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.outputs];
        self.compute(inputs, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn genome_length() {
        assert_eq!(ControllerSpec::new(6, 8, 2).genome_len(), 7 * 8 + 9 * 2);
        let err = build_controller(&Genome::zeros(3), ControllerSpec::new(6, 8, 2)).unwrap_err();
        assert!(matches!(
            err,
            ControllerError::LengthMismatch {
                expected: 74,
                got: 3,
                ..
            }
        ));
    }

    #[test]
    fn zero_genome_outputs_midpoint() {
        let spec = ControllerSpec::new(3, 4, 2);
        let mut c = build_controller(&Genome::zeros(spec.genome_len()), spec).unwrap();
        assert_eq!(c.outputs_for(&[5.0, -1.0, 0.3]), vec![0.0, 0.0]);
    }

    #[test]
    fn single_output_weight_is_monotone() {
        let spec = ControllerSpec::new(1, 1, 1);
        // hidden = tanh(w0 * x + b0); output = sigmoid(w1 * hidden + b1)
        let g = Genome(vec![1.0, 0.0, 2.0, 0.0]);
        let mut c = build_controller(&g, spec).unwrap();
        let mut prev = -1.0;
        for i in -10..=10 {
            let y = c.outputs_for(&[i as f64 * 0.3])[0];
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = ControllerSpec::new(5, 7, 3);
        let g = Genome(
            (0..spec.genome_len())
                .map(|_| rng.gen_range(-3.0..3.0))
                .collect(),
        );
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // rebuild explicit matrices
        let mut w1 = vec![vec![0.0; 6]; 7];
        let mut w2 = vec![vec![0.0; 8]; 3];
        let mut it = g.0.iter();
        for row in w1.iter_mut() {
            for v in row.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        for row in w2.iter_mut() {
            for v in row.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        let mut xb = x.clone();
        xb.push(1.0);
        let mut h: Vec<f64> = w1
            .iter()
            .map(|r| r.iter().zip(&xb).map(|(a, b)| a * b).sum::<f64>().tanh())
            .collect();
        h.push(1.0);
        let expected: Vec<f64> = w2
            .iter()
            .map(|r| {
                let s: f64 = r.iter().zip(&h).map(|(a, b)| a * b).sum();
                2.0 / (1.0 + (-s).exp()) - 1.0
            })
            .collect();
        let got = build_controller(&g, spec).unwrap().outputs_for(&x);
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
