use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine map feeding one LSTM gate: `w_h · h_prev + w_x · x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub w_h: Array2<f64>,
    pub w_x: Array2<f64>,
    pub b: Array1<f64>,
}

impl Gate {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            w_h: Array2::zeros((hidden, hidden)),
            w_x: Array2::zeros((hidden, input)),
            b: Array1::zeros(hidden),
        }
    }

    pub(crate) fn uniform(hidden: usize, input: usize, bound: f64, rng: &mut Rng) -> Self {
        let mut draw = || rng.random_range(-bound..=bound);
        Self {
            w_h: Array2::from_shape_simple_fn((hidden, hidden), &mut draw),
            w_x: Array2::from_shape_simple_fn((hidden, input), &mut draw),
            b: Array1::from_shape_simple_fn(hidden, &mut draw),
        }
    }

    fn pre_activation(&self, h_prev: &Array1<f64>, x: &Array1<f64>) -> Array1<f64> {
        self.w_h.dot(h_prev) + self.w_x.dot(x) + &self.b
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &f64> {
        self.w_h.iter().chain(self.w_x.iter()).chain(self.b.iter())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w_h
            .iter_mut()
            .chain(self.w_x.iter_mut())
            .chain(self.b.iter_mut())
    }
}

/// Parameters of a single LSTM layer, one [`Gate`] per gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmWeights {
    pub forget: Gate,
    pub update: Gate,
    pub candidate: Gate,
    pub output: Gate,
}

impl LstmWeights {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            forget: Gate::zeros(hidden, input),
            update: Gate::zeros(hidden, input),
            candidate: Gate::zeros(hidden, input),
            output: Gate::zeros(hidden, input),
        }
    }

    /// Uniform initialisation in `[-1/sqrt(hidden), 1/sqrt(hidden)]`.
    pub(crate) fn uniform(hidden: usize, input: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            forget: Gate::uniform(hidden, input, bound, rng),
            update: Gate::uniform(hidden, input, bound, rng),
            candidate: Gate::uniform(hidden, input, bound, rng),
            output: Gate::uniform(hidden, input, bound, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.forget.b.len()
    }

    pub fn input_size(&self) -> usize {
        self.forget.w_x.ncols()
    }

    pub fn gates(&self) -> [&Gate; 4] {
        [&self.forget, &self.update, &self.candidate, &self.output]
    }

    pub(crate) fn gates_mut(&mut self) -> [&mut Gate; 4] {
        [
            &mut self.forget,
            &mut self.update,
            &mut self.candidate,
            &mut self.output,
        ]
    }

    /// Checks that all gates agree on dimensions and hold finite values.
    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.hidden_size(), self.input_size());
        for (name, gate) in ["forget", "update", "candidate", "output"]
            .iter()
            .zip(self.gates())
        {
            if gate.w_h.dim() != (h, h) || gate.w_x.dim() != (h, i) || gate.b.len() != h {
                return Err(Error::DimensionMismatch(format!(
                    "{name} gate has shapes w_h={:?} w_x={:?} b={} but hidden={h} input={i}",
                    gate.w_h.dim(),
                    gate.w_x.dim(),
                    gate.b.len()
                )));
            }
            if gate.params().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} gate has non-finite weights")));
            }
        }
        Ok(())
    }
}

/// Recurrent state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

impl CellState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Array1::zeros(hidden),
            c: Array1::zeros(hidden),
        }
    }
}

/// Everything one step produced, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub x: Array1<f64>,
    pub h_prev: Array1<f64>,
    pub c_prev: Array1<f64>,
    pub forget: Array1<f64>,
    pub update: Array1<f64>,
    pub candidate: Array1<f64>,
    pub output: Array1<f64>,
    pub c: Array1<f64>,
    pub tanh_c: Array1<f64>,
}

pub fn lstm_step(w: &LstmWeights, x: &Array1<f64>, prev: &CellState) -> Result<(CellState, StepRecord)> {
    let (hidden, input) = (w.hidden_size(), w.input_size());
    if x.len() != input {
        return Err(Error::DimensionMismatch(format!(
            "input has {} entries, layer expects {input}",
            x.len()
        )));
    }
    if prev.h.len() != hidden || prev.c.len() != hidden {
        return Err(Error::DimensionMismatch(format!(
            "state has h={} c={}, layer expects {hidden}",
            prev.h.len(),
            prev.c.len()
        )));
    }

    let forget = w.forget.pre_activation(&prev.h, x).mapv(sigmoid);
    let update = w.update.pre_activation(&prev.h, x).mapv(sigmoid);
    let candidate = w.candidate.pre_activation(&prev.h, x).mapv(f64::tanh);
    let c = &forget * &prev.c + &update * &candidate;
    let output = w.output.pre_activation(&prev.h, x).mapv(sigmoid);
    let tanh_c = c.mapv(f64::tanh);
    let h = &output * &tanh_c;

    let record = StepRecord {
        x: x.clone(),
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        forget,
        update,
        candidate,
        output,
        c: c.clone(),
        tanh_c,
    };
    Ok((CellState { h, c }, record))
}
