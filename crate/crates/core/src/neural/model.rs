use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::lstm::{lstm_step, CellState, LstmWeights, StepRecord};
use crate::data::Window;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Feature extractor in front of the MLP head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    /// Single LSTM layer; the head reads the last step's output gate.
    Lstm { input_size: usize, hidden_size: usize },
    /// No recurrence; the head reads the raw window (the FedMLP baseline).
    WindowMlp { window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub arch: Architecture,
    pub head_width: usize,
}

impl ModelShape {
    pub fn lstm(hidden_size: usize, head_width: usize) -> Self {
        Self {
            arch: Architecture::Lstm {
                input_size: 1,
                hidden_size,
            },
            head_width,
        }
    }

    pub fn window_mlp(window: usize, head_width: usize) -> Self {
        Self {
            arch: Architecture::WindowMlp { window },
            head_width,
        }
    }

    pub fn head_input(&self) -> usize {
        match self.arch {
            Architecture::Lstm { hidden_size, .. } => hidden_size,
            Architecture::WindowMlp { window } => window,
        }
    }

    pub fn parameter_count(&self) -> usize {
        let lstm = match self.arch {
            Architecture::Lstm {
                input_size,
                hidden_size,
            } => 4 * (hidden_size * hidden_size + hidden_size * input_size + hidden_size),
            Architecture::WindowMlp { .. } => 0,
        };
        lstm + self.head_width * self.head_input() + 2 * self.head_width + 1
    }

    fn validate(&self) -> Result<()> {
        let ok = self.head_width > 0
            && match self.arch {
                Architecture::Lstm {
                    input_size,
                    hidden_size,
                } => input_size > 0 && hidden_size > 0,
                Architecture::WindowMlp { window } => window > 0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("degenerate model shape {self:?}")))
        }
    }
}

/// One tanh hidden layer followed by a linear scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHead {
    pub w_hidden: Array2<f64>,
    pub b_hidden: Array1<f64>,
    pub w_out: Array1<f64>,
    pub b_out: f64,
}

impl MlpHead {
    fn zeros(input: usize, width: usize) -> Self {
        Self {
            w_hidden: Array2::zeros((width, input)),
            b_hidden: Array1::zeros(width),
            w_out: Array1::zeros(width),
            b_out: 0.0,
        }
    }

    fn uniform(input: usize, width: usize, rng: &mut Rng) -> Self {
        let b1 = 1.0 / (input as f64).sqrt();
        let b2 = 1.0 / (width as f64).sqrt();
        Self {
            w_hidden: Array2::from_shape_simple_fn((width, input), || rng.random_range(-b1..=b1)),
            b_hidden: Array1::from_shape_simple_fn(width, || rng.random_range(-b1..=b1)),
            w_out: Array1::from_shape_simple_fn(width, || rng.random_range(-b2..=b2)),
            b_out: rng.random_range(-b2..=b2),
        }
    }
}

/// Full parameter bundle exchanged between federated clients and the
/// coordinator.
///
/// The canonical flat layout is: for each gate in (forget, update, candidate,
/// output) the row-major `w_h`, row-major `w_x` and `b`; then the head's
/// row-major `w_hidden`, `b_hidden`, `w_out` and `b_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub lstm: Option<LstmWeights>,
    pub head: MlpHead,
}

const MAGIC: &[u8; 4] = b"FPMW";
const FORMAT_VERSION: u32 = 1;

impl ModelWeights {
    pub fn zeros(shape: &ModelShape) -> Self {
        let lstm = match shape.arch {
            Architecture::Lstm {
                input_size,
                hidden_size,
            } => Some(LstmWeights::zeros(hidden_size, input_size)),
            Architecture::WindowMlp { .. } => None,
        };
        Self {
            lstm,
            head: MlpHead::zeros(shape.head_input(), shape.head_width),
        }
    }

    /// Seeded uniform initialisation; LSTM weights in `±1/sqrt(hidden)`,
    /// head layers in `±1/sqrt(fan_in)`.
    pub fn init(shape: &ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = rng::seeded(seed);
        let lstm = match shape.arch {
            Architecture::Lstm {
                input_size,
                hidden_size,
            } => Some(LstmWeights::uniform(hidden_size, input_size, &mut rng)),
            Architecture::WindowMlp { .. } => None,
        };
        Ok(Self {
            lstm,
            head: MlpHead::uniform(shape.head_input(), shape.head_width, &mut rng),
        })
    }

    pub fn shape(&self) -> ModelShape {
        let arch = match &self.lstm {
            Some(l) => Architecture::Lstm {
                input_size: l.input_size(),
                hidden_size: l.hidden_size(),
            },
            None => Architecture::WindowMlp {
                window: self.head.w_hidden.ncols(),
            },
        };
        ModelShape {
            arch,
            head_width: self.head.b_hidden.len(),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        let lstm = self.lstm.iter().flat_map(|l| {
            let [f, u, c, o] = l.gates();
            f.params().chain(u.params()).chain(c.params()).chain(o.params())
        });
        lstm.chain(self.head.w_hidden.iter())
            .chain(self.head.b_hidden.iter())
            .chain(self.head.w_out.iter())
            .chain(std::iter::once(&self.head.b_out))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        let lstm = self.lstm.iter_mut().flat_map(|l| {
            let [f, u, c, o] = l.gates_mut();
            f.params_mut()
                .chain(u.params_mut())
                .chain(c.params_mut())
                .chain(o.params_mut())
        });
        lstm.chain(self.head.w_hidden.iter_mut())
            .chain(self.head.b_hidden.iter_mut())
            .chain(self.head.w_out.iter_mut())
            .chain(std::iter::once(&mut self.head.b_out))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    pub fn unflatten(shape: &ModelShape, values: &[f64]) -> Result<Self> {
        let expected = shape.parameter_count();
        if values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a model with {expected} parameters",
                values.len()
            )));
        }
        let mut model = Self::zeros(shape);
        model
            .params_mut()
            .zip(values)
            .for_each(|(dst, &src)| *dst = src);
        Ok(model)
    }

    /// Canonical byte form: magic `FPMW`, u32 format version, u32
    /// architecture tag (0 = LSTM, 1 = window MLP), three u32 dimensions
    /// (input, hidden or window, head width), then every parameter as a
    /// little-endian f64 in canonical order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.shape();
        let (tag, a, b) = match shape.arch {
            Architecture::Lstm {
                input_size,
                hidden_size,
            } => (0u32, input_size, hidden_size),
            Architecture::WindowMlp { window } => (1u32, 0, window),
        };
        let mut out = Vec::with_capacity(24 + 8 * shape.parameter_count());
        out.extend_from_slice(MAGIC);
        for v in [FORMAT_VERSION, tag, a as u32, b as u32, shape.head_width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("model bytes: {m}"));
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(bad("missing header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != FORMAT_VERSION {
            return Err(bad("unsupported format version"));
        }
        let arch = match word(1) {
            0 => Architecture::Lstm {
                input_size: word(2) as usize,
                hidden_size: word(3) as usize,
            },
            1 => Architecture::WindowMlp {
                window: word(3) as usize,
            },
            _ => return Err(bad("unknown architecture tag")),
        };
        let shape = ModelShape {
            arch,
            head_width: word(4) as usize,
        };
        shape.validate()?;
        let body = &bytes[24..];
        if body.len() != 8 * shape.parameter_count() {
            return Err(bad("payload length does not match header"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::unflatten(&shape, &values)
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch(format!(
                "model shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Activations cached by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub steps: Vec<StepRecord>,
    pub head_input: Array1<f64>,
    pub head_hidden: Array1<f64>,
}

pub fn forward(model: &ModelWeights, window: &[f64]) -> Result<(f64, Tape)> {
    let (steps, head_input) = match &model.lstm {
        Some(lstm) => {
            let input = lstm.input_size();
            if window.is_empty() || window.len() % input != 0 {
                return Err(Error::DimensionMismatch(format!(
                    "window of {} values is not a positive multiple of input size {input}",
                    window.len()
                )));
            }
            let mut state = CellState::zeros(lstm.hidden_size());
            let mut steps = Vec::with_capacity(window.len() / input);
            for x in window.chunks(input) {
                let (next, record) = lstm_step(lstm, &Array1::from(x.to_vec()), &state)?;
                state = next;
                steps.push(record);
            }
            let last = steps.last().expect("non-empty window").output.clone();
            (steps, last)
        }
        None => {
            let expected = model.head.w_hidden.ncols();
            if window.len() != expected {
                return Err(Error::DimensionMismatch(format!(
                    "window of {} values, model expects {expected}",
                    window.len()
                )));
            }
            (Vec::new(), Array1::from(window.to_vec()))
        }
    };
    let head_hidden = (model.head.w_hidden.dot(&head_input) + &model.head.b_hidden).mapv(f64::tanh);
    let prediction = model.head.w_out.dot(&head_hidden) + model.head.b_out;
    Ok((
        prediction,
        Tape {
            steps,
            head_input,
            head_hidden,
        },
    ))
}

/// Accumulates into `grad` the gradient of `d_pred * prediction`.
fn backward(model: &ModelWeights, tape: &Tape, d_pred: f64, grad: &mut ModelWeights) {
    let head = &model.head;
    grad.head.b_out += d_pred;
    grad.head.w_out.scaled_add(d_pred, &tape.head_hidden);
    let d_z1 = (&head.w_out * d_pred) * tape.head_hidden.mapv(|a| 1.0 - a * a);
    grad.head
        .w_hidden
        .scaled_add(1.0, &outer(&d_z1, &tape.head_input));
    grad.head.b_hidden += &d_z1;

    let (Some(lstm), Some(g)) = (&model.lstm, grad.lstm.as_mut()) else {
        return;
    };
    let hidden = lstm.hidden_size();
    // Only the final step's output gate reaches the head.
    let mut d_output_extra = Some(head.w_hidden.t().dot(&d_z1));
    let mut d_h = Array1::<f64>::zeros(hidden);
    let mut d_c = Array1::<f64>::zeros(hidden);

    for rec in tape.steps.iter().rev() {
        let mut d_o = &d_h * &rec.tanh_c;
        if let Some(extra) = d_output_extra.take() {
            d_o += &extra;
        }
        d_c = d_c + &d_h * &rec.output * rec.tanh_c.mapv(|t| 1.0 - t * t);

        let d_f = &d_c * &rec.c_prev;
        let d_u = &d_c * &rec.candidate;
        let d_cand = &d_c * &rec.update;
        let d_c_prev = &d_c * &rec.forget;

        let pre = [
            d_f * rec.forget.mapv(|s| s * (1.0 - s)),
            d_u * rec.update.mapv(|s| s * (1.0 - s)),
            d_cand * rec.candidate.mapv(|t| 1.0 - t * t),
            d_o * rec.output.mapv(|s| s * (1.0 - s)),
        ];

        let mut d_h_prev = Array1::<f64>::zeros(hidden);
        for ((gate, g_gate), d_a) in lstm.gates().into_iter().zip(g.gates_mut()).zip(&pre) {
            g_gate.w_h.scaled_add(1.0, &outer(d_a, &rec.h_prev));
            g_gate.w_x.scaled_add(1.0, &outer(d_a, &rec.x));
            g_gate.b += d_a;
            d_h_prev += &gate.w_h.t().dot(d_a);
        }
        d_h = d_h_prev;
        d_c = d_c_prev;
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Mean squared error over `batch` and its exact gradient.
pub fn loss_and_grad(model: &ModelWeights, batch: &[Window]) -> Result<(f64, ModelWeights)> {
    if batch.is_empty() {
        return Err(Error::Empty("loss_and_grad batch"));
    }
    let m = batch.len() as f64;
    let mut grad = ModelWeights::zeros(&model.shape());
    let mut loss = 0.0;
    for w in batch {
        let (pred, tape) = forward(model, &w.input)?;
        let residual = pred - w.target;
        loss += residual * residual;
        backward(model, &tape, 2.0 * residual / m, &mut grad);
    }
    Ok((loss / m, grad))
}

/// `theta - lr * grad`, coordinate-wise.
pub fn sgd_step(model: &ModelWeights, grad: &ModelWeights, lr: f64) -> Result<ModelWeights> {
    let mut next = model.clone();
    sgd_step_in_place(&mut next, grad, lr)?;
    Ok(next)
}

pub fn sgd_step_in_place(model: &mut ModelWeights, grad: &ModelWeights, lr: f64) -> Result<()> {
    model.check_compatible(grad)?;
    model
        .params_mut()
        .zip(grad.params())
        .for_each(|(p, g)| *p -= lr * g);
    Ok(())
}

pub fn evaluate_mse(model: &ModelWeights, pairs: &[Window]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluate_mse pairs"));
    }
    let mut total = 0.0;
    for w in pairs {
        let (pred, _) = forward(model, &w.input)?;
        total += (pred - w.target).powi(2);
    }
    Ok(total / pairs.len() as f64)
}
