use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{norm_cdf, Bound, Mat, ParamId, ParamStore, Tape, Var};
use crate::rng::{self, Stream};
#[allow(unused_imports)] // test builds link std, whose inherent methods take precedence
use num_traits::Float;

/// Exact GELU `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * norm_cdf(x)
}

/// `[sin(2^k π t), cos(2^k π t)]` for `k = 0..n_freqs`.
pub fn fourier_embed(t: f64, n_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n_freqs);
    for k in 0..n_freqs {
        let w = (1u64 << k) as f64 * PI;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

/// Tape version of [`fourier_embed`] for a B×1 column of times.
pub fn fourier_embed_var(tape: &mut Tape, t: Var, n_freqs: usize) -> Var {
    let mut parts = Vec::with_capacity(2 * n_freqs);
    for k in 0..n_freqs {
        let w = (1u64 << k) as f64 * PI;
        let arg = tape.scale(t, w);
        parts.push(tape.sin(arg));
        parts.push(tape.cos(arg));
    }
    tape.concat(&parts)
}

/// Glorot-uniform `fan_in × fan_out` matrix.
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Stream) -> Mat {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_fn(fan_in, fan_out, |_, _| rng::uniform(rng, -s, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Stream) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(fan_in, fan_out, rng));
        let bias = store.add(format!("{name}.bias"), Mat::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, p.var(self.weight));
        tape.add_bias(h, p.var(self.bias))
    }
}

/// Multilayer perceptron: affine + GELU per hidden layer, plain affine output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    sizes: Vec<usize>,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`.
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut Stream) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, sizes: sizes.to_vec() }
    }

    /// Re-attaches to parameters already registered under `name`.
    pub fn from_store(store: &ParamStore, name: &str, sizes: &[usize]) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let find = |suffix: &str, shape: (usize, usize)| {
                let key = format!("{name}.{i}.{suffix}");
                let id = store.id(&key).ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {key}")))?;
                if store.value(id).shape() != shape {
                    return Err(Error::ShapeMismatch(format!("{key} has shape {:?}, expected {shape:?}", store.value(id).shape())));
                }
                Ok(id)
            };
            layers.push(Dense { weight: find("weight", (w[0], w[1]))?, bias: find("bias", (1, w[1]))? });
        }
        Ok(Self { layers, sizes: sizes.to_vec() })
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h);
            if i < last {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    /// Forward pass plus exact directional derivatives along input axes.
    ///
    /// Returns the output and, for every index in `axes`, the derivative of
    /// the output with respect to that input column. The tangents are tape
    /// nodes, so they can themselves be differentiated.
    pub fn forward_with_tangents(&self, tape: &mut Tape, p: &Bound, x: Var, axes: &[usize]) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape, x)?;
        let rows = tape.shape(x).0;
        let first = self.layers[0];
        let mut h = first.forward(tape, p, x);
        let mut tangents: Vec<Var> = axes.iter().map(|&a| tape.broadcast_row(p.var(first.weight), a, rows)).collect();
        for layer in &self.layers[1..] {
            let slope = tape.gelu_deriv(h);
            h = tape.gelu(h);
            h = layer.forward(tape, p, h);
            for t in tangents.iter_mut() {
                let scaled = tape.mul(slope, *t);
                *t = tape.matmul(scaled, p.var(layer.weight));
            }
        }
        Ok((h, tangents))
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let cols = tape.shape(x).1;
        if cols != self.sizes[0] {
            return Err(Error::ShapeMismatch(format!("MLP expects {} inputs, got {cols}", self.sizes[0])));
        }
        Ok(())
    }
}

/// Gated recurrent unit with gates stacked as `[reset | update | candidate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b_x: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Stream) -> Self {
        let w_x = store.add(format!("{name}.w_x"), glorot(input, 3 * hidden, rng));
        let w_h = store.add(format!("{name}.w_h"), glorot(hidden, 3 * hidden, rng));
        let b_x = store.add(format!("{name}.b_x"), Mat::zeros(1, 3 * hidden));
        let b_h = store.add(format!("{name}.b_h"), Mat::zeros(1, 3 * hidden));
        Self { w_x, w_h, b_x, b_h, input, hidden }
    }

    pub fn from_store(store: &ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let find = |suffix: &str, shape: (usize, usize)| {
            let key = format!("{name}.{suffix}");
            let id = store.id(&key).ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {key}")))?;
            if store.value(id).shape() != shape {
                return Err(Error::ShapeMismatch(format!("{key} has the wrong shape")));
            }
            Ok(id)
        };
        Ok(Self {
            w_x: find("w_x", (input, 3 * hidden))?,
            w_h: find("w_h", (hidden, 3 * hidden))?,
            b_x: find("b_x", (1, 3 * hidden))?,
            b_h: find("b_h", (1, 3 * hidden))?,
            input,
            hidden,
        })
    }

    /// One recurrence step:
    /// `r = σ(x W_r + h U_r + b)`, `u = σ(x W_u + h U_u + b)`,
    /// `n = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))`, `h' = h + u ⊙ (n - h)`.
    pub fn cell(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let gx = tape.matmul(x, p.var(self.w_x));
        let gx = tape.add_bias(gx, p.var(self.b_x));
        let gh = tape.matmul(h, p.var(self.w_h));
        let gh = tape.add_bias(gh, p.var(self.b_h));
        let x_ru = tape.slice(gx, 0, 2 * hd);
        let h_ru = tape.slice(gh, 0, 2 * hd);
        let ru = tape.add(x_ru, h_ru);
        let ru = tape.sigmoid(ru);
        let r = tape.slice(ru, 0, hd);
        let u = tape.slice(ru, hd, hd);
        let x_n = tape.slice(gx, 2 * hd, hd);
        let h_n = tape.slice(gh, 2 * hd, hd);
        let gated = tape.mul(r, h_n);
        let n = tape.add(x_n, gated);
        let n = tape.tanh(n);
        let delta = tape.sub(n, h);
        let step = tape.mul(u, delta);
        tape.add(h, step)
    }

    /// Runs the recurrence from a zero state and returns the final hidden state.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, seq: &[Var]) -> Result<Var> {
        let first = *seq.first().ok_or(Error::EmptySequence)?;
        let rows = tape.shape(first).0;
        let mut h = tape.constant(Mat::zeros(rows, self.hidden));
        for &x in seq {
            if tape.shape(x) != (rows, self.input) {
                return Err(Error::ShapeMismatch(format!(
                    "GRU step input {:?}, expected ({rows}, {})",
                    tape.shape(x),
                    self.input
                )));
            }
            h = self.cell(tape, p, x, h);
        }
        Ok(h)
    }
}
