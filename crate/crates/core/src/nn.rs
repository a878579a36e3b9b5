//! Feedforward ReLU networks with a bounded output map.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{matmul, tanh_ratio, Mat, Tape, Var};
use crate::error::{config, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
    UnitBall,
}

impl OutputActivation {
    fn code(self) -> u8 {
        match self {
            OutputActivation::Identity => 0,
            OutputActivation::Tanh => 1,
            OutputActivation::UnitBall => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(OutputActivation::Identity),
            1 => Some(OutputActivation::Tanh),
            2 => Some(OutputActivation::UnitBall),
            _ => None,
        }
    }

    pub fn apply(self, y: &mut [f64]) {
        match self {
            OutputActivation::Identity => {}
            OutputActivation::Tanh => y.iter_mut().for_each(|v| *v = v.tanh()),
            OutputActivation::UnitBall => {
                let s: f64 = y.iter().map(|v| v * v).sum();
                let h = tanh_ratio(s, 0);
                y.iter_mut().for_each(|v| *v *= h);
            }
        }
    }

    pub fn trace(self, tape: &Tape, y: Var) -> Var {
        match self {
            OutputActivation::Identity => y,
            OutputActivation::Tanh => tape.tanh(y),
            OutputActivation::UnitBall => tape.unit_ball(y),
        }
    }
}

const MAGIC: &[u8; 4] = b"DGNW";
const VERSION: u8 = 1;

/// Parameters of a network in N_{d0,d1,L,m}: L hidden ReLU layers of width m.
///
/// Flat layout, layer by layer: `W_i` row-major with shape `out x in`,
/// then the bias `β_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub d_in: usize,
    pub d_out: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: OutputActivation,
    pub params: Vec<f64>,
}

pub fn param_count(d_in: usize, d_out: usize, hidden_layers: usize, width: usize) -> usize {
    (d_in * width + width) + (hidden_layers - 1) * (width * width + width) + (width * d_out + d_out)
}

impl Network {
    pub fn new(
        d_in: usize,
        d_out: usize,
        hidden_layers: usize,
        width: usize,
        activation: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 || width == 0 || hidden_layers == 0 {
            return config(format!(
                "invalid network dims d0={d_in} d1={d_out} L={hidden_layers} m={width}"
            ));
        }
        let mut net = Network {
            d_in,
            d_out,
            hidden_layers,
            width,
            activation,
            params: vec![0.0; param_count(d_in, d_out, hidden_layers, width)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for (o, i) in net.layer_shapes() {
            let lim = (6.0 / (i + o) as f64).sqrt();
            let dist = Uniform::new_inclusive(-lim, lim);
            for w in &mut net.params[offset..offset + o * i] {
                *w = dist.sample(&mut rng);
            }
            offset += o * i + o;
        }
        Ok(net)
    }

    /// `(out, in)` for each affine map.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut v = vec![(self.width, self.d_in)];
        for _ in 1..self.hidden_layers {
            v.push((self.width, self.width));
        }
        v.push((self.d_out, self.width));
        v
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Weight matrices and biases as separate blocks.
    pub fn layers(&self) -> Vec<(Mat, Vec<f64>)> {
        let mut out = Vec::new();
        let mut off = 0;
        for (o, i) in self.layer_shapes() {
            let w = Mat::from_vec(o, i, self.params[off..off + o * i].to_vec());
            off += o * i;
            out.push((w, self.params[off..off + o].to_vec()));
            off += o;
        }
        out
    }

    /// Batched evaluation; rows of `x` are inputs.
    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        if x.cols != self.d_in {
            return config(format!("network expects {} inputs, got {}", self.d_in, x.cols));
        }
        let mut h = x.clone();
        let shapes = self.layer_shapes();
        let last = shapes.len() - 1;
        let mut off = 0;
        for (li, (o, i)) in shapes.into_iter().enumerate() {
            let w = Mat::from_vec(o, i, self.params[off..off + o * i].to_vec());
            off += o * i;
            let b = &self.params[off..off + o];
            off += o;
            let mut z = matmul(&h, &w, false, true);
            for row in z.data.chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v += bb;
                    if li < last && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            h = z;
        }
        for row in h.data.chunks_mut(self.d_out) {
            self.activation.apply(row);
        }
        Ok(h)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Mat::row(x))?.data)
    }

    /// Records the forward pass with parameters taken from the `1 x P` row `theta`.
    pub fn trace(&self, tape: &Tape, theta: Var, x: Var) -> Var {
        let shapes = self.layer_shapes();
        let last = shapes.len() - 1;
        let mut h = x;
        let mut off = 0;
        for (li, (o, i)) in shapes.into_iter().enumerate() {
            let w = tape.slice(theta, off, o, i);
            off += o * i;
            let b = tape.slice(theta, off, 1, o);
            off += o;
            let z = tape.matmul(h, w, false, true);
            let z = tape.add_row(z, b);
            h = if li < last { tape.relu(z) } else { z };
        }
        self.activation.trace(tape, h)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(26 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.activation.code());
        for d in [self.d_in, self.d_out, self.hidden_layers, self.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let load = |m: &str| Error::Load(m.to_string());
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(load("missing weight-file header"));
        }
        if bytes.len() < 6 {
            return Err(load("truncated header"));
        }
        if bytes[4] != VERSION {
            return Err(Error::Load(format!(
                "unsupported weight-file version {} (expected {VERSION})",
                bytes[4]
            )));
        }
        let activation = OutputActivation::from_code(bytes[5]).ok_or_else(|| load("unknown output activation"))?;
        if bytes.len() < 30 {
            return Err(load("truncated header"));
        }
        let dim = |k: usize| u32::from_le_bytes(bytes[6 + 4 * k..10 + 4 * k].try_into().unwrap()) as usize;
        let (d_in, d_out, hidden_layers, width) = (dim(0), dim(1), dim(2), dim(3));
        if d_in == 0 || d_out == 0 || width == 0 || hidden_layers == 0 {
            return Err(load("invalid dims in header"));
        }
        let n = u64::from_le_bytes(bytes[22..30].try_into().unwrap()) as usize;
        if n != param_count(d_in, d_out, hidden_layers, width) {
            return Err(load("parameter count does not match dims"));
        }
        let body = &bytes[30..];
        if body.len() != 8 * n {
            return Err(Error::Load(format!("expected {} parameter bytes, found {}", 8 * n, body.len())));
        }
        let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Network { d_in, d_out, hidden_layers, width, activation, params })
    }
}
