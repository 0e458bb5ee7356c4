//! Feed-forward networks with hand-written reverse mode and an Adam optimiser.
//!
//! Weights follow the `out × in` convention, so a layer computes
//! `Y = act(X Wᵀ + b)` for a batch `X` stored one sample per row.

use std::io::{BufRead, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Linear => v,
        }
    }

    // Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }

    fn parse(tag: &str) -> Result<Self> {
        match tag {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Checkpoint(format!("unknown activation `{other}`"))),
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Layer>,
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations cached by [`Mlp::forward`] for one subsequent backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    version: u64,
    // inputs[k] feeds layer k; outputs[k] is its post-activation result.
    inputs: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

/// Parameter gradients with the same layout as the network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            weights: net.layers.iter().map(|l| Matrix::zeros(l.out_dim(), l.in_dim())).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.axpy(1.0, b).expect("gradient shapes match");
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| w.scale_in_place(s));
        self.biases.iter_mut().for_each(|b| b.iter_mut().for_each(|v| *v *= s));
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.as_slice().iter().chain(b.iter()).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }
}

impl Mlp {
    /// Glorot-uniform weights `U(±√(6/(fan_in+fan_out)))`, zero biases.
    ///
    /// `dims` lists layer widths from input to output; `hidden` applies to every
    /// layer but the last, which uses `output`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an Mlp needs at least input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (dims[k], dims[k + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                    activation: if k + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Mlp {
            layers,
            version: fresh_version(),
        }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layers", "an Mlp needs at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::dims("Mlp bias", l.out_dim(), l.bias.len()));
            }
            if k > 0 && layers[k - 1].out_dim() != l.in_dim() {
                return Err(Error::dims("Mlp layer chain", layers[k - 1].out_dim(), l.in_dim()));
            }
        }
        Ok(Mlp {
            layers,
            version: fresh_version(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the parameters; invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version = fresh_version();
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::dims("Mlp::set_params", self.num_params(), values.len()));
        }
        let mut it = values.iter().copied();
        for l in self.layers_mut() {
            for w in l.weight.as_mut_slice() {
                *w = it.next().expect("counted");
            }
            for b in &mut l.bias {
                *b = it.next().expect("counted");
            }
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut cur = self.check_input(x)?.clone();
        for layer in &self.layers {
            cur = layer_forward(layer, &cur)?;
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let out = layer_forward(layer, &cur)?;
            inputs.push(cur);
            cur = out.clone();
            outputs.push(out);
        }
        if !cur.is_finite() {
            return Err(Error::NonFinite("Mlp forward output".into()));
        }
        Ok((
            cur,
            Tape {
                version: self.version,
                inputs,
                outputs,
            },
        ))
    }

    /// Reverse pass. Returns parameter gradients and `∂L/∂X = Jᵀ dY`.
    pub fn backward(&self, tape: &Tape, dy: &Matrix) -> Result<(MlpGrads, Matrix)> {
        self.backward_scaled(tape, dy, None)
    }

    /// Reverse pass with the contribution of sample `i` multiplied by `scale[i]`.
    pub fn backward_scaled(&self, tape: &Tape, dy: &Matrix, scale: Option<&[f64]>) -> Result<(MlpGrads, Matrix)> {
        if tape.version != self.version || tape.inputs.len() != self.layers.len() {
            return Err(Error::StaleTape);
        }
        let last = tape.outputs.last().expect("non-empty tape");
        if dy.shape() != last.shape() {
            return Err(Error::dims("Mlp::backward dY", format!("{:?}", last.shape()), format!("{:?}", dy.shape())));
        }
        let mut delta = match scale {
            Some(s) => dy.scale_rows(s)?,
            None => dy.clone(),
        };
        let mut grads = MlpGrads::zeros_like(self);
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let out = &tape.outputs[k];
            if layer.activation != Activation::Linear {
                for (d, &y) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *d *= layer.activation.derivative_from_output(y);
                }
            }
            grads.weights[k] = delta.t_matmul(&tape.inputs[k])?;
            let bias = &mut grads.biases[k];
            for i in 0..delta.rows() {
                for (b, d) in bias.iter_mut().zip(delta.row(i)) {
                    *b += d;
                }
            }
            delta = delta.matmul(&layer.weight)?;
        }
        Ok((grads, delta))
    }

    fn check_input<'a>(&self, x: &'a Matrix) -> Result<&'a Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::dims("Mlp input", self.input_dim(), x.cols()));
        }
        Ok(x)
    }

    /// Shape header used by the checkpoint format, e.g. `mlp 2 30x64:relu 64x32:linear`.
    pub fn header(&self) -> String {
        let mut s = format!("mlp {}", self.layers.len());
        for l in &self.layers {
            s.push_str(&format!(" {}x{}:{}", l.in_dim(), l.out_dim(), l.activation.tag()));
        }
        s
    }

    /// Writes the header line followed by weights then biases of each layer as
    /// little-endian `f64`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{}", self.header())?;
        for l in &self.layers {
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some("mlp") {
            return Err(Error::Checkpoint(format!("expected `mlp` header, got `{}`", line.trim())));
        }
        let count: usize = parts
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing layer count".into()))?;
        let mut layers = Vec::with_capacity(count);
        let specs: Vec<&str> = parts.collect();
        if specs.len() != count {
            return Err(Error::Checkpoint(format!("header lists {} layers, expected {count}", specs.len())));
        }
        for spec in specs {
            let (shape, act) = spec
                .split_once(':')
                .ok_or_else(|| Error::Checkpoint(format!("bad layer spec `{spec}`")))?;
            let (i, o) = shape
                .split_once('x')
                .and_then(|(i, o)| Some((i.parse::<usize>().ok()?, o.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::Checkpoint(format!("bad layer shape `{shape}`")))?;
            let weight = Matrix::from_vec(o, i, read_f64s(r, i * o)?)?;
            let bias = read_f64s(r, o)?;
            layers.push(Layer {
                weight,
                bias,
                activation: Activation::parse(act)?,
            });
        }
        Mlp::from_layers(layers)
    }
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated payload: {e}")))?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn layer_forward(layer: &Layer, x: &Matrix) -> Result<Matrix> {
    let mut y = x.matmul_t(&layer.weight)?;
    let act = layer.activation;
    for i in 0..y.rows() {
        for (v, b) in y.row_mut(i).iter_mut().zip(&layer.bias) {
            *v = act.apply(*v + b);
        }
    }
    Ok(y)
}

/// Adam with bias correction, coupled L2 weight decay and a step-wise
/// learning-rate decay (`lr · factor^⌊epoch / every⌋`).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    step: u64,
    epoch: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            decay_factor: 0.2,
            decay_every: 50,
        }
    }
}

impl Adam {
    pub fn new(cfg: AdamConfig, num_params: usize) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            decay_factor: cfg.decay_factor,
            decay_every: cfg.decay_every,
            step: 0,
            epoch: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn for_net(cfg: AdamConfig, net: &Mlp) -> Self {
        Adam::new(cfg, net.num_params())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn current_lr(&self) -> f64 {
        let decays = if self.decay_every == 0 { 0 } else { self.epoch / self.decay_every };
        self.lr * self.decay_factor.powi(decays as i32)
    }

    /// One update of a flat parameter vector.
    pub fn step_params(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dims("Adam::step", self.m.len(), grads.len()));
        }
        if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {pos} is {}", grads[pos])));
        }
        self.step += 1;
        let lr = self.current_lr();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        let mut params = net.params();
        let flat: Vec<f64> = grads.iter().collect();
        self.step_params(&mut params, &flat)?;
        net.set_params(&params)
    }
}

/// Per-row standardisation without affine parameters:
/// `zᵢ = (yᵢ − mean(yᵢ)) / √(var(yᵢ) + ε)`. Returns `z` and the per-row
/// `1/√(var + ε)` needed by [`layer_norm_backward`].
pub fn layer_norm(y: &Matrix) -> (Matrix, Vec<f64>) {
    const EPS: f64 = 1e-5;
    let d = y.cols().max(1) as f64;
    let mut z = y.clone();
    let mut inv = Vec::with_capacity(y.rows());
    for i in 0..y.rows() {
        let row = z.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let s = 1.0 / (var + EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
        inv.push(s);
    }
    (z, inv)
}

/// `∂L/∂y` from `∂L/∂z` for [`layer_norm`].
pub fn layer_norm_backward(z: &Matrix, inv_std: &[f64], dz: &Matrix) -> Result<Matrix> {
    if z.shape() != dz.shape() || inv_std.len() != z.rows() {
        return Err(Error::dims("layer_norm_backward", format!("{:?}", z.shape()), format!("{:?}", dz.shape())));
    }
    let d = z.cols().max(1) as f64;
    let mut dy = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let (zr, gr) = (z.row(i), dz.row(i));
        let mean_g = gr.iter().sum::<f64>() / d;
        let mean_gz = gr.iter().zip(zr).map(|(g, z)| g * z).sum::<f64>() / d;
        for (o, (g, zv)) in dy.row_mut(i).iter_mut().zip(gr.iter().zip(zr)) {
            *o = inv_std[i] * (g - mean_g - zv * mean_gz);
        }
    }
    Ok(dy)
}
