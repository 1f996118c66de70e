//! Small normalizing feature extractor with a hand-written reverse pass.
//!
//! `linear`: `u = W x + b`. `mlp1`: `u = W2 tanh(W1 x + b1) + b2`. In both
//! cases the embedding is `z = u / ||u||`, so every output row lies on the
//! unit sphere and cosine similarity is a dot product downstream.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seeded_rng;

/// Raw outputs with a smaller norm than this are treated as a collapsed
/// encoder rather than normalized.
pub const MIN_OUTPUT_NORM: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("input has {found} columns, encoder expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("encoder output for row {row} has norm {norm:e}; the encoder has collapsed")]
    Collapsed { row: usize, norm: f64 },
    #[error("cache does not match this encoder or gradient: {0}")]
    CacheMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp1 { hidden: usize },
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::Linear => "linear",
            Architecture::Mlp1 { .. } => "mlp1",
        }
    }
}

/// A dense layer `y = W x + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-limit..=limit));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    arch: Architecture,
    input_dim: usize,
    embed_dim: usize,
    layers: Vec<Dense>,
}

/// Activations kept from [`Encoder::forward`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    arch: Architecture,
    inputs: Array2<f64>,
    /// `tanh` outputs of the hidden layer (`mlp1` only).
    hidden: Option<Array2<f64>>,
    embeddings: Array2<f64>,
    norms: Array1<f64>,
}

impl ForwardCache {
    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    /// Row norms of the output before normalization.
    pub fn norms(&self) -> ArrayView1<'_, f64> {
        self.norms.view()
    }
}

/// Parameter gradients (same layout as the encoder's layers) and the
/// gradient with respect to the inputs.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Dense>,
    pub inputs: Array2<f64>,
}

impl Gradients {
    /// `self += other`, layer by layer.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.weight *= factor;
            layer.bias *= factor;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in layers {
        out.extend(layer.weight.iter().copied());
        out.extend(layer.bias.iter().copied());
    }
    out
}

impl Encoder {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn new(arch: Architecture, input_dim: usize, embed_dim: usize, seed: u64) -> Result<Self, EncoderError> {
        if input_dim == 0 || embed_dim == 0 {
            return Err(EncoderError::InvalidArchitecture("dimensions must be positive".into()));
        }
        let mut rng = seeded_rng(seed, 0);
        let layers = match arch {
            Architecture::Linear => vec![Dense::glorot(&mut rng, input_dim, embed_dim)],
            Architecture::Mlp1 { hidden } => {
                if hidden == 0 {
                    return Err(EncoderError::InvalidArchitecture("hidden width must be positive".into()));
                }
                vec![
                    Dense::glorot(&mut rng, input_dim, hidden),
                    Dense::glorot(&mut rng, hidden, embed_dim),
                ]
            }
        };
        Ok(Self {
            arch,
            input_dim,
            embed_dim,
            layers,
        })
    }

    /// Builds an encoder from explicit layers, checking that their shapes chain.
    pub fn from_layers(arch: Architecture, layers: Vec<Dense>) -> Result<Self, EncoderError> {
        let expected = match arch {
            Architecture::Linear => 1,
            Architecture::Mlp1 { .. } => 2,
        };
        if layers.len() != expected {
            return Err(EncoderError::InvalidArchitecture(format!(
                "{} needs {expected} layers, got {}",
                arch.tag(),
                layers.len()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.nrows() {
                return Err(EncoderError::InvalidArchitecture(format!("layer {i} bias length")));
            }
            if i > 0 && layer.weight.ncols() != layers[i - 1].weight.nrows() {
                return Err(EncoderError::InvalidArchitecture(format!("layer {i} input width")));
            }
        }
        if let Architecture::Mlp1 { hidden } = arch {
            if layers[0].weight.nrows() != hidden {
                return Err(EncoderError::InvalidArchitecture("hidden width".into()));
            }
        }
        let input_dim = layers[0].weight.ncols();
        let embed_dim = layers[layers.len() - 1].weight.nrows();
        Ok(Self {
            arch,
            input_dim,
            embed_dim,
            layers,
        })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters in declaration order (per layer: weight row-major, then bias).
    pub fn parameters(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<(), EncoderError> {
        if values.len() != self.num_parameters() {
            return Err(EncoderError::MalformedCheckpoint(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            layer.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache), EncoderError> {
        if inputs.ncols() != self.input_dim {
            return Err(EncoderError::DimensionMismatch {
                expected: self.input_dim,
                found: inputs.ncols(),
            });
        }
        let (hidden, raw) = match self.arch {
            Architecture::Linear => (None, self.layers[0].apply(inputs)),
            Architecture::Mlp1 { .. } => {
                let h = self.layers[0].apply(inputs).mapv_into(f64::tanh);
                let raw = self.layers[1].apply(h.view());
                (Some(h), raw)
            }
        };
        let norms: Array1<f64> = raw.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        if let Some((row, &norm)) = norms.iter().enumerate().find(|(_, &n)| !(n >= MIN_OUTPUT_NORM)) {
            return Err(EncoderError::Collapsed { row, norm });
        }
        let embeddings = raw / norms.view().insert_axis(Axis(1));
        let cache = ForwardCache {
            arch: self.arch,
            inputs: inputs.to_owned(),
            hidden,
            embeddings: embeddings.clone(),
            norms,
        };
        Ok((embeddings, cache))
    }

    /// Forward pass without keeping a cache.
    pub fn embed(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>, EncoderError> {
        self.forward(inputs).map(|(z, _)| z)
    }

    /// Reverse pass. The normalization Jacobian maps an upstream gradient
    /// `g` to `(g - (g . z) z) / ||u||`, discarding its radial component.
    pub fn backward(&self, cache: &ForwardCache, grad_embeddings: ArrayView2<'_, f64>) -> Result<Gradients, EncoderError> {
        if cache.arch != self.arch || cache.inputs.ncols() != self.input_dim {
            return Err(EncoderError::CacheMismatch("architecture differs".into()));
        }
        if grad_embeddings.dim() != cache.embeddings.dim() {
            return Err(EncoderError::CacheMismatch(format!(
                "gradient shape {:?} vs embeddings {:?}",
                grad_embeddings.dim(),
                cache.embeddings.dim()
            )));
        }
        let mut grad_raw = grad_embeddings.to_owned();
        Zip::from(grad_raw.rows_mut())
            .and(cache.embeddings.rows())
            .and(&cache.norms)
            .for_each(|mut g, z, &norm| {
                let radial = g.dot(&z);
                g.scaled_add(-radial, &z);
                g /= norm;
            });

        let dense_backward = |layer: &Dense, input: ArrayView2<'_, f64>, grad_out: &Array2<f64>| {
            let grads = Dense {
                weight: grad_out.t().dot(&input),
                bias: grad_out.sum_axis(Axis(0)),
            };
            let grad_in = grad_out.dot(&layer.weight);
            (grads, grad_in)
        };

        match (&self.arch, &cache.hidden) {
            (Architecture::Linear, _) => {
                let (g, grad_in) = dense_backward(&self.layers[0], cache.inputs.view(), &grad_raw);
                Ok(Gradients {
                    layers: vec![g],
                    inputs: grad_in,
                })
            }
            (Architecture::Mlp1 { .. }, Some(hidden)) => {
                let (g2, grad_hidden) = dense_backward(&self.layers[1], hidden.view(), &grad_raw);
                // tanh' = 1 - tanh^2
                let grad_pre = grad_hidden * &hidden.mapv(|a| 1.0 - a * a);
                let (g1, grad_in) = dense_backward(&self.layers[0], cache.inputs.view(), &grad_pre);
                Ok(Gradients {
                    layers: vec![g1, g2],
                    inputs: grad_in,
                })
            }
            (Architecture::Mlp1 { .. }, None) => Err(EncoderError::CacheMismatch("missing hidden activations".into())),
        }
    }

    pub fn zero_gradients(&self) -> Vec<Dense> {
        self.layers.iter().map(Dense::zeros_like).collect()
    }

    /// Checkpoint header line, e.g. `subtail-enc v1 arch=mlp1 dims=16,32,8`.
    pub fn checkpoint_header(&self) -> String {
        let dims = match self.arch {
            Architecture::Linear => format!("{},{}", self.input_dim, self.embed_dim),
            Architecture::Mlp1 { hidden } => format!("{},{hidden},{}", self.input_dim, self.embed_dim),
        };
        format!("subtail-enc v1 arch={} dims={dims}", self.arch.tag())
    }

    /// Writes the header line followed by every parameter as little-endian f64.
    pub fn write_checkpoint(&self, out: &mut impl Write) -> Result<(), EncoderError> {
        writeln!(out, "{}", self.checkpoint_header())?;
        for v in self.parameters() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(input: &mut impl Read) -> Result<Self, EncoderError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| EncoderError::MalformedCheckpoint("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| EncoderError::MalformedCheckpoint("header is not UTF-8".into()))?;
        let (arch, input_dim, embed_dim) = parse_checkpoint_header(header)?;
        let mut encoder = Encoder::new(arch, input_dim, embed_dim, 0)?;
        let body = &bytes[newline + 1..];
        if body.len() != encoder.num_parameters() * 8 {
            return Err(EncoderError::MalformedCheckpoint(format!(
                "expected {} parameter bytes, found {}",
                encoder.num_parameters() * 8,
                body.len()
            )));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        encoder.set_parameters(&values)?;
        Ok(encoder)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EncoderError> {
        Self::read_checkpoint(&mut std::fs::File::open(path)?)
    }
}

fn parse_checkpoint_header(header: &str) -> Result<(Architecture, usize, usize), EncoderError> {
    let bad = |why: &str| EncoderError::MalformedCheckpoint(format!("{why}: {header:?}"));
    let rest = header
        .strip_prefix("subtail-enc v1 ")
        .ok_or_else(|| bad("missing `subtail-enc v1` magic"))?;
    let mut parts = rest.split_whitespace();
    let arch = parts
        .next()
        .and_then(|p| p.strip_prefix("arch="))
        .ok_or_else(|| bad("missing arch="))?;
    let dims: Vec<usize> = parts
        .next()
        .and_then(|p| p.strip_prefix("dims="))
        .ok_or_else(|| bad("missing dims="))?
        .split(',')
        .map(|d| d.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("dims must be integers"))?;
    if parts.next().is_some() {
        return Err(bad("unexpected trailing fields"));
    }
    match (arch, dims.as_slice()) {
        ("linear", &[d_in, d_emb]) => Ok((Architecture::Linear, d_in, d_emb)),
        ("mlp1", &[d_in, hidden, d_emb]) => Ok((Architecture::Mlp1 { hidden }, d_in, d_emb)),
        _ => Err(bad("arch and dims disagree")),
    }
}

/// Input-space noise that produces the augmented view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub sigma: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { sigma: 0.3 }
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every input coordinate.
pub fn augment(inputs: ArrayView2<'_, f64>, config: &AugmentationConfig, rng: &mut impl Rng) -> Array2<f64> {
    let mut out = inputs.to_owned();
    if config.sigma > 0.0 {
        out.iter_mut().for_each(|x| {
            let noise: f64 = rng.sample(StandardNormal);
            *x += config.sigma * noise;
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.5,
            momentum: 0.9,
        }
    }
}

/// SGD with heavy-ball momentum and a per-epoch cosine learning rate.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    config: OptimizerConfig,
    velocity: Vec<Dense>,
}

impl SgdMomentum {
    pub fn new(config: OptimizerConfig, encoder: &Encoder) -> Self {
        Self {
            config,
            velocity: encoder.zero_gradients(),
        }
    }

    /// `base_lr * (1 + cos(pi * epoch / total_epochs)) / 2`.
    pub fn learning_rate(&self, epoch: usize, total_epochs: usize) -> f64 {
        cosine_lr(self.config.base_lr, epoch, total_epochs)
    }

    /// `v <- mu v + g; theta <- theta - lr v`.
    pub fn step(&mut self, encoder: &mut Encoder, grads: &[Dense], epoch: usize, total_epochs: usize) -> Result<(), EncoderError> {
        if grads.len() != encoder.layers.len()
            || grads
                .iter()
                .zip(&encoder.layers)
                .any(|(g, l)| g.weight.dim() != l.weight.dim() || g.bias.dim() != l.bias.dim())
        {
            return Err(EncoderError::CacheMismatch("gradient shapes differ from parameters".into()));
        }
        let lr = self.learning_rate(epoch, total_epochs);
        let mu = self.config.momentum;
        for ((layer, v), g) in encoder.layers.iter_mut().zip(&mut self.velocity).zip(grads) {
            v.weight.zip_mut_with(&g.weight, |v, &g| *v = mu * *v + g);
            v.bias.zip_mut_with(&g.bias, |v, &g| *v = mu * *v + g);
            layer.weight.scaled_add(-lr, &v.weight);
            layer.bias.scaled_add(-lr, &v.bias);
        }
        Ok(())
    }
}

pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    let progress = epoch as f64 / total_epochs as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
