//! The trainable embedding function: a small MLP whose output is scaled to
//! unit length, with exact reverse-mode gradients.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{dot, norm, RngSeed};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 32,
            hidden_dims: vec![64, 64],
            embed_dim: 128,
            activation: Activation::Relu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("encoder input_dim must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("encoder hidden widths must be positive".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("encoder embed_dim must be at least 2".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    fn layer_offsets(&self) -> Vec<LayerSlot> {
        let mut off = 0;
        self.layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let slot = LayerSlot {
                    fan_in,
                    fan_out,
                    weight: off,
                    bias: off + fan_in * fan_out,
                };
                off += fan_in * fan_out + fan_out;
                slot
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: usize,
}

/// Encoder weights in one flat array.
///
/// Layout, per layer from input to output: the `fan_out x fan_in` weight
/// matrix in row-major order, then the `fan_out` bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    slots: Vec<LayerSlot>,
    values: Vec<f64>,
}

impl EncoderParams {
    pub fn from_flat(config: EncoderConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if values.len() != config.num_params() {
            return Err(Error::Dimension(format!(
                "{} parameters supplied, config needs {}",
                values.len(),
                config.num_params()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        let slots = config.layer_offsets();
        Ok(EncoderParams {
            config,
            slots,
            values,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn num_layers(&self) -> usize {
        self.slots.len()
    }

    /// Weight (row-major, `fan_out x fan_in`) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let s = self.slots[l];
        (
            &self.values[s.weight..s.bias],
            &self.values[s.bias..s.bias + s.fan_out],
        )
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let s = self.slots[l];
        let (w, rest) = self.values[s.weight..].split_at_mut(s.fan_in * s.fan_out);
        (w, &mut rest[..s.fan_out])
    }
}

/// A unit-length embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Anything that maps a raw feature vector to an embedding.
pub trait Embedder {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn embed(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn embed_all(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.embed(x)).collect()
    }
}

impl Embedder for EncoderParams {
    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn output_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward(self, x).map(Embedding::into_inner)
    }
}

/// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
pub fn init_params(config: &EncoderConfig, seed: RngSeed) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = seed.rng();
    let mut values = vec![0.0; config.num_params()];
    for s in config.layer_offsets() {
        let std = (2.0 / s.fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut values[s.weight..s.bias] {
            *w = normal.sample(&mut rng);
        }
    }
    EncoderParams::from_flat(config.clone(), values)
}

/// Per-sample intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
struct SampleTrace {
    /// `activations[0]` is the input; `activations[l + 1]` is the output of
    /// layer `l` (after the nonlinearity for hidden layers, raw for the last).
    activations: Vec<Vec<f64>>,
    /// Pre-activation values of hidden layers.
    pre: Vec<Vec<f64>>,
    norm: f64,
    output: Vec<f64>,
}

/// Forward pass over a batch, retaining what [`Trace::backward`] needs.
#[derive(Debug, Clone)]
pub struct Trace {
    samples: Vec<SampleTrace>,
}

impl Trace {
    pub fn embeddings(&self) -> Vec<Embedding> {
        self.samples
            .iter()
            .map(|s| Embedding(s.output.clone()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Parameter gradient given `upstream[i] = dL/d(embedding i)`.
    pub fn backward<V: AsRef<[f64]>>(&self, params: &EncoderParams, upstream: &[V]) -> Result<Vec<f64>> {
        if upstream.len() != self.samples.len() {
            return Err(Error::Dimension(format!(
                "{} upstream gradients for {} samples",
                upstream.len(),
                self.samples.len()
            )));
        }
        let cfg = &params.config;
        let mut grad = vec![0.0; params.values.len()];
        let last = params.slots.len() - 1;
        for (trace, up) in self.samples.iter().zip(upstream) {
            let up = up.as_ref();
            if up.len() != cfg.embed_dim {
                return Err(Error::Dimension(format!(
                    "upstream gradient of length {}, embed_dim is {}",
                    up.len(),
                    cfg.embed_dim
                )));
            }
            // through y = z / ‖z‖: dz = (g − y (y·g)) / ‖z‖
            let proj = dot(&trace.output, up);
            let mut delta: Vec<f64> = up
                .iter()
                .zip(&trace.output)
                .map(|(g, y)| (g - y * proj) / trace.norm)
                .collect();

            for l in (0..=last).rev() {
                let s = params.slots[l];
                let input = &trace.activations[l];
                {
                    let gw = &mut grad[s.weight..s.bias];
                    for (o, &d) in delta.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let row = &mut gw[o * s.fan_in..(o + 1) * s.fan_in];
                        for (g, x) in row.iter_mut().zip(input) {
                            *g += d * x;
                        }
                    }
                    for (g, d) in grad[s.bias..s.bias + s.fan_out].iter_mut().zip(&delta) {
                        *g += d;
                    }
                }
                if l == 0 {
                    break;
                }
                let w = &params.values[s.weight..s.bias];
                let mut below = vec![0.0; s.fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (b, wv) in below.iter_mut().zip(&w[o * s.fan_in..(o + 1) * s.fan_in]) {
                        *b += d * wv;
                    }
                }
                let pre = &trace.pre[l - 1];
                let post = &trace.activations[l];
                for ((b, &x), &y) in below.iter_mut().zip(pre).zip(post) {
                    *b *= cfg.activation.derivative(x, y);
                }
                delta = below;
            }
        }
        Ok(grad)
    }
}

fn forward_one(params: &EncoderParams, x: &[f64]) -> Result<SampleTrace> {
    let cfg = &params.config;
    if x.len() != cfg.input_dim {
        return Err(Error::Dimension(format!(
            "input of length {}, encoder expects {}",
            x.len(),
            cfg.input_dim
        )));
    }
    let last = params.slots.len() - 1;
    let mut activations = Vec::with_capacity(params.slots.len() + 1);
    let mut pre = Vec::with_capacity(last);
    activations.push(x.to_vec());
    for (l, s) in params.slots.iter().enumerate() {
        let w = &params.values[s.weight..s.bias];
        let b = &params.values[s.bias..s.bias + s.fan_out];
        let input = &activations[l];
        let z: Vec<f64> = (0..s.fan_out)
            .map(|o| dot(&w[o * s.fan_in..(o + 1) * s.fan_in], input) + b[o])
            .collect();
        if l < last {
            let a = z.iter().map(|&v| cfg.activation.apply(v)).collect();
            pre.push(z);
            activations.push(a);
        } else {
            activations.push(z);
        }
    }
    let z = activations.last().expect("at least one layer");
    let n = norm(z);
    if !n.is_finite() {
        return Err(Error::NonFinite("encoder output".into()));
    }
    if n == 0.0 {
        return Err(Error::Degenerate(
            "encoder produced a zero vector before normalization".into(),
        ));
    }
    let output = z.iter().map(|v| v / n).collect();
    Ok(SampleTrace {
        activations,
        pre,
        norm: n,
        output,
    })
}

/// Embeds one feature vector.
pub fn forward(params: &EncoderParams, x: &[f64]) -> Result<Embedding> {
    forward_one(params, x).map(|t| Embedding(t.output))
}

pub fn forward_batch<V: AsRef<[f64]>>(params: &EncoderParams, xs: &[V]) -> Result<Vec<Embedding>> {
    xs.iter().map(|x| forward(params, x.as_ref())).collect()
}

pub fn forward_traced<V: AsRef<[f64]>>(params: &EncoderParams, xs: &[V]) -> Result<Trace> {
    let samples = xs
        .iter()
        .map(|x| forward_one(params, x.as_ref()))
        .collect::<Result<_>>()?;
    Ok(Trace { samples })
}

/// Gradient of the loss with respect to every parameter, given the loss
/// gradient on each embedding of `inputs`.
pub fn backward<V: AsRef<[f64]>, G: AsRef<[f64]>>(
    params: &EncoderParams,
    inputs: &[V],
    upstream: &[G],
) -> Result<Vec<f64>> {
    if inputs.len() != upstream.len() {
        return Err(Error::Dimension(format!(
            "{} inputs but {} upstream gradients",
            inputs.len(),
            upstream.len()
        )));
    }
    forward_traced(params, inputs)?.backward(params, upstream)
}
