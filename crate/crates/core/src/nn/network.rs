use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layer::LayerSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Per-sample sum of squared residuals, averaged over the batch.
    L2,
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::L2 => "l2",
            LossKind::SoftmaxCrossEntropy => "softmax-ce",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(LossKind::L2),
            "softmax-ce" => Ok(LossKind::SoftmaxCrossEntropy),
            other => Err(Error::UnknownLoss(other.to_string())),
        }
    }
}

/// Quantization bookkeeping carried alongside the weights in the manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantMeta {
    pub weight_bits: u32,
    pub device_bits: u32,
    pub w_max: f64,
    pub clipped: u64,
}

/// A sequential network with optional residual edges and a flat weight
/// vector. Each weighted layer owns one contiguous slice of `weights`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    slices: Vec<Option<Range<usize>>>,
    weights: Vec<f64>,
    loss: LossKind,
    quant: Option<QuantMeta>,
}

impl Network {
    /// Validates the layer chain and allocates a zero weight vector.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, loss: LossKind) -> Result<Self> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        let mut slices = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for (i, layer) in layers.iter().enumerate() {
            let input = if i == 0 { &input_shape } else { &shapes[i - 1] };
            let source = match layer {
                LayerSpec::ResidualAdd { source, .. } if *source < i => {
                    Some(shapes[*source].as_slice())
                }
                LayerSpec::ResidualAdd { .. } => Some(&[][..]),
                _ => None,
            };
            let out = layer.output_shape(i, input, source)?;
            shapes.push(out);
            let count = layer.weight_count();
            if count > 0 {
                slices.push(Some(offset..offset + count));
                offset += count;
            } else {
                slices.push(None);
            }
        }
        if offset == 0 {
            return Err(Error::EmptyNetwork);
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            slices,
            weights: vec![0.0; offset],
            loss,
            quant: None,
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.set_weights(weights)?;
        Ok(self)
    }

    /// He-normal initialisation for weights, zeros for biases and shifts,
    /// ones for batch-norm scales.
    pub fn init_he<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (i, layer) in self.layers.iter().enumerate() {
            let Some(range) = self.slices[i].clone() else {
                continue;
            };
            let w = &mut self.weights[range];
            match *layer {
                LayerSpec::FullyConnected {
                    inputs, outputs, ..
                } => {
                    let std = (2.0 / inputs as f64).sqrt();
                    for v in &mut w[..inputs * outputs] {
                        *v = std * Distribution::<f64>::sample(&StandardNormal, rng);
                    }
                    w[inputs * outputs..].fill(0.0);
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let std = (2.0 / fan_in as f64).sqrt();
                    for v in &mut w[..fan_in * out_channels] {
                        *v = std * Distribution::<f64>::sample(&StandardNormal, rng);
                    }
                    w[fan_in * out_channels..].fill(0.0);
                }
                LayerSpec::BatchNormFolded { channels } => {
                    w[..channels].fill(1.0);
                    w[channels..].fill(0.0);
                }
                LayerSpec::ResidualAdd {
                    projection: Some(p),
                    ..
                } => {
                    let std = (2.0 / p.in_channels as f64).sqrt();
                    for v in w.iter_mut() {
                        *v = std * Distribution::<f64>::sample(&StandardNormal, rng);
                    }
                }
                _ => {}
            }
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map(Vec::as_slice).unwrap_or(&self.input_shape)
    }

    /// Output shape of layer `i` (per sample).
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Input shape of layer `i` (per sample).
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn set_loss_kind(&mut self, loss: LossKind) {
        self.loss = loss;
    }

    pub fn quant(&self) -> Option<&QuantMeta> {
        self.quant.as_ref()
    }

    pub fn set_quant(&mut self, quant: Option<QuantMeta>) {
        self.quant = quant;
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::WeightCount {
                expected: self.weights.len(),
                found: weights.len(),
            });
        }
        self.weights = weights;
        Ok(())
    }

    /// Slice of the weight vector owned by layer `i`, if any.
    pub fn layer_slice(&self, i: usize) -> Option<Range<usize>> {
        self.slices[i].clone()
    }

    pub(crate) fn layer_weights(&self, i: usize) -> &[f64] {
        match &self.slices[i] {
            Some(r) => &self.weights[r.clone()],
            None => &[],
        }
    }

    /// Layer that owns flat weight `index`.
    pub fn layer_of_weight(&self, index: usize) -> Option<usize> {
        self.slices
            .iter()
            .position(|s| s.as_ref().is_some_and(|r| r.contains(&index)))
    }

    /// Copy of this network with activation quantizers stripped from every
    /// ReLU (used where a smooth loss surface is needed).
    pub fn without_activation_quant(&self) -> Network {
        let mut out = self.clone();
        for l in &mut out.layers {
            if let LayerSpec::Relu { quant } = l {
                *quant = None;
            }
        }
        out
    }
}
