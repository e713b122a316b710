//! Quantization-aware training with straight-through weight quantization.
//!
//! Full-precision shadow weights are kept for the optimizer. Every step the
//! forward/backward pass runs on their quantized copy (global scale from the
//! current largest magnitude) and the gradient is applied to the shadow
//! weights unchanged. Activation quantization lives in the network's ReLU
//! layers and is handled by the engine's straight-through backward pass.

use std::f64::consts::PI;

use nvcim_core::device::RngStream;
use nvcim_core::nn::{backward, evaluate_accuracy, forward, Dataset, Network};
use nvcim_core::quant::{quantize_network, QuantConfig};
use rand::seq::SliceRandom;

use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    /// Peak learning rate; decays to zero on a half cosine over the epochs.
    pub lr: f64,
    pub momentum: f64,
    /// Weight bits for straight-through quantization; `None` trains in
    /// full precision.
    pub weight_bits: Option<u32>,
    /// Device bits recorded in the manifest of the final model.
    pub device_bits: u32,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_bits: Some(4),
            device_bits: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub net: Network,
    pub epochs: Vec<EpochReport>,
}

fn quantize_into(shadow: &[f64], bits: u32, out: &mut [f64]) {
    let w_max = shadow.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if w_max == 0.0 {
        out.copy_from_slice(shadow);
        return;
    }
    let s = w_max / ((1u64 << bits) - 1) as f64;
    for (o, w) in out.iter_mut().zip(shadow) {
        *o = (w / s).round() * s;
    }
}

/// Trains `net` in place of its current weights. With zero epochs the
/// network is returned untouched; otherwise the result carries quantized
/// weights and their manifest metadata (when `weight_bits` is set).
pub fn train_model(
    net: Network,
    data: &Dataset,
    opts: &TrainOptions,
    stream: &RngStream,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Trained, Error> {
    if opts.epochs == 0 {
        return Ok(Trained {
            net,
            epochs: Vec::new(),
        });
    }
    if data.is_empty() {
        return Err(nvcim_core::Error::EmptyDataset.into());
    }
    let batch = opts.batch.clamp(1, data.len());
    let mut shadow = net.weights().to_vec();
    let mut velocity = vec![0.0; shadow.len()];
    let mut work = net;
    let mut reports = Vec::with_capacity(opts.epochs);
    let order_stream = stream.named("train-order");
    for epoch in 0..opts.epochs {
        let lr = opts.lr * 0.5 * (1.0 + (PI * epoch as f64 / opts.epochs as f64).cos());
        let mut perm: Vec<usize> = (0..data.len()).collect();
        perm.shuffle(&mut order_stream.child(epoch as u64).rng());
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, rows) in perm.chunks(batch).enumerate() {
            match opts.weight_bits {
                Some(bits) => quantize_into(&shadow, bits, work.weights_mut()),
                None => work.weights_mut().copy_from_slice(&shadow),
            }
            let mb = data.subset(rows);
            let diverged = |e: nvcim_core::Error| match e {
                nvcim_core::Error::NonFinite(_) => Error::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                },
                other => other.into(),
            };
            let (_, cache) = forward(&work, &mb.inputs).map_err(diverged)?;
            let g = backward(&work, &cache, &mb.targets()).map_err(diverged)?;
            if !g.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: g.loss,
                });
            }
            for ((w, v), d) in shadow.iter_mut().zip(&mut velocity).zip(&g.grads) {
                *v = opts.momentum * *v + d;
                *w -= lr * *v;
            }
            if shadow.iter().any(|w| !w.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: f64::INFINITY,
                });
            }
            loss_sum += g.loss;
            steps += 1;
        }
        let report = EpochReport {
            epoch,
            lr,
            mean_loss: loss_sum / steps as f64,
        };
        on_epoch(&report);
        reports.push(report);
    }
    work.weights_mut().copy_from_slice(&shadow);
    if let Some(bits) = opts.weight_bits {
        let cfg = QuantConfig::for_network(&work, bits, opts.device_bits)?;
        quantize_network(&mut work, &cfg)?;
    }
    Ok(Trained {
        net: work,
        epochs: reports,
    })
}

/// Convenience: test accuracy of a trained model.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64, Error> {
    Ok(evaluate_accuracy(net, data)?)
}
