//! Single-weight perturbation study: how much accuracy is lost when one
//! weight is disturbed, against that weight's magnitude and its second
//! derivative.
//!
//! Each perturbed evaluation reuses the clean activations: the owning
//! layer's output is patched with `δ · ∂O/∂w` (exact, since every weighted
//! layer is linear in its weights) and only the layers after it are re-run.
//! Weights of a penultimate FC layer skip even that and update the logits
//! through the one hidden unit they feed.

use nvcim_core::device::RngStream;
use nvcim_core::nn::{forward, predict_from, Dataset, ForwardCache, LayerSpec, Network};
use nvcim_core::stats::pearson;
use nvcim_core::Tensor;
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationOptions {
    /// Number of weights studied (uniformly sampled); 0 means all.
    pub sample: usize,
    /// Monte Carlo perturbations per weight.
    pub runs: usize,
    /// Standard deviation of the additive perturbation, in weight units.
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightRow {
    pub index: usize,
    pub magnitude: f64,
    pub second: f64,
    /// Clean accuracy minus mean perturbed accuracy.
    pub mean_drop: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationResult {
    pub clean_accuracy: f64,
    pub rows: Vec<WeightRow>,
    pub pearson_second: f64,
    pub pearson_magnitude: f64,
}

impl CorrelationResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("weight_index,magnitude,second,mean_drop\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.index, r.magnitude, r.second, r.mean_drop));
        }
        s
    }
}

/// Indices of the weights to study, ascending.
pub fn sample_weights(n: usize, count: usize, stream: &RngStream) -> Vec<usize> {
    if count == 0 || count >= n {
        return (0..n).collect();
    }
    let mut idx = sample(&mut stream.named("weight-sample").rng(), n, count).into_vec();
    idx.sort_unstable();
    idx
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

/// Adds `delta · ∂O_layer/∂w` to the layer output `out` for the weight at
/// `local` within layer `layer`. Returns `false` for layer kinds without a
/// closed-form patch.
fn patch_output(
    net: &Network,
    layer: usize,
    local: usize,
    delta: f64,
    input: &Tensor,
    out: &mut Tensor,
) -> bool {
    let n = input.batch();
    match net.layers()[layer] {
        LayerSpec::FullyConnected {
            inputs, outputs, ..
        } => {
            if local < inputs * outputs {
                let (j, i) = (local / inputs, local % inputs);
                for r in 0..n {
                    out.row_mut(r)[j] += delta * input.row(r)[i];
                }
            } else {
                let j = local - inputs * outputs;
                for r in 0..n {
                    out.row_mut(r)[j] += delta;
                }
            }
            true
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let ins = net.layer_input_shape(layer);
            let (h, w) = (ins[1], ins[2]);
            let outs = net.layer_shape(layer);
            let (oh, ow) = (outs[1], outs[2]);
            let patch = in_channels * kernel * kernel;
            if local < patch * out_channels {
                let co = local / patch;
                let rem = local % patch;
                let (ci, ky, kx) = (rem / (kernel * kernel), (rem / kernel) % kernel, rem % kernel);
                for r in 0..n {
                    let x = &input.row(r)[ci * h * w..(ci + 1) * h * w];
                    let o = &mut out.row_mut(r)[co * oh * ow..(co + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                o[oy * ow + ox] += delta * x[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            } else {
                let co = local - patch * out_channels;
                for r in 0..n {
                    out.row_mut(r)[co * oh * ow..(co + 1) * oh * ow]
                        .iter_mut()
                        .for_each(|v| *v += delta);
                }
            }
            true
        }
        LayerSpec::BatchNormFolded { channels } => {
            let per = input.row_len() / channels;
            let (c, is_scale) = if local < channels {
                (local, true)
            } else {
                (local - channels, false)
            };
            for r in 0..n {
                let x = &input.row(r)[c * per..(c + 1) * per];
                let o = &mut out.row_mut(r)[c * per..(c + 1) * per];
                for (ov, xv) in o.iter_mut().zip(x) {
                    *ov += if is_scale { delta * xv } else { delta };
                }
            }
            true
        }
        _ => false,
    }
}

struct Perturber<'a> {
    net: &'a Network,
    cache: &'a ForwardCache,
    labels: &'a [usize],
}

impl Perturber<'_> {
    /// `fc → relu → fc(last)`: a weight of the first FC layer moves a single
    /// hidden unit, so the logits change by one column of the output layer
    /// times the change in that unit's activation.
    fn hidden_unit_shortcut(&self, layer: usize, local: usize, delta: f64) -> Option<f64> {
        let layers = self.net.layers();
        if layer + 3 != layers.len() {
            return None;
        }
        let (
            &LayerSpec::FullyConnected { inputs, outputs, .. },
            &LayerSpec::Relu { quant },
            &LayerSpec::FullyConnected {
                inputs: hidden,
                outputs: classes,
                ..
            },
        ) = (&layers[layer], &layers[layer + 1], &layers[layer + 2])
        else {
            return None;
        };
        let j = if local < inputs * outputs { local / inputs } else { local - inputs * outputs };
        let x = self.cache.layer_input(layer);
        let pre = self.cache.layer_input(layer + 1);
        let act = |v: f64| match quant {
            Some(q) => q.apply(v),
            None => v.max(0.0),
        };
        let w2 = &self.net.weights()[self.net.layer_slice(layer + 2).expect("weighted layer")];
        let logits = self.cache.outputs();
        let mut correct = 0usize;
        let mut row = vec![0.0; classes];
        for (r, &label) in self.labels.iter().enumerate() {
            let shift = if local < inputs * outputs { delta * x.row(r)[local % inputs] } else { delta };
            let h = pre.row(r)[j];
            let change = act(h + shift) - act(h);
            row.copy_from_slice(logits.row(r));
            if change != 0.0 {
                for (c, v) in row.iter_mut().enumerate() {
                    *v += w2[c * hidden + j] * change;
                }
            }
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (c, &v)| if v > row[b] { c } else { b });
            correct += usize::from(best == label);
        }
        Some(correct as f64 / self.labels.len() as f64)
    }

    fn accuracy_with(&self, index: usize, delta: f64) -> Result<f64, Error> {
        let layer = self.net.layer_of_weight(index).ok_or(nvcim_core::Error::WeightIndex {
            index,
            len: self.net.weight_count(),
        })?;
        let range = self.net.layer_slice(layer).expect("weighted layer");
        let input = self.cache.layer_input(layer);
        let last = layer + 1 == self.net.layers().len();
        let clean_out = if last {
            self.cache.outputs()
        } else {
            self.cache.layer_input(layer + 1)
        };
        if let Some(acc) = self.hidden_unit_shortcut(layer, index - range.start, delta) {
            return Ok(acc);
        }
        let mut out = clean_out.clone();
        let logits = if patch_output(self.net, layer, index - range.start, delta, input, &mut out) {
            if last {
                out
            } else {
                predict_from(self.net, layer + 1, out)?
            }
        } else {
            let mut net = self.net.clone();
            net.weights_mut()[index] += delta;
            predict_from(&net, layer, input.clone())?
        };
        Ok(correct(&logits, self.labels) as f64 / self.labels.len() as f64)
    }
}

pub fn correlation_study(
    net: &Network,
    data: &Dataset,
    second: &[f64],
    opts: &CorrelationOptions,
    stream: &RngStream,
) -> Result<CorrelationResult, Error> {
    if opts.runs == 0 {
        return Err(Error::Invalid("correlation study needs at least one run".into()));
    }
    if second.len() != net.weight_count() {
        return Err(nvcim_core::Error::RankMismatch {
            expected: net.weight_count(),
            found: second.len(),
        }
        .into());
    }
    if data.is_empty() {
        return Err(nvcim_core::Error::EmptyDataset.into());
    }
    let (logits, cache) = forward(net, &data.inputs)?;
    let clean = correct(&logits, &data.labels) as f64 / data.len() as f64;
    let p = Perturber {
        net,
        cache: &cache,
        labels: &data.labels,
    };
    let indices = sample_weights(net.weight_count(), opts.sample, stream);
    let noise = stream.named("perturbations");
    let rows: Result<Vec<WeightRow>, Error> = indices
        .par_iter()
        .map(|&i| {
            let mut rng = noise.child(i as u64).rng();
            let mut total = 0.0;
            for _ in 0..opts.runs {
                let z: f64 = StandardNormal.sample(&mut rng);
                total += p.accuracy_with(i, opts.noise_std * z)?;
            }
            Ok(WeightRow {
                index: i,
                magnitude: net.weights()[i].abs(),
                second: second[i],
                mean_drop: clean - total / opts.runs as f64,
            })
        })
        .collect();
    let rows = rows?;
    let drops: Vec<f64> = rows.iter().map(|r| r.mean_drop).collect();
    let h: Vec<f64> = rows.iter().map(|r| r.second).collect();
    let m: Vec<f64> = rows.iter().map(|r| r.magnitude).collect();
    Ok(CorrelationResult {
        clean_accuracy: clean,
        pearson_second: pearson(&h, &drops),
        pearson_magnitude: pearson(&m, &drops),
        rows,
    })
}
