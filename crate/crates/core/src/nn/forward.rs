use super::gemm::{gemm, Mat};
use super::layer::{ActivationQuant, ConvGeometry, LayerSpec};
use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intermediates recorded by [`forward`]: every layer input, the max-pool
/// argmax routing, and the final outputs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the batch, `activations[i + 1]` is layer `i`'s output.
    pub(crate) activations: Vec<Tensor>,
    /// Flat in-sample index of the winning input for every max-pool output.
    pub(crate) argmax: Vec<Option<Vec<u32>>>,
}

impl ForwardCache {
    pub fn layer_count(&self) -> usize {
        self.activations.len() - 1
    }

    pub fn batch(&self) -> usize {
        self.activations[0].batch()
    }

    pub fn outputs(&self) -> &Tensor {
        self.activations.last().expect("cache holds the input")
    }

    /// Input tensor of layer `i` (the pre-activation, for ReLU layers).
    pub fn layer_input(&self, i: usize) -> &Tensor {
        &self.activations[i]
    }

    pub fn argmax(&self, i: usize) -> Option<&[u32]> {
        self.argmax[i].as_deref()
    }

    /// Compact record of every discrete routing decision in the pass: ReLU
    /// on/off pattern, activation clipping window, and max-pool winners.
    /// Two passes with equal signatures lie on the same linear piece.
    pub fn gating_signature(&self, net: &Network) -> Vec<u32> {
        let mut sig = Vec::new();
        for (i, layer) in net.layers().iter().enumerate() {
            match layer {
                LayerSpec::Relu { quant } => {
                    for &x in self.activations[i].data() {
                        let on = match quant {
                            Some(q) => q.passes(x),
                            None => x > 0.0,
                        };
                        sig.push(on as u32);
                    }
                }
                LayerSpec::MaxPool { .. } => {
                    if let Some(a) = &self.argmax[i] {
                        sig.extend_from_slice(a);
                    }
                }
                _ => {}
            }
        }
        sig
    }
}

fn check_input(net: &Network, batch: &Tensor) -> Result<()> {
    if batch.sample_shape() != net.input_shape() || batch.batch() == 0 {
        return Err(Error::Dimension {
            layer: 0,
            kind: "input",
            expected: net.input_shape().to_vec(),
            found: batch.sample_shape().to_vec(),
        });
    }
    Ok(())
}

/// Runs the network on a batch and records everything both backward passes need.
pub fn forward(net: &Network, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
    check_input(net, batch)?;
    let mut activations = Vec::with_capacity(net.layers().len() + 1);
    let mut argmax = Vec::with_capacity(net.layers().len());
    activations.push(batch.clone());
    for (i, layer) in net.layers().iter().enumerate() {
        let x = &activations[i];
        let (out, routes) = apply_layer(net, i, layer, x, |src| &activations[src + 1])?;
        argmax.push(routes);
        activations.push(out);
    }
    let outputs = activations.last().cloned().expect("non-empty");
    if !outputs.all_finite() {
        return Err(Error::NonFinite("forward outputs"));
    }
    Ok((outputs, ForwardCache { activations, argmax }))
}

/// Forward pass that keeps only what later residual layers need.
pub fn predict(net: &Network, batch: &Tensor) -> Result<Tensor> {
    check_input(net, batch)?;
    run_from(net, 0, batch.clone())
}

/// Runs layers `start..` on `x`, a batch shaped like the input of layer
/// `start`. Residual edges may not reach back before `start`.
pub fn predict_from(net: &Network, start: usize, x: Tensor) -> Result<Tensor> {
    let layers = net.layers();
    if start >= layers.len() {
        return Err(Error::InvalidLayer {
            layer: start,
            reason: format!("network has {} layers", layers.len()),
        });
    }
    let expected = net.layer_input_shape(start);
    if x.sample_shape() != expected {
        return Err(Error::Dimension {
            layer: start,
            kind: layers[start].kind(),
            expected: expected.to_vec(),
            found: x.sample_shape().to_vec(),
        });
    }
    for (i, layer) in layers.iter().enumerate().skip(start) {
        if let LayerSpec::ResidualAdd { source, .. } = layer {
            if *source < start {
                return Err(Error::InvalidLayer {
                    layer: i,
                    reason: format!("residual source {source} precedes start layer {start}"),
                });
            }
        }
    }
    run_from(net, start, x)
}

fn run_from(net: &Network, start: usize, x: Tensor) -> Result<Tensor> {
    let n_layers = net.layers().len();
    let mut keep = vec![false; n_layers];
    for layer in net.layers() {
        if let LayerSpec::ResidualAdd { source, .. } = layer {
            keep[*source] = true;
        }
    }
    let mut saved: Vec<Option<Tensor>> = vec![None; n_layers];
    let mut current = x;
    for (i, layer) in net.layers().iter().enumerate().skip(start) {
        let out = match *layer {
            LayerSpec::Relu { quant } => {
                relu_in_place(quant, current.data_mut());
                current
            }
            LayerSpec::Flatten => {
                let mut shape = vec![current.batch()];
                shape.extend_from_slice(net.layer_shape(i));
                current.reshape(shape)?
            }
            _ => {
                apply_layer(net, i, layer, &current, |src| {
                    saved[src].as_ref().expect("residual source retained")
                })?
                .0
            }
        };
        if keep[i] {
            saved[i] = Some(out.clone());
        }
        current = out;
    }
    Ok(current)
}

fn apply_layer<'a, F>(
    net: &Network,
    i: usize,
    layer: &LayerSpec,
    x: &Tensor,
    source: F,
) -> Result<(Tensor, Option<Vec<u32>>)>
where
    F: Fn(usize) -> &'a Tensor,
{
    let n = x.batch();
    let out_shape = |s: &[usize]| {
        let mut v = vec![n];
        v.extend_from_slice(s);
        v
    };
    let w = net.layer_weights(i);
    let in_shape = net.layer_input_shape(i);
    let shape = net.layer_shape(i);
    Ok(match *layer {
        LayerSpec::FullyConnected {
            inputs,
            outputs,
            bias,
        } => {
            let mut out = Tensor::zeros(out_shape(shape));
            gemm(
                Mat::new(x.data(), n, inputs),
                Mat::new(w, outputs, inputs).t(),
                0.0,
                out.data_mut(),
            );
            if bias {
                let b = &w[inputs * outputs..];
                for r in 0..n {
                    for (o, bj) in out.row_mut(r).iter_mut().zip(b) {
                        *o += bj;
                    }
                }
            }
            (out, None)
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => {
            let g = ConvGeometry::new(in_channels, out_channels, in_shape, kernel, stride, padding);
            let b = bias.then(|| &w[g.kernel_len()..]);
            (conv_forward(&g, &w[..g.kernel_len()], b, x, out_shape(shape)), None)
        }
        LayerSpec::Relu { quant } => {
            let mut out = x.clone();
            relu_in_place(quant, out.data_mut());
            (out, None)
        }
        LayerSpec::MaxPool { size, stride } => {
            let (out, routes) = max_pool(x, in_shape, shape, size, stride);
            (out, Some(routes))
        }
        LayerSpec::AvgPool { size, stride } => (avg_pool(x, in_shape, shape, size, stride), None),
        LayerSpec::Flatten => (x.clone().reshape(out_shape(shape))?, None),
        LayerSpec::BatchNormFolded { channels } => {
            let mut out = x.clone();
            let per = x.row_len() / channels;
            let (scale, shift) = w.split_at(channels);
            for r in 0..n {
                for (c, chunk) in out.row_mut(r).chunks_mut(per).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = scale[c] * *v + shift[c]);
                }
            }
            (out, None)
        }
        LayerSpec::ResidualAdd { source: src, projection } => {
            let s = source(src);
            let mut out = x.clone();
            match projection {
                None => {
                    for (o, v) in out.data_mut().iter_mut().zip(s.data()) {
                        *o += v;
                    }
                }
                Some(p) => {
                    let g = ConvGeometry::new(
                        p.in_channels,
                        p.out_channels,
                        net.layer_shape(src),
                        1,
                        p.stride,
                        0,
                    );
                    let proj = conv_forward(&g, w, None, s, out_shape(shape));
                    for (o, v) in out.data_mut().iter_mut().zip(proj.data()) {
                        *o += v;
                    }
                }
            }
            (out, None)
        }
    })
}

fn relu_in_place(quant: Option<ActivationQuant>, data: &mut [f64]) {
    match quant {
        Some(q) => {
            let step = q.step();
            data.iter_mut()
                .for_each(|v| *v = (v.clamp(0.0, q.ceiling) / step).round() * step);
        }
        None => data.iter_mut().for_each(|v| *v = v.max(0.0)),
    }
}

/// Columns per batched im2col block.
const CONV_BLOCK_COLS: usize = 512;

pub(crate) fn conv_forward(
    g: &ConvGeometry,
    kernel: &[f64],
    bias: Option<&[f64]>,
    x: &Tensor,
    out_shape: Vec<usize>,
) -> Tensor {
    let n = x.batch();
    let p = g.positions();
    let pl = g.patch_len();
    let co = g.out_channels;
    let block = (CONV_BLOCK_COLS / p).clamp(1, n.max(1));
    let mut cols = vec![0.0; pl * p * block];
    let mut sample_cols = vec![0.0; pl * p];
    let mut prod = vec![0.0; co * p * block];
    let mut out = Tensor::zeros(out_shape);
    let mut start = 0;
    while start < n {
        let b = block.min(n - start);
        let width = b * p;
        // Lay the samples side by side: cols is [patch_len, b * p].
        for s in 0..b {
            g.im2col(x.row(start + s), &mut sample_cols);
            for r in 0..pl {
                cols[r * width + s * p..r * width + (s + 1) * p]
                    .copy_from_slice(&sample_cols[r * p..(r + 1) * p]);
            }
        }
        gemm(
            Mat::new(kernel, co, pl),
            Mat::new(&cols[..pl * width], pl, width),
            0.0,
            &mut prod[..co * width],
        );
        for s in 0..b {
            let dst = out.row_mut(start + s);
            for c in 0..co {
                let src = &prod[c * width + s * p..c * width + (s + 1) * p];
                let d = &mut dst[c * p..(c + 1) * p];
                match bias {
                    Some(bv) => d.iter_mut().zip(src).for_each(|(o, v)| *o = v + bv[c]),
                    None => d.copy_from_slice(src),
                }
            }
        }
        start += b;
    }
    out
}

fn max_pool(
    x: &Tensor,
    in_shape: &[usize],
    out_shape: &[usize],
    size: usize,
    stride: usize,
) -> (Tensor, Vec<u32>) {
    let n = x.batch();
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut shape = vec![n];
    shape.extend_from_slice(out_shape);
    let mut out = Tensor::zeros(shape);
    let mut routes = vec![0u32; n * c * oh * ow];
    let per_out = c * oh * ow;
    for r in 0..n {
        let src = x.row(r);
        let dst = out.row_mut(r);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = ch * h * w + (oy * stride) * w + ox * stride;
                    let mut best = src[best_idx];
                    for ky in 0..size {
                        for kx in 0..size {
                            let idx = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    dst[o] = best;
                    routes[r * per_out + o] = best_idx as u32;
                }
            }
        }
    }
    (out, routes)
}

fn avg_pool(
    x: &Tensor,
    in_shape: &[usize],
    out_shape: &[usize],
    size: usize,
    stride: usize,
) -> Tensor {
    let n = x.batch();
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut shape = vec![n];
    shape.extend_from_slice(out_shape);
    let mut out = Tensor::zeros(shape);
    let inv = 1.0 / (size * size) as f64;
    for r in 0..n {
        let src = x.row(r);
        let dst = out.row_mut(r);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..size {
                        for kx in 0..size {
                            acc += src[ch * h * w + (oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    dst[(ch * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
    }
    out
}
