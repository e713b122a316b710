//! First- and second-derivative backpropagation.
//!
//! All three passes share one reverse sweep. What changes is how a layer
//! treats its parameters and how per-weight contributions are accumulated:
//!
//! * gradient: plain chain rule, contributions summed;
//! * diagonal: every linear coefficient and every cached input is squared and
//!   the seed is the diagonal of `∂²f/∂O²`, so `∂²f/∂W_ji² = ∂²f/∂O_j² P_i²`
//!   and `∂²f/∂I_i² = 1[I_i > 0] Σ_j W_ji² ∂²f/∂O_j²`;
//! * exact: the seed is a square-root factor `A` of the per-sample output
//!   Hessian (one row per factor column) and per-row weight derivatives are
//!   squared before summing. For piecewise-linear networks every output is
//!   locally linear in any single weight, so `Σ_c (a_cᵀ ∂O/∂w)²` is the exact
//!   Hessian diagonal.

use super::forward::ForwardCache;
use super::gemm::{gemm, Mat};
use super::layer::{ConvGeometry, LayerSpec};
use super::loss::{self, SoftmaxCurvature, Targets};
use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub grads: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondBundle {
    pub second: Vec<f64>,
}

/// Which second-derivative propagation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SecondOrderRule {
    /// Single sweep that keeps only diagonal curvature terms at every layer.
    #[default]
    Diagonal,
    /// Factorised output curvature; one sweep per output dimension.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SecondOrderOptions {
    pub rule: SecondOrderRule,
    pub softmax: SoftmaxCurvature,
}

#[derive(Clone, Copy)]
struct Sweep {
    /// Square every coefficient and cached input.
    square: bool,
    /// Square each row's weight derivative before accumulating.
    row_squares: bool,
    rows_per_sample: usize,
}

fn check_cache(net: &Network, cache: &ForwardCache) -> Result<()> {
    if cache.layer_count() != net.layers().len() {
        return Err(Error::StaleCache {
            expected: net.layers().len(),
            found: cache.layer_count(),
        });
    }
    for (i, a) in cache.activations.iter().enumerate().skip(1) {
        if a.sample_shape() != net.layer_shape(i - 1) {
            return Err(Error::StaleCache {
                expected: net.layers().len(),
                found: cache.layer_count(),
            });
        }
    }
    Ok(())
}

/// Batch-mean gradient of the loss with respect to every weight.
pub fn backward(net: &Network, cache: &ForwardCache, targets: &Targets) -> Result<GradBundle> {
    check_cache(net, cache)?;
    let outputs = cache.outputs();
    let loss = loss::loss(outputs, targets, net.loss_kind())?;
    let seed = loss::output_gradient(outputs, targets, net.loss_kind())?;
    let grads = sweep(
        net,
        cache,
        seed,
        Sweep {
            square: false,
            row_squares: false,
            rows_per_sample: 1,
        },
    );
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(GradBundle { grads, loss })
}

/// Batch-mean diagonal second derivatives using the single-sweep rule.
pub fn backward_second(
    net: &Network,
    cache: &ForwardCache,
    targets: &Targets,
) -> Result<SecondBundle> {
    backward_second_with(net, cache, targets, &SecondOrderOptions::default())
}

pub fn backward_second_with(
    net: &Network,
    cache: &ForwardCache,
    targets: &Targets,
    opts: &SecondOrderOptions,
) -> Result<SecondBundle> {
    check_cache(net, cache)?;
    let outputs = cache.outputs();
    let second = match opts.rule {
        SecondOrderRule::Diagonal => {
            let seed = loss::output_curvature(outputs, targets, net.loss_kind(), opts.softmax)?;
            sweep(
                net,
                cache,
                seed,
                Sweep {
                    square: true,
                    row_squares: false,
                    rows_per_sample: 1,
                },
            )
        }
        SecondOrderRule::Exact => {
            let seed = loss::output_curvature_factor(outputs, targets, net.loss_kind())?;
            sweep(
                net,
                cache,
                seed,
                Sweep {
                    square: false,
                    row_squares: true,
                    rows_per_sample: outputs.row_len(),
                },
            )
        }
    };
    if second.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("second derivative"));
    }
    Ok(SecondBundle { second })
}

fn squared(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v *= *v);
    out
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn sweep(net: &Network, cache: &ForwardCache, seed: Tensor, sw: Sweep) -> Vec<f64> {
    let layers = net.layers();
    let mut acc = vec![0.0; net.weight_count()];
    let mut pending: Vec<Option<Tensor>> = vec![None; layers.len()];
    let mut carried = seed;
    for i in (0..layers.len()).rev() {
        let mut g = carried;
        if let Some(p) = pending[i].take() {
            add_into(&mut g, &p);
        }
        let need_input = i > 0;
        let x = &cache.activations[i];
        let range = net.layer_slice(i);
        let w = net.layer_weights(i);
        let rows = g.batch();
        let in_shape = |s: &[usize]| {
            let mut v = vec![rows];
            v.extend_from_slice(s);
            v
        };
        let input_shape = net.layer_input_shape(i);
        carried = match layers[i] {
            LayerSpec::FullyConnected {
                inputs,
                outputs,
                bias,
            } => {
                let r = range.expect("fc owns weights");
                let dw = &mut acc[r];
                fc_backward(x, &g, inputs, outputs, bias, sw, dw);
                if need_input {
                    let coeff = if sw.square {
                        w[..inputs * outputs].iter().map(|v| v * v).collect()
                    } else {
                        w[..inputs * outputs].to_vec()
                    };
                    let mut gi = Tensor::zeros(in_shape(input_shape));
                    gemm(
                        Mat::new(g.data(), rows, outputs),
                        Mat::new(&coeff, outputs, inputs),
                        0.0,
                        gi.data_mut(),
                    );
                    gi
                } else {
                    Tensor::zeros(vec![0])
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } => {
                let geo =
                    ConvGeometry::new(in_channels, out_channels, input_shape, kernel, stride, padding);
                let r = range.expect("conv owns weights");
                let (dk, db) = acc[r].split_at_mut(geo.kernel_len());
                let db = bias.then_some(db);
                conv_backward(
                    &geo,
                    &w[..geo.kernel_len()],
                    x,
                    &g,
                    sw,
                    dk,
                    db,
                    need_input.then(|| in_shape(input_shape)),
                )
                .unwrap_or_else(|| Tensor::zeros(vec![0]))
            }
            LayerSpec::Relu { quant } => {
                let mut gi = g;
                let width = gi.row_len();
                for r in 0..rows {
                    let xs = x.row(r / sw.rows_per_sample);
                    let dst = &mut gi.data_mut()[r * width..(r + 1) * width];
                    for (d, &xv) in dst.iter_mut().zip(xs) {
                        // ReLU has g'' = 0, so only the (0/1) gate survives in
                        // both the first- and second-order rules.
                        let on = match quant {
                            Some(q) => q.passes(xv),
                            None => xv > 0.0,
                        };
                        if !on {
                            *d = 0.0;
                        }
                    }
                }
                gi
            }
            LayerSpec::MaxPool { .. } => {
                let routes = cache.argmax[i].as_ref().expect("max-pool routes cached");
                let per_out = g.row_len();
                let mut gi = Tensor::zeros(in_shape(input_shape));
                for r in 0..rows {
                    let s = r / sw.rows_per_sample;
                    let route = &routes[s * per_out..(s + 1) * per_out];
                    let src = g.row(r);
                    let dst = gi.row_mut(r);
                    for (o, &idx) in route.iter().enumerate() {
                        dst[idx as usize] += src[o];
                    }
                }
                gi
            }
            LayerSpec::AvgPool { size, stride } => {
                let coeff = 1.0 / (size * size) as f64;
                let coeff = if sw.square { coeff * coeff } else { coeff };
                let (c, h, wd) = (input_shape[0], input_shape[1], input_shape[2]);
                let out_shape = net.layer_shape(i);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut gi = Tensor::zeros(in_shape(input_shape));
                for r in 0..rows {
                    let src = g.row(r);
                    let dst = gi.row_mut(r);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let v = src[(ch * oh + oy) * ow + ox] * coeff;
                                for ky in 0..size {
                                    for kx in 0..size {
                                        dst[ch * h * wd + (oy * stride + ky) * wd + ox * stride + kx] +=
                                            v;
                                    }
                                }
                            }
                        }
                    }
                }
                gi
            }
            LayerSpec::Flatten => g
                .reshape(in_shape(input_shape))
                .expect("flatten preserves element count"),
            LayerSpec::BatchNormFolded { channels } => {
                let r = range.expect("batchnorm owns weights");
                let (dscale, dshift) = acc[r].split_at_mut(channels);
                let (scale, _) = w.split_at(channels);
                let per = g.row_len() / channels;
                let mut gi = g.clone();
                for row in 0..rows {
                    let xs = x.row(row / sw.rows_per_sample);
                    let gs = g.row(row);
                    for c in 0..channels {
                        let span = c * per..(c + 1) * per;
                        let (mut ds, mut dsh) = (0.0, 0.0);
                        for (&gv, &xv) in gs[span.clone()].iter().zip(&xs[span.clone()]) {
                            let xv = if sw.square { xv * xv } else { xv };
                            ds += gv * xv;
                            dsh += gv;
                        }
                        if sw.row_squares {
                            ds *= ds;
                            dsh *= dsh;
                        }
                        dscale[c] += ds;
                        dshift[c] += dsh;
                        let k = if sw.square { scale[c] * scale[c] } else { scale[c] };
                        gi.row_mut(row)[span].iter_mut().for_each(|v| *v *= k);
                    }
                }
                gi
            }
            LayerSpec::ResidualAdd { source, projection } => {
                let branch = match projection {
                    None => g.clone(),
                    Some(p) => {
                        let geo = ConvGeometry::new(
                            p.in_channels,
                            p.out_channels,
                            net.layer_shape(source),
                            1,
                            p.stride,
                            0,
                        );
                        let r = range.expect("projection owns weights");
                        let mut src_shape = vec![rows];
                        src_shape.extend_from_slice(net.layer_shape(source));
                        conv_backward(
                            &geo,
                            w,
                            &cache.activations[source + 1],
                            &g,
                            sw,
                            &mut acc[r],
                            None,
                            Some(src_shape),
                        )
                        .expect("input gradient requested")
                    }
                };
                match &mut pending[source] {
                    Some(p) => add_into(p, &branch),
                    slot @ None => *slot = Some(branch),
                }
                g
            }
        };
    }
    acc
}

fn fc_backward(
    x: &Tensor,
    g: &Tensor,
    inputs: usize,
    outputs: usize,
    bias: bool,
    sw: Sweep,
    dw: &mut [f64],
) {
    let n = x.batch();
    let rows = g.batch();
    let xs = if sw.square { squared(x) } else { x.clone() };
    if sw.row_squares {
        // (g_r ⊗ x_s)² = g_r² ⊗ x_s²: fold rows of a sample before the product.
        let mut g2 = vec![0.0; n * outputs];
        for r in 0..rows {
            let s = r / sw.rows_per_sample;
            for (d, v) in g2[s * outputs..(s + 1) * outputs].iter_mut().zip(g.row(r)) {
                *d += v * v;
            }
        }
        let x2 = squared(x);
        gemm(
            Mat::new(&g2, n, outputs).t(),
            Mat::new(x2.data(), n, inputs),
            1.0,
            &mut dw[..inputs * outputs],
        );
        if bias {
            for s in 0..n {
                for (d, v) in dw[inputs * outputs..].iter_mut().zip(&g2[s * outputs..(s + 1) * outputs]) {
                    *d += v;
                }
            }
        }
    } else {
        debug_assert_eq!(rows, n);
        gemm(
            Mat::new(g.data(), rows, outputs).t(),
            Mat::new(xs.data(), n, inputs),
            1.0,
            &mut dw[..inputs * outputs],
        );
        if bias {
            for r in 0..rows {
                for (d, v) in dw[inputs * outputs..].iter_mut().zip(g.row(r)) {
                    *d += v;
                }
            }
        }
    }
}

/// Accumulates kernel (and bias) derivatives for a convolution and, when
/// `input_shape` is given, returns the derivative with respect to its input.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    geo: &ConvGeometry,
    kernel: &[f64],
    x: &Tensor,
    g: &Tensor,
    sw: Sweep,
    dk: &mut [f64],
    mut db: Option<&mut [f64]>,
    input_shape: Option<Vec<usize>>,
) -> Option<Tensor> {
    let n = x.batch();
    let p = geo.positions();
    let k = geo.patch_len();
    let co = geo.out_channels;
    let coeff: Vec<f64> = if sw.square {
        kernel.iter().map(|v| v * v).collect()
    } else {
        kernel.to_vec()
    };
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    let mut tmp = vec![0.0; co * k];
    let mut gi = input_shape.map(Tensor::zeros);
    for s in 0..n {
        geo.im2col(x.row(s), &mut cols);
        if sw.square {
            cols.iter_mut().for_each(|v| *v *= *v);
        }
        for r in s * sw.rows_per_sample..(s + 1) * sw.rows_per_sample {
            let gr = g.row(r);
            if sw.row_squares {
                gemm(Mat::new(gr, co, p), Mat::new(&cols, k, p).t(), 0.0, &mut tmp);
                for (d, v) in dk.iter_mut().zip(&tmp) {
                    *d += v * v;
                }
            } else {
                gemm(Mat::new(gr, co, p), Mat::new(&cols, k, p).t(), 1.0, dk);
            }
            if let Some(db) = db.as_deref_mut() {
                for (c, chunk) in gr.chunks(p).enumerate() {
                    let sum: f64 = chunk.iter().sum();
                    db[c] += if sw.row_squares { sum * sum } else { sum };
                }
            }
            if let Some(gi) = gi.as_mut() {
                gemm(Mat::new(&coeff, co, k).t(), Mat::new(gr, co, p), 0.0, &mut dcols);
                geo.col2im_add(&dcols, gi.row_mut(r));
            }
        }
    }
    gi
}
