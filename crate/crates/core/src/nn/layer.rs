use crate::error::{Error, Result};

/// Uniform activation quantizer applied after a ReLU: outputs are clamped to
/// `[0, ceiling]` and rounded to `2^bits - 1` equal steps. The backward pass
/// treats it as a straight-through clipped ReLU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationQuant {
    pub bits: u32,
    pub ceiling: f64,
}

impl ActivationQuant {
    pub fn step(&self) -> f64 {
        self.ceiling / ((1u64 << self.bits) - 1) as f64
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        let step = self.step();
        (x.clamp(0.0, self.ceiling) / step).round() * step
    }

    /// Straight-through gate: 1 inside the clipping window, 0 outside.
    #[inline]
    pub fn passes(&self, x: f64) -> bool {
        x > 0.0 && x < self.ceiling
    }
}

/// 1x1 strided convolution applied to the shortcut branch of a residual add.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projection {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    FullyConnected {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Relu {
        quant: Option<ActivationQuant>,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    AvgPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    /// Inference-form batch norm: per-channel `scale * x + shift`.
    BatchNormFolded {
        channels: usize,
    },
    /// Adds the output of layer `source` (optionally projected) to the
    /// running activation.
    ResidualAdd {
        source: usize,
        projection: Option<Projection>,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::FullyConnected { .. } => "fc",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu { .. } => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::BatchNormFolded { .. } => "batchnorm",
            LayerSpec::ResidualAdd { .. } => "residual",
        }
    }

    /// Number of entries this layer owns in the flat weight vector.
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerSpec::FullyConnected {
                inputs,
                outputs,
                bias,
            } => inputs * outputs + if bias { outputs } else { 0 },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                in_channels * out_channels * kernel * kernel + if bias { out_channels } else { 0 }
            }
            LayerSpec::BatchNormFolded { channels } => 2 * channels,
            LayerSpec::ResidualAdd {
                projection: Some(p),
                ..
            } => p.in_channels * p.out_channels,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape. `source_shape` is
    /// the output shape of the residual source, when this is a residual add.
    pub(crate) fn output_shape(
        &self,
        index: usize,
        input: &[usize],
        source_shape: Option<&[usize]>,
    ) -> Result<Vec<usize>> {
        let dim_err = |expected: Vec<usize>| Error::Dimension {
            layer: index,
            kind: self.kind(),
            expected,
            found: input.to_vec(),
        };
        match *self {
            LayerSpec::FullyConnected {
                inputs, outputs, ..
            } => {
                if input != [inputs] {
                    return Err(dim_err(vec![inputs]));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(dim_err(vec![in_channels, 0, 0]));
                }
                if kernel == 0 || stride == 0 {
                    return Err(Error::InvalidLayer {
                        layer: index,
                        reason: "kernel and stride must be positive".into(),
                    });
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < kernel || w < kernel {
                    return Err(dim_err(vec![in_channels, kernel, kernel]));
                }
                Ok(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu { quant } => {
                if let Some(q) = quant {
                    if q.bits == 0 || q.bits > 16 || !(q.ceiling > 0.0) {
                        return Err(Error::InvalidLayer {
                            layer: index,
                            reason: format!("bad activation quantizer {q:?}"),
                        });
                    }
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool { size, stride } | LayerSpec::AvgPool { size, stride } => {
                if size == 0 || stride == 0 {
                    return Err(Error::InvalidLayer {
                        layer: index,
                        reason: "pool size and stride must be positive".into(),
                    });
                }
                if input.len() != 3 || input[1] < size || input[2] < size {
                    return Err(dim_err(vec![0, size, size]));
                }
                Ok(vec![
                    input[0],
                    (input[1] - size) / stride + 1,
                    (input[2] - size) / stride + 1,
                ])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::BatchNormFolded { channels } => {
                if input.is_empty() || input[0] != channels {
                    return Err(dim_err(vec![channels]));
                }
                Ok(input.to_vec())
            }
            LayerSpec::ResidualAdd { source, projection } => {
                if source >= index {
                    return Err(Error::InvalidLayer {
                        layer: index,
                        reason: format!("residual source {source} must precede the layer"),
                    });
                }
                let src = source_shape.expect("source shape supplied for residual layers");
                let projected = match projection {
                    None => src.to_vec(),
                    Some(p) => {
                        if src.len() != 3 || src[0] != p.in_channels || p.stride == 0 {
                            return Err(Error::Dimension {
                                layer: index,
                                kind: "residual-projection",
                                expected: vec![p.in_channels, 0, 0],
                                found: src.to_vec(),
                            });
                        }
                        vec![
                            p.out_channels,
                            (src[1] - 1) / p.stride + 1,
                            (src[2] - 1) / p.stride + 1,
                        ]
                    }
                };
                if projected != input {
                    return Err(Error::Dimension {
                        layer: index,
                        kind: "residual",
                        expected: input.to_vec(),
                        found: projected,
                    });
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Geometry of a 2-D convolution over one sample, shared by the forward and
/// backward passes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        input: &[usize],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let (height, width) = (input[1], input[2]);
        Self {
            in_channels,
            out_channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        }
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Columns of the im2col matrix.
    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    /// Unfolds one `[C, H, W]` sample into a `[C*k*k, Ho*Wo]` matrix.
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        let k = self.kernel;
        for c in 0..self.in_channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_height {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.out_width..(oy + 1) * self.out_width];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        if self.stride == 1 && self.padding == 0 {
                            line.copy_from_slice(&src[kx..kx + self.out_width]);
                            continue;
                        }
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds an im2col-shaped matrix back onto a `[C, H, W]` sample.
    pub fn col2im_add(&self, cols: &[f64], x: &mut [f64]) {
        let p = self.positions();
        let k = self.kernel;
        for c in 0..self.in_channels {
            let plane = &mut x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_height {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..self.out_width {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += src[oy * self.out_width + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
