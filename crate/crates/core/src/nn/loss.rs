use super::network::LossKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Supervision for a batch: class indices or explicit regression targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(t) => t.batch(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(rows.iter().map(|&r| c[r]).collect()),
            Targets::Values(t) => Targets::Values(t.gather_rows(rows)),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(c[start..end].to_vec()),
            Targets::Values(t) => Targets::Values(t.slice_rows(start, end)),
        }
    }

    /// Target value for output `j` of row `r` (one-hot for class labels).
    fn value(&self, r: usize, j: usize, width: usize) -> Result<f64> {
        match self {
            Targets::Classes(c) => {
                if c[r] >= width {
                    return Err(Error::LabelOutOfRange {
                        label: c[r],
                        classes: width,
                    });
                }
                Ok(if c[r] == j { 1.0 } else { 0.0 })
            }
            Targets::Values(t) => Ok(t.row(r)[j]),
        }
    }

    fn check(&self, outputs: &Tensor) -> Result<()> {
        if self.len() != outputs.batch() {
            return Err(Error::BatchMismatch {
                outputs: outputs.batch(),
                labels: self.len(),
            });
        }
        match self {
            Targets::Classes(c) => {
                let width = outputs.row_len();
                if let Some(&bad) = c.iter().find(|&&l| l >= width) {
                    return Err(Error::LabelOutOfRange {
                        label: bad,
                        classes: width,
                    });
                }
            }
            Targets::Values(t) => {
                if t.row_len() != outputs.row_len() {
                    return Err(Error::Dimension {
                        layer: 0,
                        kind: "targets",
                        expected: outputs.sample_shape().to_vec(),
                        found: t.sample_shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// How the softmax cross-entropy output curvature is seeded for the
/// diagonal second-derivative pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftmaxCurvature {
    /// `s_j (1 - s_j)` with `s = softmax(O)`: the true Hessian diagonal.
    #[default]
    Standard,
    /// `(1 - O_j / Σ exp O) (O_j / Σ exp O)`, kept only for comparison.
    Literal,
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean loss over the batch.
pub fn loss(outputs: &Tensor, targets: &Targets, kind: LossKind) -> Result<f64> {
    targets.check(outputs)?;
    let n = outputs.batch();
    let width = outputs.row_len();
    let mut total = 0.0;
    for r in 0..n {
        let row = outputs.row(r);
        total += match kind {
            LossKind::L2 => {
                let mut acc = 0.0;
                for (j, &o) in row.iter().enumerate() {
                    let d = o - targets.value(r, j, width)?;
                    acc += d * d;
                }
                acc
            }
            LossKind::SoftmaxCrossEntropy => {
                let Targets::Classes(c) = targets else {
                    return Err(Error::UnknownLoss(
                        "softmax-ce requires class labels".into(),
                    ));
                };
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                lse - row[c[r]]
            }
        };
    }
    let mean = total / n as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(mean)
}

/// `∂f/∂O` for the batch-mean loss.
pub(crate) fn output_gradient(outputs: &Tensor, targets: &Targets, kind: LossKind) -> Result<Tensor> {
    targets.check(outputs)?;
    let n = outputs.batch();
    let width = outputs.row_len();
    let scale = 1.0 / n as f64;
    let mut g = Tensor::zeros(outputs.shape().to_vec());
    for r in 0..n {
        let row = outputs.row(r);
        let dst = g.row_mut(r);
        match kind {
            LossKind::L2 => {
                for j in 0..width {
                    dst[j] = 2.0 * (row[j] - targets.value(r, j, width)?) * scale;
                }
            }
            LossKind::SoftmaxCrossEntropy => {
                let s = softmax_row(row);
                for j in 0..width {
                    dst[j] = (s[j] - targets.value(r, j, width)?) * scale;
                }
            }
        }
    }
    Ok(g)
}

/// Diagonal of `∂²f/∂O²` for the batch-mean loss.
pub(crate) fn output_curvature(
    outputs: &Tensor,
    targets: &Targets,
    kind: LossKind,
    softmax: SoftmaxCurvature,
) -> Result<Tensor> {
    targets.check(outputs)?;
    let n = outputs.batch();
    let scale = 1.0 / n as f64;
    let mut h = Tensor::zeros(outputs.shape().to_vec());
    for r in 0..n {
        let dst = h.row_mut(r);
        match kind {
            LossKind::L2 => dst.fill(2.0 * scale),
            LossKind::SoftmaxCrossEntropy => match softmax {
                SoftmaxCurvature::Standard => {
                    for (d, s) in dst.iter_mut().zip(softmax_row(outputs.row(r))) {
                        *d = s * (1.0 - s) * scale;
                    }
                }
                SoftmaxCurvature::Literal => {
                    let row = outputs.row(r);
                    let denom: f64 = row.iter().map(|v| v.exp()).sum();
                    for (d, &o) in dst.iter_mut().zip(row) {
                        let q = o / denom;
                        *d = (1.0 - q) * q * scale;
                    }
                }
            },
        }
    }
    Ok(h)
}

/// Square-root factor of the per-sample output Hessian: rows `r * C + c`
/// hold vectors `a_c` with `Σ_c a_c a_cᵀ = ∂²f/∂O²` for sample `r`.
pub(crate) fn output_curvature_factor(
    outputs: &Tensor,
    targets: &Targets,
    kind: LossKind,
) -> Result<Tensor> {
    targets.check(outputs)?;
    let n = outputs.batch();
    let width = outputs.row_len();
    let scale = 1.0 / n as f64;
    let mut shape = outputs.shape().to_vec();
    shape[0] = n * width;
    let mut f = Tensor::zeros(shape);
    for r in 0..n {
        match kind {
            LossKind::L2 => {
                let a = (2.0 * scale).sqrt();
                for c in 0..width {
                    f.row_mut(r * width + c)[c] = a;
                }
            }
            LossKind::SoftmaxCrossEntropy => {
                // diag(s) - s sᵀ = Σ_c s_c (e_c - s)(e_c - s)ᵀ
                let s = softmax_row(outputs.row(r));
                for c in 0..width {
                    let a = (s[c] * scale).sqrt();
                    let dst = f.row_mut(r * width + c);
                    for j in 0..width {
                        let e = if j == c { 1.0 } else { 0.0 };
                        dst[j] = a * (e - s[j]);
                    }
                }
            }
        }
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_zero_residual() {
        let o = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let t = Targets::Values(o.clone());
        assert_eq!(loss(&o, &t, LossKind::L2).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        for c in [2usize, 3, 10] {
            let o = Tensor::new(vec![1, c], vec![0.7; c]).unwrap();
            let v = loss(&o, &Targets::Classes(vec![c - 1]), LossKind::SoftmaxCrossEntropy).unwrap();
            assert!((v - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_class_hand_evaluated() {
        let o = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let v = loss(&o, &Targets::Classes(vec![0]), LossKind::SoftmaxCrossEntropy).unwrap();
        let e2 = 2f64.exp();
        assert!((v - -(e2 / (e2 + 1.0)).ln()).abs() < 1e-14);
    }

    #[test]
    fn label_range_and_batch_checked() {
        let o = Tensor::zeros(vec![2, 3]);
        assert_eq!(
            loss(&o, &Targets::Classes(vec![0, 3]), LossKind::SoftmaxCrossEntropy),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        );
        assert_eq!(
            loss(&o, &Targets::Classes(vec![0]), LossKind::L2),
            Err(Error::BatchMismatch { outputs: 2, labels: 1 })
        );
    }

    #[test]
    fn l2_curvature_seed_is_two() {
        let o = Tensor::new(vec![1, 3], vec![0.3, -4.0, 9.0]).unwrap();
        let h = output_curvature(&o, &Targets::Classes(vec![1]), LossKind::L2, SoftmaxCurvature::Standard)
            .unwrap();
        assert_eq!(h.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn factor_reproduces_softmax_hessian() {
        let o = Tensor::new(vec![1, 3], vec![0.3, -1.0, 1.2]).unwrap();
        let f = output_curvature_factor(&o, &Targets::Classes(vec![0]), LossKind::SoftmaxCrossEntropy)
            .unwrap();
        let s = softmax_row(o.row(0));
        for i in 0..3 {
            for j in 0..3 {
                let got: f64 = (0..3).map(|c| f.row(c)[i] * f.row(c)[j]).sum();
                let want = if i == j { s[i] } else { 0.0 } - s[i] * s[j];
                assert!((got - want).abs() < 1e-14);
            }
        }
    }
}
