use super::backward::{backward_second_with, SecondBundle, SecondOrderOptions};
use super::forward::{forward, predict};
use super::loss::{loss, Targets};
use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled classification data: a batch tensor of inputs plus one class
/// index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.batch() != labels.len() {
            return Err(Error::BatchMismatch {
                outputs: inputs.batch(),
                labels: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn targets(&self) -> Targets {
        Targets::Classes(self.labels.clone())
    }

    /// First `n` rows (or everything, when `n` exceeds the size).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.gather_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    /// Contiguous chunks of at most `size` rows.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Dataset> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let end = (start + size).min(self.len());
            Dataset {
                inputs: self.inputs.slice_rows(start, end),
                labels: self.labels[start..end].to_vec(),
            }
        })
    }
}

const EVAL_CHUNK: usize = 500;

/// Number of rows whose arg-max output equals the label.
pub fn count_correct(net: &Network, data: &Dataset) -> Result<usize> {
    let mut correct = 0;
    for chunk in data.chunks(EVAL_CHUNK) {
        let out = predict(net, &chunk.inputs)?;
        correct += out
            .argmax_rows()
            .iter()
            .zip(&chunk.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate_accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(count_correct(net, data)? as f64 / data.len() as f64)
}

/// Mean loss over a dataset, evaluated in chunks.
pub fn dataset_loss(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for chunk in data.chunks(EVAL_CHUNK) {
        let out = predict(net, &chunk.inputs)?;
        total += loss(&out, &chunk.targets(), net.loss_kind())? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Second derivatives averaged over a whole dataset, accumulated one batch
/// at a time in a single pass.
pub fn dataset_second(
    net: &Network,
    data: &Dataset,
    batch: usize,
    opts: &SecondOrderOptions,
) -> Result<SecondBundle> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = vec![0.0; net.weight_count()];
    for chunk in data.chunks(batch) {
        let (_, cache) = forward(net, &chunk.inputs)?;
        let h = backward_second_with(net, &cache, &chunk.targets(), opts)?;
        let w = chunk.len() as f64 / data.len() as f64;
        for (a, v) in acc.iter_mut().zip(&h.second) {
            *a += w * v;
        }
    }
    Ok(SecondBundle { second: acc })
}

/// Central second difference of the loss in one weight:
/// `(f(w + Δ) - 2 f(w) + f(w - Δ)) / Δ²`. The weight is restored bit-exactly.
pub fn finite_diff_second(
    net: &mut Network,
    inputs: &Tensor,
    targets: &Targets,
    index: usize,
    step: f64,
) -> Result<f64> {
    let n = net.weight_count();
    if index >= n {
        return Err(Error::WeightIndex { index, len: n });
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::BadStep(step));
    }
    let kind = net.loss_kind();
    let original = net.weights()[index];
    let eval = |value: f64, net: &mut Network| -> Result<f64> {
        net.weights_mut()[index] = value;
        let out = predict(net, inputs);
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                net.weights_mut()[index] = original;
                return Err(e);
            }
        };
        loss(&out, targets, kind)
    };
    let result = (|| {
        let plus = eval(original + step, net)?;
        let minus = eval(original - step, net)?;
        let center = eval(original, net)?;
        Ok::<_, Error>((plus - 2.0 * center + minus) / (step * step))
    })();
    net.weights_mut()[index] = original;
    let value = match result {
        Ok(v) => v,
        Err(Error::NonFinite(_)) => return Err(Error::NonFiniteDifference { index, step }),
        Err(e) => return Err(e),
    };
    if !value.is_finite() {
        return Err(Error::NonFiniteDifference { index, step });
    }
    Ok(value)
}
