//! Linearly separable toy classification data.

use nvcim_core::device::RngStream;
use nvcim_core::nn::Dataset;
use nvcim_core::Tensor;
use rand::Rng;

pub const TOY_FEATURES: usize = 8;
pub const TOY_CLASSES: usize = 3;

/// Points in `[-1, 1]^d` labelled by the argmax of a fixed random linear
/// map. Points closer than `margin` to a decision boundary are rejected, so
/// a perfect linear classifier exists with that margin.
pub fn toy_dataset(samples: usize, margin: f64, stream: &RngStream) -> Dataset {
    let mut rng = stream.named("toy").rng();
    let w: Vec<f64> = (0..TOY_FEATURES * TOY_CLASSES)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut inputs = Vec::with_capacity(samples * TOY_FEATURES);
    let mut labels = Vec::with_capacity(samples);
    while labels.len() < samples {
        let x: Vec<f64> = (0..TOY_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut scores: Vec<(f64, usize)> = (0..TOY_CLASSES)
            .map(|c| {
                let row = &w[c * TOY_FEATURES..(c + 1) * TOY_FEATURES];
                (row.iter().zip(&x).map(|(a, b)| a * b).sum(), c)
            })
            .collect();
        scores.sort_by(|a, b| b.0.total_cmp(&a.0));
        if scores[0].0 - scores[1].0 < margin {
            continue;
        }
        inputs.extend_from_slice(&x);
        labels.push(scores[0].1);
    }
    let inputs = Tensor::new(vec![samples, TOY_FEATURES], inputs).expect("toy tensor");
    Dataset::new(inputs, labels).expect("toy dataset")
}
