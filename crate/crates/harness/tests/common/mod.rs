#![allow(dead_code)]

use std::path::PathBuf;

use nvcim_core::device::RngStream;
use nvcim_core::nn::Network;
use nvcim_harness::experiment::{load_data, Data};
use nvcim_harness::models::{mlp_toy, ModelId};
use nvcim_harness::train::{train_model, TrainOptions};

/// `NVCIM_DATA_DIR`, or `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    let dir = std::env::var_os("NVCIM_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    assert!(
        dir.join("train-labels-idx1-ubyte").exists(),
        "MNIST IDX files not found in {}; set NVCIM_DATA_DIR",
        dir.display()
    );
    dir
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Trained, quantized toy MLP and its data.
pub fn toy() -> (Network, Data) {
    let data = load_data(ModelId::MlpToy, 1).unwrap();
    let mut net = mlp_toy();
    let s = RngStream::new(11);
    net.init_he(&mut s.named("init").rng());
    let opts = TrainOptions {
        epochs: 30,
        lr: 0.1,
        ..TrainOptions::default()
    };
    let net = train_model(net, &data.train, &opts, &s, |_| {}).unwrap().net;
    (net, data)
}
