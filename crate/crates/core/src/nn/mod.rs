//! Dense/conv network engine with first- and second-order backprop.

mod backward;
mod eval;
mod forward;
mod gemm;
mod layer;
mod loss;
mod network;
mod serialize;

pub use backward::{
    backward, backward_second, backward_second_with, GradBundle, SecondBundle, SecondOrderOptions,
    SecondOrderRule,
};
pub use eval::{
    count_correct, dataset_loss, dataset_second, evaluate_accuracy, finite_diff_second, Dataset,
};
pub use forward::{forward, predict, predict_from, ForwardCache};
pub use layer::{ActivationQuant, LayerSpec, Projection};
pub use loss::{loss, SoftmaxCurvature, Targets};
pub use network::{LossKind, Network, QuantMeta};
pub use serialize::{load_network, read_network, save_network, write_network};
