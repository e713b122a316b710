//! Model zoo.
//!
//! LeNet and the toy MLP are wired end to end. ConvNet and ResNet-18 are
//! definitions only; nothing here trains them.

use std::fmt;
use std::str::FromStr;

use nvcim_core::nn::{ActivationQuant, LayerSpec, LossKind, Network, Projection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelId {
    LeNet,
    MlpToy,
    ConvNet,
    ResNet18,
}

impl ModelId {
    pub fn name(&self) -> &'static str {
        match self {
            ModelId::LeNet => "lenet",
            ModelId::MlpToy => "mlp-toy",
            ModelId::ConvNet => "convnet",
            ModelId::ResNet18 => "resnet18",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lenet" => Ok(ModelId::LeNet),
            "mlp-toy" => Ok(ModelId::MlpToy),
            "convnet" => Ok(ModelId::ConvNet),
            "resnet18" => Ok(ModelId::ResNet18),
            other => Err(format!(
                "unknown model `{other}` (expected lenet, mlp-toy, convnet or resnet18)"
            )),
        }
    }
}

/// Ceiling of the LeNet activation quantizer.
pub const LENET_ACT_CEILING: f64 = 4.0;

fn relu(act_bits: Option<u32>, ceiling: f64) -> LayerSpec {
    LayerSpec::Relu {
        quant: act_bits.map(|bits| ActivationQuant { bits, ceiling }),
    }
}

fn conv(ci: usize, co: usize, k: usize, stride: usize, padding: usize, bias: bool) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: ci,
        out_channels: co,
        kernel: k,
        stride,
        padding,
        bias,
    }
}

fn fc(i: usize, o: usize) -> LayerSpec {
    LayerSpec::FullyConnected {
        inputs: i,
        outputs: o,
        bias: true,
    }
}

fn maxpool() -> LayerSpec {
    LayerSpec::MaxPool { size: 2, stride: 2 }
}

/// Classic two-conv, two-FC LeNet for 28x28 MNIST digits:
/// conv5(6) → pool → conv5(16) → pool → fc400 → fc10, ReLU throughout.
pub fn lenet(act_bits: Option<u32>) -> Network {
    let r = || relu(act_bits, LENET_ACT_CEILING);
    let layers = vec![
        conv(1, 6, 5, 1, 0, true),
        r(),
        maxpool(),
        conv(6, 16, 5, 1, 0, true),
        r(),
        maxpool(),
        LayerSpec::Flatten,
        fc(256, 400),
        r(),
        fc(400, 10),
    ];
    Network::new(vec![1, 28, 28], layers, LossKind::SoftmaxCrossEntropy).expect("lenet topology")
}

/// One-hidden-layer MLP.
pub fn mlp(inputs: usize, hidden: usize, classes: usize, loss: LossKind) -> Network {
    let layers = vec![fc(inputs, hidden), relu(None, 0.0), fc(hidden, classes)];
    Network::new(vec![inputs], layers, loss).expect("mlp topology")
}

/// Small MLP used with the synthetic toy data.
pub fn mlp_toy() -> Network {
    mlp(
        crate::synthetic::TOY_FEATURES,
        16,
        crate::synthetic::TOY_CLASSES,
        LossKind::SoftmaxCrossEntropy,
    )
}

/// VGG-style CIFAR-10 network: 2×128, 2×256, 2×512 3x3 convolutions with
/// a pool after each pair, then fc1024 and fc10.
pub fn convnet(act_bits: Option<u32>) -> Network {
    let r = || relu(act_bits, 6.0);
    let mut layers = Vec::new();
    let mut ci = 3;
    for co in [128, 256, 512] {
        layers.extend([conv(ci, co, 3, 1, 1, false), r(), conv(co, co, 3, 1, 1, false), r()]);
        layers.push(maxpool());
        ci = co;
    }
    layers.extend([LayerSpec::Flatten, fc(512 * 4 * 4, 1024), r(), fc(1024, 10)]);
    Network::new(vec![3, 32, 32], layers, LossKind::SoftmaxCrossEntropy).expect("convnet topology")
}

/// ResNet-18 with inference-folded batch norm and projection shortcuts.
/// `side` is the input height/width (32 for CIFAR-10, 64 for Tiny ImageNet).
pub fn resnet18(classes: usize, side: usize, act_bits: Option<u32>) -> Network {
    let r = || relu(act_bits, 6.0);
    let mut layers = vec![
        conv(3, 64, 3, 1, 1, false),
        LayerSpec::BatchNormFolded { channels: 64 },
        r(),
    ];
    let mut ci = 64;
    let mut hw = side;
    for (stage, co) in [64usize, 128, 256, 512].into_iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let source = layers.len() - 1;
            layers.extend([
                conv(ci, co, 3, stride, 1, false),
                LayerSpec::BatchNormFolded { channels: co },
                r(),
                conv(co, co, 3, 1, 1, false),
                LayerSpec::BatchNormFolded { channels: co },
            ]);
            let projection = (stride != 1 || ci != co).then_some(Projection {
                in_channels: ci,
                out_channels: co,
                stride,
            });
            layers.push(LayerSpec::ResidualAdd { source, projection });
            layers.push(r());
            ci = co;
            hw = hw.div_ceil(stride);
        }
    }
    layers.extend([
        LayerSpec::AvgPool { size: hw, stride: hw },
        LayerSpec::Flatten,
        fc(512, classes),
    ]);
    Network::new(vec![3, side, side], layers, LossKind::SoftmaxCrossEntropy)
        .expect("resnet18 topology")
}

pub fn build(id: ModelId, act_bits: Option<u32>) -> Network {
    match id {
        ModelId::LeNet => lenet(act_bits),
        ModelId::MlpToy => mlp_toy(),
        ModelId::ConvNet => convnet(act_bits),
        ModelId::ResNet18 => resnet18(10, 32, act_bits),
    }
}
