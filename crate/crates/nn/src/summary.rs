/// Static description of one layer application, used for cost accounting.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    BatchNorm2d,
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    /// Elementwise residual addition.
    Add,
    /// A layer with no known cost model.
    Opaque(String),
}

/// One layer in execution order with per-sample input/output shapes
/// (no batch axis).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub name: String,
    pub op: LayerOp,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

/// Models that can describe their layer sequence for a given input shape.
pub trait Summarize {
    fn summary(&self, input: &[usize]) -> Vec<LayerInfo>;
}
